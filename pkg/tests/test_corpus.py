import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqa_forensics.corpus import (
    ALL_FAKES, SEEN_FAKES, UNSEEN_FAKES, CorpusConfig, GeneratorId, build_corpus,
    fingerprint_bank, load_manifest, read_pgm, synth_fake, synth_real, write_pgm,
)

GAN = {GeneratorId.PROGAN, GeneratorId.STYLEGAN, GeneratorId.DIFF_PROJECTEDGAN,
       GeneratorId.DIFF_STYLEGAN2, GeneratorId.PROJECTEDGAN}


def projections(pixels, bank, keys):
    centered = pixels - pixels.mean()
    return np.array([np.sum(centered * bank[k]) for k in keys])


def test_family_mapping():
    for g in ALL_FAKES:
        assert g.family == ("gan" if g in GAN else "diffusion")
    assert GeneratorId.REAL.family is None
    assert len(SEEN_FAKES) == 6 and len(UNSEEN_FAKES) == 6


def test_fingerprint_bank_is_orthonormal():
    bank = fingerprint_bank(32)
    keys = ["gan", "diffusion"] + list(ALL_FAKES)
    m = np.stack([bank[k].ravel() for k in keys])
    np.testing.assert_allclose(m @ m.T, np.eye(len(keys)), atol=1e-10)
    # patterns are zero-mean so a DC shift never reads as a fingerprint
    np.testing.assert_allclose(m.sum(axis=1), 0.0, atol=1e-10)


def test_overlap_knob_projects_ldm_onto_gan():
    bank = fingerprint_bank(32, ldm_gan_overlap=0.3)
    assert np.sum(bank[GeneratorId.LDM] * bank["gan"]) == pytest.approx(0.3)
    assert np.linalg.norm(bank[GeneratorId.LDM]) == pytest.approx(1.0)


def test_synth_real_deterministic():
    a, b = synth_real(3, 17), synth_real(3, 17)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert synth_real(3, 18).pixels.tobytes() != a.pixels.tobytes()


def test_synth_real_mean_pixel():
    means = [synth_real(0, i).pixels.mean() for i in range(100)]
    assert 0.3 <= np.mean(means) <= 0.7


def test_synth_real_uncorrelated_with_fingerprints():
    bank = fingerprint_bank(32)
    keys = ["gan", "diffusion"] + list(ALL_FAKES)
    corrs = []
    for i in range(100):
        px = synth_real(0, i).pixels
        c = px - px.mean()
        corrs.append(projections(px, bank, keys) / np.linalg.norm(c))
    # expectation over samples, per pattern
    assert np.max(np.abs(np.mean(corrs, axis=0))) < 0.1


def test_synth_fake_deterministic_and_in_range():
    a = synth_fake(GeneratorId.GLIDE, 1, 4)
    b = synth_fake(GeneratorId.GLIDE, 1, 4)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_synth_fake_rejects_real():
    with pytest.raises(ValueError):
        synth_fake(GeneratorId.REAL, 0, 0)


def test_own_model_fingerprint_dominates():
    bank = fingerprint_bank(32)
    for g in ALL_FAKES:
        hits = 0
        for i in range(100):
            p = projections(synth_fake(g, 0, i).pixels, bank, ALL_FAKES)
            hits += ALL_FAKES[int(np.argmax(p))] is g
        assert hits >= 99, g


def test_ldm_reads_as_diffusion_family():
    bank = fingerprint_bank(32)
    for i in range(20):
        gan, diff = projections(synth_fake(GeneratorId.LDM, 0, i).pixels, bank, ["gan", "diffusion"])
        assert diff > abs(gan)


def test_linear_probe_separability():
    # argmax over fingerprint inner products is a linear classifier
    bank = fingerprint_bank(32)
    keys = [GeneratorId.REAL] + list(ALL_FAKES)
    correct = total = 0
    for g in keys:
        for i in range(50):
            px = synth_real(0, i, "test").pixels if g is GeneratorId.REAL else \
                synth_fake(g, 0, i, "test").pixels
            p = projections(px, bank, ALL_FAKES)
            pred = GeneratorId.REAL if p.max() < 0.5 * 0.15 * 32 else ALL_FAKES[int(np.argmax(p))]
            correct += pred is g
            total += 1
    assert correct / total >= 0.99


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(GeneratorId)), st.integers(0, 2**16), st.integers(0, 10**6),
       st.sampled_from(["train", "test"]))
def test_every_sample_in_unit_interval(gen, seed, index, split):
    cfg = CorpusConfig(seed=seed)
    s = synth_real(seed, index, split, cfg) if gen is GeneratorId.REAL else \
        synth_fake(gen, seed, index, split, cfg)
    assert s.pixels.shape == (32, 32)
    assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0


def test_pgm_round_trip(tmp_path):
    px = np.random.default_rng(0).uniform(size=(8, 16))
    write_pgm(tmp_path / "a.pgm", px, comment="config=abc seed=3")
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (8, 16)
    np.testing.assert_allclose(back, np.rint(px * 255) / 255)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n# config=abc seed=3\n16 8\n255\n")


def test_bad_counts_rejected():
    with pytest.raises(ValueError):
        CorpusConfig(train_real=0)


def test_default_train_count():
    c = CorpusConfig()
    assert 6 * c.train_per_fake + c.train_real == 7200


SMALL = dict(train_per_fake=3, test_per_fake=2, train_real=4, test_real=3, test_per_unseen=2)


def test_build_corpus_small(tmp_path):
    m = build_corpus(CorpusConfig(seed=5, **SMALL), tmp_path / "c")
    counts = m.counts()
    assert counts["real"] == {"train": 4, "test": 3}
    assert counts["progan"] == {"train": 3, "test": 2}
    assert counts["adm"] == {"test": 2}
    lines = (tmp_path / "c" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4 + 3 + 6 * 5 + 6 * 2
    first = json.loads(lines[0])
    assert set(first) == {"id", "label", "family", "split", "path"}
    ids = [json.loads(x)["id"] for x in lines]
    assert ids == sorted(ids)


def test_build_corpus_deterministic(tmp_path):
    cfg = CorpusConfig(seed=9, **SMALL)
    build_corpus(cfg, tmp_path / "a")
    build_corpus(cfg, tmp_path / "b")
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_shared_real_pool(tmp_path):
    m = build_corpus(CorpusConfig(seed=1, **SMALL), tmp_path)
    pool = {r.path for r in m.real_test_pool()}
    assert len(pool) == 3
    for g in ALL_FAKES:
        sub = m.test_subset(g)
        assert {r.path for r in sub if r.label is GeneratorId.REAL} == pool
        assert {r.label for r in sub} == {g, GeneratorId.REAL}


def test_load_manifest_round_trip(tmp_path):
    m = build_corpus(CorpusConfig(seed=2, **SMALL), tmp_path)
    back = load_manifest(tmp_path)
    assert back.seed == 2 and back.config == m.config
    assert [r.to_json() for r in back.records] == [r.to_json() for r in m.records]
    px = back.load_pixels(back.test_subset(GeneratorId.SD14))
    assert px.shape == (2 + 3, 32, 32)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_corpus(CorpusConfig(**SMALL), blocker / "sub")
