"""End-to-end acceptance checks.

The session fixture runs the full default pipeline twice into the same output
directory (about ten minutes on one CPU core). Every test records a verdict
through the ``criterion`` fixture, so the terminal summary shows one PASS or
FAIL line per criterion even when assertions stop a test early.
"""

import csv
import json
import time

import numpy as np
import pytest

from vqa_forensics import cli
from vqa_forensics.answers import build_question, parse_answer, render_label
from vqa_forensics.config import load_config
from vqa_forensics.corpus import GeneratorId, synth
from vqa_forensics.metrics import rouge2, rouge2_tokens, rougeL, rougeL_tokens
from vqa_forensics.model import ModelConfig, ToyVLM, split_checkpoint
from vqa_forensics.prompt_tuning import TuneTriplet, batch_loss_and_grad, init_pseudo_embedding

BUDGET_S = 15 * 60


def _snapshot(out):
    files = sorted((out / "eval").glob("*/predictions.jsonl")) + sorted((out / "eval").glob("*/metrics.json"))
    return {str(p.relative_to(out)): p.read_bytes() for p in files}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = load_config(overrides=[("out", str(out))], environ={})
    t0 = time.perf_counter()
    summary = cli.run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    first = _snapshot(out)
    # second execution through the CLI entry point, same config and seed
    code = cli.main(["run", "--out", str(out)])
    return {"out": out, "summary": summary, "elapsed": elapsed, "first": first,
            "second": _snapshot(out), "second_code": code}


def _metrics(out, tag):
    return json.loads((out / "eval" / tag / "metrics.json").read_text())["report"]


# ------------------------------------------------------------------ 1


def test_c1_vstar_gradient_matches_finite_differences(criterion):
    t0 = time.perf_counter()
    model = ToyVLM.create(ModelConfig(), seed=11)
    rng = np.random.default_rng(2024)
    q = model.vocab.tokenize(build_question(True))
    gens = list(GeneratorId)
    worst = 0.0
    for k in range(5):
        g = gens[rng.integers(len(gens))]
        trip = [TuneTriplet(synth(g, 5, int(rng.integers(1000)), "train").pixels, q,
                            model.vocab.answer(render_label(g)))]
        v = init_pseudo_embedding(100 + k, model.cfg.d)
        _, grad = batch_loss_and_grad(model, v, trip)
        h = 1e-5
        num = np.empty_like(v)
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = h
            num[i] = (batch_loss_and_grad(model, v + e, trip)[0]
                      - batch_loss_and_grad(model, v - e, trip)[0]) / (2 * h)
        rel = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-12)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 60
    criterion(1, "v* gradient vs central differences", ok,
              f"max elementwise rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def test_c2_freeze_contract(pipeline, criterion):
    out = pipeline["out"]
    theta_pre, v_none = split_checkpoint((out / "backbone.ckpt").read_bytes())
    theta_post, v_tuned = split_checkpoint((out / "tuned.ckpt").read_bytes())
    recorded = pipeline["summary"]["pretrain"]["provenance"]["checkpoints"]["backbone"]["theta"]
    ok = theta_pre == theta_post and v_none != v_tuned and cli._sha(theta_post) == recorded
    criterion(2, "theta section byte-identical after tuning, v* record differs", ok,
              f"theta {len(theta_post)} bytes, sha {recorded}")
    assert ok


# ------------------------------------------------------------------ 3


def _bigram_oracle(a, b):
    # multiset intersection by explicit matching and removal
    if len(a) < 2 or len(b) < 2:
        return 1.0 if (len(a) < 2 and len(b) < 2 and list(a) == list(b)) else 0.0
    ra = list(zip(a, a[1:]))
    rb = list(zip(b, b[1:]))
    pool, hits = list(rb), 0
    for x in ra:
        if x in pool:
            pool.remove(x)
            hits += 1
    p, r = hits / len(ra), hits / len(rb)
    return 0.0 if hits == 0 else 2 * p * r / (p + r)


def _lcs_oracle(a, b):
    # textbook full-table DP, indexed from the end
    n, m = len(a), len(b)
    t = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            t[i][j] = t[i + 1][j + 1] + 1 if a[i] == b[j] else max(t[i + 1][j], t[i][j + 1])
    return t[0][0]


def _rougeL_oracle(a, b):
    if not a and not b:
        return 1.0
    lcs = _lcs_oracle(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return 2 * p * r / (p + r)


def test_c3_rouge_oracles(criterion):
    rng = np.random.default_rng(7)
    alphabet = ["a", "fake", "sample", "gan", "ldm", "model", "is", "it"]
    worst = 0.0
    for _ in range(200):
        a = list(rng.choice(alphabet, size=rng.integers(0, 12)))
        b = list(rng.choice(alphabet, size=rng.integers(0, 12)))
        worst = max(worst, abs(rouge2_tokens(a, b) - _bigram_oracle(a, b)),
                    abs(rougeL_tokens(a, b) - _rougeL_oracle(a, b)))
    fixed = [
        (rouge2("a fake sample", "a fake sample"), 1.0),
        (rougeL("a fake sample", "a fake sample"), 1.0),
        (rouge2("a b", "c d"), 0.0),
        (rougeL("a b", "c d"), 0.0),
        (rouge2("the cat sat", "the cat ran"), 0.5),
        (rougeL("a b c d", "a c d"), 6 / 7),
    ]
    fixed_ok = all(abs(got - want) < 1e-12 for got, want in fixed)
    ok = worst < 1e-9 and fixed_ok
    criterion(3, "ROUGE-2 / ROUGE-L equal brute-force oracles", ok,
              f"200 pairs, max |diff| {worst:.1e}, fixed cases {'ok' if fixed_ok else 'WRONG'}")
    assert ok


# ------------------------------------------------------------------ 4


def test_c4_grammar_round_trip(criterion):
    bad = []
    for g in GeneratorId:
        p = parse_answer(render_label(g))
        fake = g is not GeneratorId.REAL
        if p.unparseable or p.is_fake != fake or (fake and (p.model_name != g or p.model_category != g.family)):
            bad.append(g.value)
    ok = not bad
    criterion(4, "answer grammar round trip", ok,
              f"{len(GeneratorId)} ids" + (f", failed {bad}" if bad else ""))
    assert ok


# ------------------------------------------------------------------ 5


def test_c5_seen_detection_and_rouge(pipeline, criterion):
    rep = _metrics(pipeline["out"], "vlm_soft_prompt-seen")
    det = rep["average"]["detection"]
    rl = {k: v["rougeL"] for k, v in rep["attribution"].items()}
    ok = det["acc"] >= 0.95 and det["f1"] >= 0.95 and min(rl.values()) >= 0.90 \
        and pipeline["elapsed"] < BUDGET_S
    criterion(5, "seen subsets: detection and ROUGE-L", ok,
              f"ACC {det['acc']:.4f}, F1 {det['f1']:.4f}, min ROUGE-L {min(rl.values()):.4f}, "
              f"pipeline {pipeline['elapsed']:.0f}s")
    assert ok


# ------------------------------------------------------------------ 6


def test_c6_unseen_detection(pipeline, criterion):
    rep = _metrics(pipeline["out"], "vlm_soft_prompt-unseen")
    acc = rep["average"]["detection"]["acc"]
    ok = acc >= 0.75 and acc > 0.5
    criterion(6, "unseen subsets: detection", ok, f"average ACC {acc:.4f} over {rep['subsets']}")
    assert ok


# ------------------------------------------------------------------ 7


def test_c7_soft_tuning_benefit(pipeline, criterion):
    out = pipeline["out"]
    tuned = _metrics(out, "vlm_soft_prompt-seen")["average"]["attribution"]["acc"]
    random = _metrics(out, "vlm_random_prompt-seen")["average"]["attribution"]["acc"]
    rows = [r for r in csv.reader(l for l in (out / "tune_history.csv").read_text().splitlines()
                                  if not l.startswith("#"))]
    loss = {int(r[0]): float(r[1]) for r in rows[1:]}
    ok = tuned - random >= 0.05 and loss[5] < loss[1]
    criterion(7, "tuned v* beats random v*, tuning loss falls", ok,
              f"attribution ACC {tuned:.4f} vs {random:.4f}, loss {loss[1]:.4f} -> {loss[5]:.4f}")
    assert ok


# ------------------------------------------------------------------ 8


def test_c8_confusion_conservation(pipeline, criterion):
    out = pipeline["out"]
    problems, runs = [], 0
    for edir in sorted((out / "eval").iterdir()):
        runs += 1
        _, recs = cli.read_predictions(edir / "predictions.jsonl")
        rep = json.loads((edir / "metrics.json").read_text())["report"]
        n_unparseable = sum(r["parsed"]["is_fake"] == "UNPARSEABLE" for r in recs)
        if rep["population"]["evaluated"] != len(recs):
            problems.append(f"{edir.name}: population")
        if "unparseable" in rep["population"] and rep["population"]["unparseable"] != n_unparseable:
            problems.append(f"{edir.name}: unparseable count")
        for key, mats in rep["confusion"]["per_subset"].items():
            b = np.array(mats["binary"]["matrix"])
            if b.sum() != rep["detection"][key]["n"]:
                problems.append(f"{edir.name}/{key}: binary total")
            tp = b[1, 1]
            for name in ("family", "model"):
                if name in mats and np.array(mats[name]["matrix"]).sum() != tp:
                    problems.append(f"{edir.name}/{key}: {name} total")
    ok = not problems and runs == 7
    criterion(8, "confusion matrices conserve the population", ok,
              f"{runs} eval runs" + (f", {problems}" if problems else ""))
    assert ok


# ------------------------------------------------------------------ 9


def test_c9_determinism(pipeline, criterion):
    a, b = pipeline["first"], pipeline["second"]
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = pipeline["second_code"] == 0 and not diff and len(a) == 14
    criterion(9, "two full pipelines are byte-identical", ok,
              f"{len(a)} files compared" + (f", differ: {diff}" if diff else ""))
    assert ok
