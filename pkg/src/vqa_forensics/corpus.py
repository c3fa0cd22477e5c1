"""Procedural real/fake image corpus with per-generator spectral fingerprints.

Every sample is a pure function of ``(corpus seed, label, split, index)``.
"Real" images are a smooth random field plus sensor noise. Fakes add two
fixed cosine patterns on top: one shared by the generator family and one
specific to the generator. Patterns sit at distinct spatial frequencies, so
they are mutually orthogonal and orthogonal to the low-frequency base field.

Seen generators and families use frequencies that are periodic on a 4-pixel
lattice (multiples of N/4 and N/8 cycles); the unseen generators use a finer
N/8 lattice that training never exposes.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FREQ_UNIT = 32  # frequencies below are expressed for a 32-pixel grid


class GeneratorId(enum.Enum):
    REAL = "real"
    PROGAN = "progan"
    STYLEGAN = "stylegan"
    DIFF_PROJECTEDGAN = "diff_projectedgan"
    LDM = "ldm"
    GLIDE = "glide"
    SD14 = "sd14"
    ADM = "adm"
    DDPM = "ddpm"
    IDDPM = "iddpm"
    PNDM = "pndm"
    DIFF_STYLEGAN2 = "diff_stylegan2"
    PROJECTEDGAN = "projectedgan"

    @property
    def family(self) -> str | None:
        return _FAMILY.get(self)

    @property
    def is_fake(self) -> bool:
        return self is not GeneratorId.REAL

    @property
    def display_name(self) -> str:
        """Name as it appears in answer text."""
        return _DISPLAY[self]

    @property
    def seen(self) -> bool:
        return self in SEEN_FAKES


SEEN_FAKES = (
    GeneratorId.PROGAN, GeneratorId.STYLEGAN, GeneratorId.DIFF_PROJECTEDGAN,
    GeneratorId.LDM, GeneratorId.GLIDE, GeneratorId.SD14,
)
UNSEEN_FAKES = (
    GeneratorId.ADM, GeneratorId.DDPM, GeneratorId.IDDPM, GeneratorId.PNDM,
    GeneratorId.DIFF_STYLEGAN2, GeneratorId.PROJECTEDGAN,
)
ALL_FAKES = SEEN_FAKES + UNSEEN_FAKES
FAMILIES = ("gan", "diffusion")

_FAMILY = {
    GeneratorId.PROGAN: "gan",
    GeneratorId.STYLEGAN: "gan",
    GeneratorId.DIFF_PROJECTEDGAN: "gan",
    GeneratorId.DIFF_STYLEGAN2: "gan",
    GeneratorId.PROJECTEDGAN: "gan",
    GeneratorId.LDM: "diffusion",
    GeneratorId.GLIDE: "diffusion",
    GeneratorId.SD14: "diffusion",
    GeneratorId.ADM: "diffusion",
    GeneratorId.DDPM: "diffusion",
    GeneratorId.IDDPM: "diffusion",
    GeneratorId.PNDM: "diffusion",
}

_DISPLAY = {
    GeneratorId.REAL: "real",
    GeneratorId.PROGAN: "progan",
    GeneratorId.STYLEGAN: "stylegan",
    GeneratorId.DIFF_PROJECTEDGAN: "diff-projectedgan",
    GeneratorId.LDM: "ldm",
    GeneratorId.GLIDE: "glide",
    GeneratorId.SD14: "stable diffusion",
    GeneratorId.ADM: "adm",
    GeneratorId.DDPM: "ddpm",
    GeneratorId.IDDPM: "iddpm",
    GeneratorId.PNDM: "pndm",
    GeneratorId.DIFF_STYLEGAN2: "diff-stylegan2",
    GeneratorId.PROJECTEDGAN: "projectedgan",
}

# (ky, kx) cycles per 32 pixels
FAMILY_FREQS = {"gan": (8, 8), "diffusion": (8, 24)}
MODEL_FREQS = {
    GeneratorId.PROGAN: (0, 8),
    GeneratorId.STYLEGAN: (8, 0),
    GeneratorId.DIFF_PROJECTEDGAN: (0, 16),
    GeneratorId.LDM: (16, 0),
    GeneratorId.GLIDE: (16, 16),
    GeneratorId.SD14: (8, 16),
    GeneratorId.ADM: (4, 0),
    GeneratorId.DDPM: (0, 4),
    GeneratorId.IDDPM: (4, 4),
    GeneratorId.PNDM: (4, 28),
    GeneratorId.DIFF_STYLEGAN2: (12, 0),
    GeneratorId.PROJECTEDGAN: (0, 12),
}
_BASE_MAX_FREQ = 2
_LABEL_CODE = {g: i for i, g in enumerate(GeneratorId)}
_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass
class CorpusConfig:
    seed: int = 0
    size: int = 32
    train_per_fake: int = 600
    test_per_fake: int = 300
    train_real: int = 3600
    test_real: int = 300
    test_per_unseen: int = 300
    alpha_family: float = 0.10
    alpha_model: float = 0.15
    noise_sigma: float = 0.05
    base_sigma: float = 0.06
    # projection of LDM's model pattern onto the gan family pattern
    ldm_gan_overlap: float = 0.0

    def __post_init__(self):
        if self.size % 8:
            raise ValueError("image size must be a multiple of 8")
        counts = (self.train_per_fake, self.test_per_fake, self.train_real,
                  self.test_real, self.test_per_unseen)
        if min(counts) < 1:
            raise ValueError("all corpus counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d)


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: GeneratorId
    split: str
    index: int = 0

    @property
    def id(self) -> str:
        return sample_id(self.label, self.split, self.index)


def sample_id(label: GeneratorId, split: str, index: int) -> str:
    return f"{split}-{label.value}-{index:05d}"


def _cosine(size: int, freq: tuple[int, int]) -> np.ndarray:
    ky, kx = (f * size / FREQ_UNIT for f in freq)
    y, x = np.mgrid[0:size, 0:size]
    p = np.cos(2 * np.pi * (ky * y + kx * x) / size)
    return p / np.linalg.norm(p)


def fingerprint_bank(size: int = 32, ldm_gan_overlap: float = 0.0) -> dict:
    """Unit-norm patterns keyed by family name or GeneratorId."""
    bank: dict = {fam: _cosine(size, f) for fam, f in FAMILY_FREQS.items()}
    for gen, f in MODEL_FREQS.items():
        bank[gen] = _cosine(size, f)
    if ldm_gan_overlap:
        c = ldm_gan_overlap
        bank[GeneratorId.LDM] = np.sqrt(1 - c * c) * bank[GeneratorId.LDM] + c * bank["gan"]
    return bank


def _rng(seed: int, label: GeneratorId, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _LABEL_CODE[label], _SPLIT_CODE[split], index])


def _base_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    terms = [(ky, kx) for ky in range(-_BASE_MAX_FREQ, _BASE_MAX_FREQ + 1)
             for kx in range(0, _BASE_MAX_FREQ + 1) if (kx, ky) > (0, 0)]
    amps = rng.normal(0.0, 1.0, len(terms))
    phases = rng.uniform(0, 2 * np.pi, len(terms))
    for (ky, kx), a, ph in zip(terms, amps, phases):
        field_ += a * np.cos(2 * np.pi * (ky * y + kx * x) + ph)
    # each cosine term has variance a^2 / 2
    field_ *= sigma / np.sqrt(len(terms) / 2)
    return 0.5 + field_


def synth_real(seed: int, index: int, split: str = "train",
               config: CorpusConfig | None = None) -> ImageSample:
    cfg = config or CorpusConfig(seed=seed)
    rng = _rng(seed, GeneratorId.REAL, split, index)
    base = _base_field(rng, cfg.size, cfg.base_sigma)
    px = base + rng.normal(0.0, cfg.noise_sigma, base.shape)
    return ImageSample(np.clip(px, 0.0, 1.0), GeneratorId.REAL, split, index)


def synth_fake(gen: GeneratorId, seed: int, index: int, split: str = "train",
               config: CorpusConfig | None = None) -> ImageSample:
    if gen is GeneratorId.REAL:
        raise ValueError("synth_fake needs a fake generator, got REAL")
    cfg = config or CorpusConfig(seed=seed)
    bank = fingerprint_bank(cfg.size, cfg.ldm_gan_overlap)
    rng = _rng(seed, gen, split, index)
    base = _base_field(rng, cfg.size, cfg.base_sigma)
    scale = cfg.size  # unit-norm pattern * sqrt(H*W) has unit RMS
    px = (base
          + cfg.alpha_family * scale * bank[gen.family]
          + cfg.alpha_model * scale * bank[gen]
          + rng.normal(0.0, cfg.noise_sigma, base.shape))
    return ImageSample(np.clip(px, 0.0, 1.0), gen, split, index)


def synth(label: GeneratorId, seed: int, index: int, split: str,
          config: CorpusConfig | None = None) -> ImageSample:
    if label is GeneratorId.REAL:
        return synth_real(seed, index, split, config)
    return synth_fake(label, seed, index, split, config)


# ------------------------------------------------------------------ PGM I/O


def write_pgm(path: Path, pixels: np.ndarray, comment: str | None = None) -> None:
    q = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    header = b"P5\n"
    if comment:
        header += f"# {comment}\n".encode()
    header += f"{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """8-bit binary PGM -> float array in [0, 1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / 255.0


# ------------------------------------------------------------------ manifest


@dataclass
class SampleRecord:
    id: str
    label: GeneratorId
    split: str
    path: str

    def to_json(self) -> dict:
        return {"id": self.id, "label": self.label.value, "family": self.label.family,
                "split": self.split, "path": self.path}


@dataclass
class CorpusManifest:
    seed: int
    config: CorpusConfig
    records: list[SampleRecord] = field(default_factory=list)
    root: Path | None = None

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.records:
            out.setdefault(r.label.value, {}).setdefault(r.split, 0)
            out[r.label.value][r.split] += 1
        return out

    def select(self, split: str, labels=None) -> list[SampleRecord]:
        keep = None if labels is None else set(labels)
        return [r for r in self.records
                if r.split == split and (keep is None or r.label in keep)]

    def real_test_pool(self) -> list[SampleRecord]:
        return self.select("test", [GeneratorId.REAL])

    def test_subset(self, gen: GeneratorId) -> list[SampleRecord]:
        """The generator's test fakes followed by the shared real test pool."""
        if gen is GeneratorId.REAL:
            raise ValueError("test subsets are keyed by a fake generator")
        return self.select("test", [gen]) + self.real_test_pool()

    def load_pixels(self, records: list[SampleRecord]) -> np.ndarray:
        root = self.root or Path(".")
        return np.stack([read_pgm(root / r.path) for r in records])


def _plan(cfg: CorpusConfig) -> list[tuple[GeneratorId, str, int]]:
    plan = []
    for i in range(cfg.train_real):
        plan.append((GeneratorId.REAL, "train", i))
    for i in range(cfg.test_real):
        plan.append((GeneratorId.REAL, "test", i))
    for g in SEEN_FAKES:
        plan += [(g, "train", i) for i in range(cfg.train_per_fake)]
        plan += [(g, "test", i) for i in range(cfg.test_per_fake)]
    for g in UNSEEN_FAKES:
        plan += [(g, "test", i) for i in range(cfg.test_per_unseen)]
    return plan


def build_corpus(config: CorpusConfig, out_dir: Path) -> CorpusManifest:
    """Synthesize every sample to PGM and write ``manifest.jsonl`` + ``corpus.json``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    records = []
    for label, split, idx in _plan(config):
        sid = sample_id(label, split, idx)
        rel = Path("images") / split / label.value / f"{sid}.pgm"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        sample = synth(label, config.seed, idx, split, config)
        write_pgm(out_dir / rel, sample.pixels)
        records.append(SampleRecord(sid, label, split, rel.as_posix()))
    records.sort(key=lambda r: r.id)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    (out_dir / "corpus.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d samples to %s", len(records), out_dir)
    return CorpusManifest(config.seed, config, records, out_dir)


def load_manifest(corpus_dir: Path) -> CorpusManifest:
    corpus_dir = Path(corpus_dir)
    cfg = CorpusConfig.from_dict(json.loads((corpus_dir / "corpus.json").read_text()))
    records = []
    with open(corpus_dir / "manifest.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            records.append(SampleRecord(d["id"], GeneratorId(d["label"]), d["split"], d["path"]))
    return CorpusManifest(cfg.seed, cfg, records, corpus_dir)
