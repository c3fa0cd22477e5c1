"""Small convolutional real-vs-fake classifier used as the comparison row.

Two stride-2 convolutions with ReLU, global average pooling and a single
logit. Trained with binary cross-entropy under the same AdamW/cosine recipe
as prompt tuning; fake is the positive class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .answers import ParsedAnswer
from .corpus import GeneratorId
from .metrics import detection_metrics
from .model import DivergenceError, MAGIC, CorruptArtifact, pack_params, split_checkpoint, unpack_params
from .prompt_tuning import AdamState, adamw_step, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class BaselineConfig:
    channels: tuple[int, int] = (8, 16)
    kernels: tuple[int, int] = (4, 3)
    epochs: int = 5
    batch_size: int = 16
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.kernels = tuple(self.kernels)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class BaselineHistory:
    epoch_loss: list[float] = field(default_factory=list)


def init_baseline(config: BaselineConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([config.seed, 1])
    c1, c2 = config.channels
    k1, k2 = config.kernels

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)

    return {
        "conv1_w": he((c1, 1, k1, k1)),
        "conv1_b": np.zeros((c1, 1, 1)),
        "conv2_w": he((c2, c1, k2, k2)),
        "conv2_b": np.zeros((c2, 1, 1)),
        "head_w": rng.normal(0.0, 1.0 / math.sqrt(c2), (c2, 1)),
        "head_b": np.zeros(1),
    }


def baseline_logits(params, pixels: np.ndarray) -> ad.Tensor:
    """(B, H, W) pixels in [0, 1] -> (B,) logits of P(fake)."""
    x = (np.asarray(pixels, dtype=np.float64) - 0.5)[:, None]
    h = ad.relu(ad.add(ad.conv2d(x, params["conv1_w"], stride=2), params["conv1_b"]))
    h = ad.relu(ad.add(ad.conv2d(h, params["conv2_w"], stride=2), params["conv2_b"]))
    B, C, H, W = h.shape
    pooled = ad.mul(ad.sum(ad.reshape(h, (B, C, H * W)), axis=2), 1.0 / (H * W))
    z = ad.add(ad.matmul(pooled, params["head_w"]), params["head_b"])
    return ad.reshape(z, (B,))


def predict_proba(params: dict[str, np.ndarray], pixels: np.ndarray, batch: int = 256) -> np.ndarray:
    frozen = {k: ad.Tensor(v) for k, v in params.items()}
    out = []
    for s in range(0, len(pixels), batch):
        z = baseline_logits(frozen, pixels[s:s + batch]).data
        out.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(out) if out else np.zeros(0)


def train_baseline(pixels: np.ndarray, labels: list[GeneratorId],
                   config: BaselineConfig) -> tuple[dict[str, np.ndarray], BaselineHistory]:
    if len(labels) == 0:
        raise ValueError("baseline training needs a non-empty train split")
    params = init_baseline(config)
    y = np.array([g.is_fake for g in labels], dtype=np.float64)
    n = len(labels)
    steps = math.ceil(n / config.batch_size)
    total = steps * config.epochs
    names = list(params)
    states = {k: AdamState.zeros_like(v) for k, v in params.items()}
    history = BaselineHistory()
    t = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            tape = ad.Tape()
            leaves = {k: tape.leaf(params[k]) for k in names}
            try:
                loss = ad.bce_with_logits(baseline_logits(leaves, pixels[idx]), y[idx])
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"baseline diverged at epoch {epoch} step {s}: {exc}") from exc
            grads = ad.grads(tape, loss, [leaves[k] for k in names])
            lr = cosine_lr(t, total, config.lr)
            t += 1
            for k, g in zip(names, grads):
                params[k], states[k] = adamw_step(params[k], g, states[k], t, lr, config,
                                                  decay=params[k].ndim > 1)
            losses.append(float(loss.data))
        history.epoch_loss.append(float(np.mean(losses)))
        if not math.isfinite(history.epoch_loss[-1]):
            raise DivergenceError(f"baseline loss is {history.epoch_loss[-1]} after epoch {epoch}")
        log.info("baseline epoch %d: mean loss %.4f", epoch, history.epoch_loss[-1])
    return params, history


def baseline_verdicts(probs: np.ndarray) -> list[ParsedAnswer]:
    # a probability of exactly 0.5 counts as fake
    return [ParsedAnswer(bool(p >= 0.5)) for p in probs]


def eval_baseline(params: dict[str, np.ndarray], pixels: np.ndarray,
                  truth: list[GeneratorId]) -> dict:
    return detection_metrics(baseline_verdicts(predict_proba(params, pixels)), truth)


def save_baseline(path: Path, params: dict[str, np.ndarray], config: BaselineConfig,
                  extra: dict | None = None) -> None:
    header = {"kind": "baseline_cnn", "dims": asdict(config), "extra": extra or {}}
    Path(path).write_bytes(pack_params(params, header))


def load_baseline(path: Path) -> tuple[dict[str, np.ndarray], BaselineConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CorruptArtifact(f"{path}: bad checkpoint magic")
    section, rest = split_checkpoint(raw)
    header, params = unpack_params(section, str(path))
    if header.get("kind") != "baseline_cnn" or rest:
        raise CorruptArtifact(f"{path}: not a baseline checkpoint")
    return params, BaselineConfig(**header["dims"]), header["extra"]
