"""Soft prompt tuning: optimize the pseudo-word embedding with the backbone frozen."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import DivergenceError, ToyVLM
from .vocab import TokenSequence

log = logging.getLogger(__name__)


@dataclass
class TuneConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


@dataclass
class TuneTriplet:
    pixels: np.ndarray
    question: TokenSequence
    answer: TokenSequence


@dataclass
class TuneHistory:
    epochs: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def write_csv(self, path: Path, provenance: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "lr"])
            for e, l, r in zip(self.epochs, self.mean_loss, self.lr):
                w.writerow([e, repr(l), repr(r)])


def init_pseudo_embedding(seed: int, d: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 0.02, d)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, t: int, lr: float,
               config, decay: bool = True) -> tuple[np.ndarray, AdamState]:
    """One AdamW update (decoupled decay first, then the bias-corrected Adam step)."""
    if t < 1:
        raise ValueError("step counter t starts at 1")
    if param.shape != grad.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    b1, b2 = config.beta1, config.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p = param * (1 - lr * config.weight_decay) if decay else param
    p = p - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return p, AdamState(m, v)


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _group_by_question(batch: list[TuneTriplet]) -> dict[tuple, list[TuneTriplet]]:
    groups: dict[tuple, list[TuneTriplet]] = {}
    for tr in batch:
        groups.setdefault(tr.question.ids, []).append(tr)
    return groups


def batch_loss_and_grad(model: ToyVLM, vstar: np.ndarray,
                        batch: list[TuneTriplet]) -> tuple[float, np.ndarray]:
    """Mean answer-token cross-entropy over the batch and its gradient w.r.t. v*."""
    tape = ad.Tape()
    leaf = tape.leaf(vstar)
    total = None
    n_tokens = sum(len(tr.answer) for tr in batch)
    for q_ids, group in sorted(_group_by_question(batch).items()):
        px = np.stack([tr.pixels for tr in group])
        loss, _ = model.batch_loss(px, group[0].question, [tr.answer for tr in group], vstar=leaf)
        weighted = ad.mul(loss, sum(len(tr.answer) for tr in group) / n_tokens)
        total = weighted if total is None else ad.add(total, weighted)
    return float(total.data), ad.grad_wrt_leaf(tape, total, leaf)


def tune(model: ToyVLM, vstar: np.ndarray, triplets: list[TuneTriplet],
         config: TuneConfig) -> tuple[np.ndarray, TuneHistory]:
    """Fit v* to the triplets with AdamW under a cosine schedule; theta is untouched."""
    if not triplets:
        raise ValueError("tune needs at least one triplet")
    for tr in triplets:
        if sum(1 for i in tr.question.ids if i == model.vocab.pseudo) != 1:
            raise ValueError("every tuning question must contain exactly one pseudo-word")
    before = model.checksum()
    n = len(triplets)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    v = np.array(vstar, dtype=np.float64)
    state = AdamState.zeros_like(v)
    history = TuneHistory()
    t = 0
    lr = config.lr
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            batch = [triplets[i] for i in order[s * config.batch_size:(s + 1) * config.batch_size]]
            try:
                loss, g = batch_loss_and_grad(model, v, batch)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at epoch {epoch} step {s}: {exc}") from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"loss is {loss} at epoch {epoch} step {s}")
            lr = cosine_lr(t, total_steps, config.lr)
            t += 1
            v, state = adamw_step(v, g, state, t, lr, config)
            losses.append(loss)
        history.epochs.append(epoch)
        history.mean_loss.append(float(np.mean(losses)))
        history.lr.append(lr)
        log.info("tune epoch %d: mean loss %.4f", epoch, history.mean_loss[-1])
    if model.checksum() != before:
        raise RuntimeError("frozen parameters changed during tuning")
    return v, history
