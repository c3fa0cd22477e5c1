"""Backbone pretraining on the partial (detection + family) task.

All parameters are trained. Under the main question the targets name only
the generator family, so the tuned pseudo-word later has to add model-level
attribution to that answer.

Side objectives run alongside:

* a text-only language prior: bare answer templates covering every generator
  name, placed at the context positions the answer occupies in the image
  layout. It teaches the answer grammar and the name vocabulary.
* the pseudo-word layout with a random vector in the S* slot, trained on the
  same family-level targets. An untuned v* therefore still gets the partial
  answer.
* a hard-prompt instruction with the same layout, "... source generator
  model?", trained on the full model-level answer. The capability exists in
  the backbone, but only behind a word the evaluated question never contains.
  Tuning v* has to find a continuous prompt that reaches it.

Images are augmented with random plane-wave distractors (continuous frequency,
orientation and phase) at random strength, labels unchanged. Without them the
detector treats any unfamiliar spectral peak as out-of-distribution and can
flip its verdict on generators it never saw.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .answers import MODEL_QUESTION, build_question, render_family_label, render_label
from .corpus import FAMILY_FREQS, FREQ_UNIT, MODEL_FREQS, GeneratorId
from .model import DivergenceError, ModelConfig, ToyVLM
from .prompt_tuning import AdamState, adamw_step, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lm_prior: bool = True
    lm_weight: float = 0.5
    lm_batch: int = 16
    slot_noise: bool = True
    slot_weight: float = 0.5
    slot_batch: int = 16
    slot_max_std: float = 0.05  # per-sample std of the random S* vector, drawn from U(0, max)
    model_question: bool = True
    model_weight: float = 0.5
    model_batch: int = 16
    distractor_prob: float = 0.5  # per image
    distractor_max_rms: float = 0.2
    distractor_min_gap: float = 1.0  # cycles from any training fingerprint frequency
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.slot_max_std < 0:
            raise ValueError("slot_max_std must be >= 0")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must lie in [0, 1]")
        if self.distractor_max_rms < 0:
            raise ValueError("distractor_max_rms must be >= 0")


@dataclass
class PretrainHistory:
    initial_loss: float = float("nan")
    epoch_loss: list[float] = field(default_factory=list)


def text_prior_loss(model: ToyVLM, labels: list[GeneratorId], start: int, params) -> ad.Tensor:
    """Next-token loss on bare answer templates positioned from ``start``."""
    vocab = model.vocab
    answers = [vocab.answer(render_label(g)) for g in labels]
    L = max(len(a) for a in answers)
    ids = np.full((len(answers), L), vocab.pad, dtype=np.int64)
    targets = np.zeros((len(answers), L), dtype=np.int64)
    mask = np.zeros((len(answers), L), dtype=bool)
    for r, a in enumerate(answers):
        row = [vocab.bos] + list(a.ids[:-1])
        ids[r, :len(row)] = row
        targets[r, :len(a)] = a.ids
        mask[r, :len(a)] = True
    x = model.embed_text(ids, start, params)
    return ad.cross_entropy(model._decode(x, 0, params), targets, mask)


def _too_close(k: np.ndarray, signal: list[tuple[int, int]], size: int, gap: float) -> bool:
    for sy, sx in signal:
        for sign in (1, -1):
            d = (k - sign * np.array([sy, sx]) * size / FREQ_UNIT + size / 2) % size - size / 2
            if np.hypot(*d) < gap:
                return True
    return False


def add_distractors(pixels: np.ndarray, rng: np.random.Generator, config: PretrainConfig,
                    signal: list[tuple[int, int]]) -> np.ndarray:
    """Add one random plane wave to a random subset of images, clipped to [0, 1].

    Frequencies are drawn from a continuous half-disk (up to Nyquist), so they
    almost surely differ from every fingerprint; ones within ``distractor_min_gap``
    of a training fingerprint (``signal``, in cycles per 32 px) are redrawn.
    """
    if config.distractor_prob == 0 or config.distractor_max_rms == 0:
        return pixels
    B, H, W = pixels.shape
    yy, xx = np.mgrid[0:H, 0:W]
    out = pixels.copy()
    for b in np.flatnonzero(rng.random(B) < config.distractor_prob):
        while True:
            r = rng.uniform(0.5, H / 2)
            ang = rng.uniform(0, np.pi)
            k = np.array([r * np.sin(ang), r * np.cos(ang)])
            if not _too_close(k, signal, H, config.distractor_min_gap):
                break
        rms = rng.uniform(0, config.distractor_max_rms)
        wave = np.cos(2 * np.pi * (k[0] * yy + k[1] * xx) / H + rng.uniform(0, 2 * np.pi))
        out[b] = np.clip(out[b] + np.sqrt(2) * rms * wave, 0.0, 1.0)
    return out


def pretrain_backbone(pixels: np.ndarray, labels: list[GeneratorId], model_cfg: ModelConfig,
                      config: PretrainConfig, init_seed: int = 0) -> tuple[ToyVLM, PretrainHistory]:
    if len(labels) == 0:
        raise ValueError("pretraining needs a non-empty train split")
    model = ToyVLM.create(model_cfg, seed=init_seed)
    vocab = model.vocab
    q = vocab.tokenize(build_question(False))
    answer_cache = {g: vocab.answer(render_family_label(g)) for g in set(labels)}
    answer_start = model_cfg.n_patches + len(q)
    q_slot = vocab.tokenize(build_question(True))
    q_model = vocab.tokenize(MODEL_QUESTION)
    if len(q_model) != len(q_slot):
        raise ValueError("the model-level question must share the pseudo-word layout")
    full_cache = {g: vocab.answer(render_label(g)) for g in set(labels)}
    prior_labels = list(GeneratorId)
    signal = [FAMILY_FREQS[f] for f in {g.family for g in labels if g.is_fake}]
    signal += [MODEL_FREQS[g] for g in set(labels) if g.is_fake]

    n = len(labels)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    names = list(model.params)
    states = {k: AdamState.zeros_like(v) for k, v in model.params.items()}
    history = PretrainHistory()

    probe = np.random.default_rng([config.seed, 0]).permutation(n)[:config.batch_size]
    loss0, _ = model.batch_loss(pixels[probe], q, [answer_cache[labels[i]] for i in probe])
    history.initial_loss = float(loss0.data)

    t = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            tape = ad.Tape()
            leaves = {k: tape.leaf(model.params[k]) for k in names}
            try:
                loss, _ = model.batch_loss(add_distractors(pixels[idx], rng, config, signal), q,
                                           [answer_cache[labels[i]] for i in idx], params=leaves)
                vqa_loss = float(loss.data)
                if config.lm_prior:
                    pl = [prior_labels[j] for j in rng.integers(0, len(prior_labels), config.lm_batch)]
                    lm = text_prior_loss(model, pl, answer_start, leaves)
                    loss = ad.add(loss, ad.mul(lm, config.lm_weight))
                if config.slot_noise:
                    si = rng.integers(0, n, config.slot_batch)
                    std = rng.uniform(0, config.slot_max_std, (len(si), 1, 1))
                    noise = rng.normal(size=(len(si), 1, model_cfg.d)) * std
                    sl, _ = model.batch_loss(add_distractors(pixels[si], rng, config, signal), q_slot,
                                             [answer_cache[labels[i]] for i in si],
                                             params=leaves, vstar=noise)
                    loss = ad.add(loss, ad.mul(sl, config.slot_weight))
                if config.model_question:
                    mi = rng.integers(0, n, config.model_batch)
                    ml, _ = model.batch_loss(add_distractors(pixels[mi], rng, config, signal), q_model,
                                             [full_cache[labels[i]] for i in mi], params=leaves)
                    loss = ad.add(loss, ad.mul(ml, config.model_weight))
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"pretraining diverged at epoch {epoch} step {s}: {exc}") from exc
            grads = ad.grads(tape, loss, [leaves[k] for k in names])
            lr = cosine_lr(t, total, config.lr)
            t += 1
            for k, g in zip(names, grads):
                p = model.params[k]
                model.params[k], states[k] = adamw_step(p, g, states[k], t, lr, config, decay=p.ndim > 1)
            losses.append(vqa_loss)
        model._frozen = None
        history.epoch_loss.append(float(np.mean(losses)))
        if not math.isfinite(history.epoch_loss[-1]):
            raise DivergenceError(f"pretraining loss is {history.epoch_loss[-1]} after epoch {epoch}")
        log.info("pretrain epoch %d: mean loss %.4f", epoch, history.epoch_loss[-1])
    model._frozen = None
    return model, history
