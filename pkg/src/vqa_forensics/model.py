"""Frozen toy vision-language model.

Image patches are linearly projected into the decoder's width and placed in
front of the question tokens; a small pre-LN transformer then predicts the
answer one word at a time. Output logits reuse the token embedding table.

Context layout::

    [patch_0 .. patch_{P-1}] [question ..] [<bos>] [answer ..]

Patch positions attend to each other freely; every later position attends
causally.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .vocab import TokenSequence, Vocab

log = logging.getLogger(__name__)

MASK_FILL = -1e9


class ContextOverflow(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    patch: int = 4
    image_size: int = 32
    max_ctx: int = 96
    mlp_ratio: int = 4
    pos_scale: float = 0.5
    emb_std: float = 0.05

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


def sinusoid_positions(n: int, d: int, scale: float) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / (10000 ** (2 * (i // 2) / d))
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return scale * pe


def init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, pp = cfg.d, cfg.patch * cfg.patch
    hidden = cfg.mlp_ratio * d
    resid_std = 1.0 / np.sqrt(d) / np.sqrt(2 * cfg.n_blocks)
    p = {
        "patch_w": rng.normal(0, 1 / np.sqrt(pp), (pp, d)),
        "patch_b": np.zeros(d),
        "tok_emb": rng.normal(0, cfg.emb_std, (vocab_size, d)),
    }
    for b in range(cfg.n_blocks):
        p.update({
            f"b{b}.ln1_g": np.ones(d), f"b{b}.ln1_b": np.zeros(d),
            f"b{b}.wq": rng.normal(0, 1 / np.sqrt(d), (d, d)),
            f"b{b}.wk": rng.normal(0, 1 / np.sqrt(d), (d, d)),
            f"b{b}.wv": rng.normal(0, 1 / np.sqrt(d), (d, d)),
            f"b{b}.wo": rng.normal(0, resid_std, (d, d)),
            f"b{b}.bo": np.zeros(d),
            f"b{b}.ln2_g": np.ones(d), f"b{b}.ln2_b": np.zeros(d),
            f"b{b}.fc1": rng.normal(0, 1 / np.sqrt(d), (d, hidden)),
            f"b{b}.fc1_b": np.zeros(hidden),
            f"b{b}.fc2": rng.normal(0, 1 / np.sqrt(hidden) / np.sqrt(2 * cfg.n_blocks), (hidden, d)),
            f"b{b}.fc2_b": np.zeros(d),
        })
    p["lnf_g"] = np.ones(d)
    p["lnf_b"] = np.zeros(d)
    return p


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


class ToyVLM:
    """Parameters plus the forward computations over them."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params
        self.pos = sinusoid_positions(cfg.max_ctx, cfg.d, cfg.pos_scale)
        self._frozen: dict[str, ad.Tensor] | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocab | None = None, seed: int = 0) -> "ToyVLM":
        vocab = vocab or Vocab()
        return cls(cfg, vocab, init_params(cfg, len(vocab), seed))

    def checksum(self) -> str:
        return params_checksum(self.params)

    def frozen(self) -> dict[str, ad.Tensor]:
        """Tape-free constant views of the parameters (cached)."""
        if self._frozen is None:
            self._frozen = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._frozen

    # ----------------------------------------------------------- pieces

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """(B, H, W) -> (B, n_patches, patch*patch), row-major patch order."""
        b, h, w = pixels.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        x = pixels.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, (h // p) * (w // p), p * p)

    def encode_image(self, pixels: np.ndarray, params=None) -> ad.Tensor:
        """Visual token embeddings, (B, n_patches, d), position-encoded."""
        params = params or self.frozen()
        pixels = np.asarray(pixels, dtype=np.float64)
        single = pixels.ndim == 2
        if single:
            pixels = pixels[None]
        patches = self.patchify(pixels)
        n = patches.shape[1]
        x = ad.add(ad.add(ad.matmul(patches, params["patch_w"]), params["patch_b"]), self.pos[:n])
        return ad.reshape(x, x.shape[1:]) if single else x

    def embed_text(self, ids: np.ndarray, start: int, params, vstar=None) -> ad.Tensor:
        """Token embeddings for (B, L) ids; the pseudo-word row comes from ``vstar``."""
        emb = ad.take(params["tok_emb"], ids)
        if vstar is not None:
            ind = (ids == self.vocab.pseudo).astype(np.float64)[..., None]
            if ind.any():
                emb = ad.add(ad.mul(emb, 1.0 - ind), ad.mul(ind, vstar))
        return ad.add(emb, self.pos[start:start + ids.shape[1]])

    def _attention_mask(self, n_total: int, n_bidir: int) -> np.ndarray:
        i = np.arange(n_total)
        allowed = (i[None, :] <= i[:, None]) | ((i[:, None] < n_bidir) & (i[None, :] < n_bidir))
        return np.where(allowed, 0.0, MASK_FILL)

    def _block(self, x: ad.Tensor, b: int, params, mask: np.ndarray) -> ad.Tensor:
        cfg = self.cfg
        B, T, d = x.shape
        H, dh = cfg.n_heads, d // cfg.n_heads
        pre = f"b{b}."
        h = ad.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])

        def heads(w):
            return ad.transpose(ad.reshape(ad.matmul(h, params[pre + w]), (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)), mask)
        att = ad.matmul(ad.softmax(scores), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))
        x = ad.add(x, ad.add(ad.matmul(att, params[pre + "wo"]), params[pre + "bo"]))
        h = ad.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        h = ad.gelu(ad.add(ad.matmul(h, params[pre + "fc1"]), params[pre + "fc1_b"]))
        return ad.add(x, ad.add(ad.matmul(h, params[pre + "fc2"]), params[pre + "fc2_b"]))

    def _decode(self, x: ad.Tensor, n_bidir: int, params) -> ad.Tensor:
        mask = self._attention_mask(x.shape[1], n_bidir)
        for b in range(self.cfg.n_blocks):
            x = self._block(x, b, params, mask)
        x = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
        return ad.matmul(x, ad.transpose(params["tok_emb"], (1, 0)))

    # ----------------------------------------------------------- batched API

    def logits(self, pixels: np.ndarray, text_ids: np.ndarray, params=None, vstar=None) -> ad.Tensor:
        """Logits for every position of [patches | text_ids]; shape (B, P+L, V)."""
        params = params or self.frozen()
        text_ids = np.asarray(text_ids, dtype=np.int64)
        if vstar is not None and ((text_ids == self.vocab.pseudo).sum(axis=1) > 1).any():
            raise ValueError("prompt contains more than one pseudo-word token")
        img = self.encode_image(pixels, params)
        n = img.shape[1]
        if n + text_ids.shape[1] > self.cfg.max_ctx:
            raise ContextOverflow(f"sequence of {n + text_ids.shape[1]} exceeds context {self.cfg.max_ctx}")
        txt = self.embed_text(text_ids, n, params, vstar)
        return self._decode(ad.concat([img, txt], axis=1), n, params)

    def teacher_forcing(self, prompt: TokenSequence, answers: list[TokenSequence]):
        """Build (text_ids, targets, mask) for a batch sharing one prompt.

        Answers are padded with PAD; each answer must end in EOS.
        """
        q = list(prompt.ids)
        L = max(len(a) for a in answers)
        n_txt = len(q) + 1 + L - 1
        ids = np.full((len(answers), n_txt), self.vocab.pad, dtype=np.int64)
        targets = np.zeros((len(answers), self.cfg.n_patches + n_txt), dtype=np.int64)
        mask = np.zeros(targets.shape, dtype=bool)
        base = self.cfg.n_patches + len(q)  # position of <bos>
        for r, a in enumerate(answers):
            if not a.ids or a.ids[-1] != self.vocab.eos:
                raise ValueError("answer sequence must end with EOS")
            row = q + [self.vocab.bos] + list(a.ids[:-1])
            ids[r, :len(row)] = row
            targets[r, base:base + len(a)] = a.ids
            mask[r, base:base + len(a)] = True
        return ids, targets, mask

    def batch_loss(self, pixels, prompt: TokenSequence, answers: list[TokenSequence],
                   params=None, vstar=None):
        ids, targets, mask = self.teacher_forcing(prompt, answers)
        logits = self.logits(pixels, ids, params, vstar)
        return ad.cross_entropy(logits, targets, mask), logits

    def forward(self, pixels: np.ndarray, q: TokenSequence, y: TokenSequence,
                vstar=None, params=None):
        """Single-sample teacher-forced (loss, answer-position logits)."""
        if sum(1 for i in q.ids if i == self.vocab.pseudo) > 1:
            raise ValueError("prompt contains more than one pseudo-word token")
        px = np.asarray(pixels, dtype=np.float64)[None]
        loss, logits = self.batch_loss(px, q, [y], params, vstar)
        start = self.cfg.n_patches + len(q)
        return loss, logits.data[0, start:start + len(y)]

    def generate_batch(self, pixels: np.ndarray, q: TokenSequence, max_len: int,
                       vstar=None) -> list[str]:
        """Greedy decoding from <bos>; stops at EOS, ``max_len`` or the context end.

        Uses a key/value cache over the image+question prefix; ties in the
        argmax resolve to the lowest token id.
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        B = pixels.shape[0]
        if max_len <= 0 or B == 0:
            return [""] * B
        params = self.params
        n = self.cfg.n_patches
        prefix = np.tile(np.asarray(list(q.ids) + [self.vocab.bos], dtype=np.int64), (B, 1))
        if n + prefix.shape[1] > self.cfg.max_ctx:
            raise ContextOverflow("prompt does not fit in the context window")
        img = self.encode_image(pixels).data
        txt = self.embed_text(prefix, n, self.frozen(),
                              None if vstar is None else ad.Tensor(vstar)).data
        x = np.concatenate([img, txt], axis=1)
        cache: list[tuple[np.ndarray, np.ndarray]] = []
        mask = self._attention_mask(x.shape[1], n)
        for b in range(self.cfg.n_blocks):
            x, kv = _np_block(x, params, f"b{b}.", self.cfg.n_heads, mask, None)
            cache.append(kv)
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        pos = n + prefix.shape[1]
        for step in range(max_len):
            logits = _np_logits(x[:, -1:], params)[:, 0]
            nxt = np.argmax(logits, axis=-1)
            for r in range(B):
                if not done[r]:
                    if nxt[r] == self.vocab.eos:
                        done[r] = True
                    else:
                        out[r].append(int(nxt[r]))
            if done.all() or step == max_len - 1 or pos >= self.cfg.max_ctx:
                break
            x = params["tok_emb"][nxt][:, None, :] + self.pos[pos]
            for b in range(self.cfg.n_blocks):
                x, cache[b] = _np_block(x, params, f"b{b}.", self.cfg.n_heads, None, cache[b])
            pos += 1
        return [self.vocab.detokenize(o) for o in out]

    def generate(self, pixels: np.ndarray, q: TokenSequence, max_len: int, vstar=None) -> str:
        return self.generate_batch(np.asarray(pixels)[None], q, max_len, vstar)[0]


def _np_block(x, params, pre, n_heads, mask, cache):
    """Tape-free block forward; appends this step's keys/values to ``cache``."""
    B, T, d = x.shape
    dh = d // n_heads
    h, _ = ad._layer_norm_f(x, params[pre + "ln1_g"], params[pre + "ln1_b"])

    def heads(w):
        return (h @ params[pre + w]).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    if cache is not None:
        k = np.concatenate([cache[0], k], axis=2)
        v = np.concatenate([cache[1], v], axis=2)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    att, _ = ad._softmax_f(scores)
    att = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + (att @ params[pre + "wo"] + params[pre + "bo"])
    h, _ = ad._layer_norm_f(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
    h, _ = ad._gelu_f(h @ params[pre + "fc1"] + params[pre + "fc1_b"])
    return x + (h @ params[pre + "fc2"] + params[pre + "fc2_b"]), (k, v)


def _np_logits(x, params):
    h, _ = ad._layer_norm_f(x, params["lnf_g"], params["lnf_b"])
    return h @ params["tok_emb"].T


# ------------------------------------------------------------------ checkpoints

MAGIC = b"VQAFCKPT"
VERSION = 1
VSTAR_MAGIC = b"VSTR"
NO_VSTAR = b"NOVS"


class CorruptArtifact(ValueError):
    pass


def save_checkpoint(path: Path, model: ToyVLM, vstar: np.ndarray | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(theta_section(model, extra) + vstar_record(vstar))


def pack_params(params: dict[str, np.ndarray], header: dict) -> bytes:
    """Versioned container: magic, version, JSON header, little-endian float64 payload."""
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    header = dict(header, theta_checksum=hashlib.sha256(payload).hexdigest(),
                  params=[[k, list(v.shape)] for k, v in params.items()])
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + payload


def unpack_params(section: bytes, source: str = "checkpoint") -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of ``pack_params`` for a section without trailing records."""
    _, hlen = struct.unpack("<II", section[8:16])
    header = json.loads(section[16:16 + hlen])
    payload = section[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["theta_checksum"]:
        raise CorruptArtifact(f"{source}: parameter checksum mismatch")
    params, off = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    return header, params


def theta_section(model: ToyVLM, extra: dict | None = None) -> bytes:
    return pack_params(model.params, {
        "dims": asdict(model.cfg),
        "vocab": model.vocab.words,
        "vocab_hash": model.vocab.hash(),
        "extra": extra or {},
    })


def vstar_record(vstar: np.ndarray | None) -> bytes:
    if vstar is None:
        return NO_VSTAR
    body = np.ascontiguousarray(vstar, dtype="<f8").tobytes()
    return VSTAR_MAGIC + struct.pack("<I", len(vstar)) + body + hashlib.sha256(body).digest()


def split_checkpoint(raw: bytes) -> tuple[bytes, bytes]:
    """(theta section, v* record) of a checkpoint file's bytes."""
    if raw[:8] != MAGIC:
        raise CorruptArtifact("bad checkpoint magic")
    try:
        version, hlen = struct.unpack("<II", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        n = sum(int(np.prod(s)) for _, s in header["params"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CorruptArtifact(f"unreadable checkpoint header: {exc}") from exc
    if version != VERSION:
        raise CorruptArtifact(f"unsupported checkpoint version {version}")
    end = 16 + hlen + 8 * n
    if len(raw) < end:
        raise CorruptArtifact("truncated checkpoint payload")
    return raw[:end], raw[end:]


def load_checkpoint(path: Path) -> tuple[ToyVLM, np.ndarray | None, dict]:
    raw = Path(path).read_bytes()
    theta, vrec = split_checkpoint(raw)
    header, params = unpack_params(theta, str(path))
    vocab = Vocab(header["vocab"])
    if vocab.hash() != header["vocab_hash"]:
        raise CorruptArtifact(f"{path}: vocabulary hash mismatch")
    model = ToyVLM(ModelConfig(**header["dims"]), vocab, params)
    vstar = None
    if vrec[:4] == VSTAR_MAGIC:
        (d,) = struct.unpack("<I", vrec[4:8])
        body = vrec[8:8 + 8 * d]
        if hashlib.sha256(body).digest() != vrec[8 + 8 * d:8 + 8 * d + 32]:
            raise CorruptArtifact(f"{path}: v* record checksum mismatch")
        vstar = np.frombuffer(body, dtype="<f8").astype(np.float64)
    elif vrec != NO_VSTAR:
        raise CorruptArtifact(f"{path}: malformed v* record")
    return model, vstar, header["extra"]
