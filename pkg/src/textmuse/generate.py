"""Token generation: causal decoder, nucleus sampling, guided tuning.

The decoder is a minimal autoregressive model over the music token
vocabulary: token plus position embeddings, one causal self-attention
block with a residual connection, and a linear output head. Sampling is
nucleus (top-p) with a deterministic tie order.

clip_guided_tune() adapts the decoder toward a text prompt using a frozen
alignment model: the decoder's teacher-forced output distributions are
soft-mixed into alignment embedding space, pooled like a music segment,
and pushed toward the prompt's text embedding by plain SGD on the cosine
objective. Only decoder parameters move.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import remi
from .align import AlignModel, encode_text

VOCAB_SIZE = 405
BOS_ID = 405  # input-only token, never produced by the output head

DECODER_PARAM_NAMES = (
    "tok_emb",
    "pos_emb",
    "wq",
    "wk",
    "wv",
    "wo",
    "w_out",
)

DECODER_CHECKPOINT_VERSION = 1


@dataclass
class DecoderConfig:
    embed_dim: int = 64
    heads: int = 1
    max_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ValueError("heads must divide embed_dim")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class GenerationConfig:
    prompt: str = ""
    nucleus_p: float = 0.9
    max_tokens: int = 512
    context_len: int = 32
    tune_epochs: int = 100
    tune_lr: float = 0.1
    seed: int = 0
    plateau_patience: int | None = None  # None runs the full epoch budget
    plateau_min_delta: float = 1e-4

    def __post_init__(self):
        if not 0 < self.nucleus_p <= 1:
            raise ValueError("nucleus_p must lie in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.tune_epochs < 1:
            raise ValueError("tune_epochs must be >= 1")
        if self.tune_lr <= 0:
            raise ValueError("tune_lr must be positive")
        if self.plateau_patience is not None and self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1 when set")
        if self.plateau_min_delta < 0:
            raise ValueError("plateau_min_delta must be >= 0")


class DecoderModel:
    """Parameter container for the single-block causal decoder."""

    def __init__(self, config: DecoderConfig, params: dict[str, np.ndarray]):
        missing = set(DECODER_PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"missing parameter tensors: {sorted(missing)}")
        self.config = config
        self.params = {
            k: np.asarray(params[k], dtype=np.float64) for k in DECODER_PARAM_NAMES
        }

    @classmethod
    def init(cls, config: DecoderConfig, rng: np.random.Generator | None = None) -> "DecoderModel":
        if rng is None:
            rng = np.random.default_rng(config.seed)
        d = config.embed_dim
        params = {
            "tok_emb": rng.normal(0.0, 0.02, (VOCAB_SIZE + 1, d)),
            "pos_emb": rng.normal(0.0, 0.02, (config.max_len, d)),
            "wq": np.eye(d),
            "wk": np.eye(d),
            "wv": np.eye(d),
            "wo": np.eye(d),
            "w_out": rng.normal(0.0, 1 / math.sqrt(d), (d, VOCAB_SIZE)),
        }
        return cls(config, params)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def save(self, path) -> None:
        meta = json.dumps(
            {"format_version": DECODER_CHECKPOINT_VERSION, "config": asdict(self.config)}
        )
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **self.params)

    @classmethod
    def load(cls, path) -> "DecoderModel":
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise ValueError(f"{path}: not a decoder checkpoint (no metadata)")
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format_version") != DECODER_CHECKPOINT_VERSION:
                raise ValueError(
                    f"{path}: unsupported checkpoint version {meta.get('format_version')}"
                )
            config = DecoderConfig(**meta["config"])
            params = {k: data[k] for k in DECODER_PARAM_NAMES}
        return cls(config, params)


def _check_input_ids(ids, max_len):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("input ids must be a non-empty 1-d sequence")
    if arr.size > max_len:
        raise ValueError(f"sequence length {arr.size} exceeds max_len {max_len}")
    if arr.min() < 0 or arr.max() > BOS_ID:
        raise ValueError("token id out of range")
    return arr


def decoder_logits(model: DecoderModel, input_ids: Sequence[int]):
    """Full teacher-forced forward pass; returns (T, 405) logits.

    Straight-line reference implementation; generation uses the cached
    incremental path and is tested against this.
    """
    out, _ = _decoder_forward(model, _check_input_ids(input_ids, model.config.max_len))
    return out


def _decoder_forward(model, ids):
    p = model.params
    d = model.config.embed_dim
    heads = model.config.heads
    dh = d // heads
    scale = math.sqrt(dh)
    T = ids.size
    X = p["tok_emb"][ids] + p["pos_emb"][:T]
    Q, K, V = X @ p["wq"], X @ p["wk"], X @ p["wv"]
    mask = np.tril(np.ones((T, T), dtype=bool))
    ctx = np.empty((T, d))
    attn = []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        z = Q[:, s] @ K[:, s].T / scale
        z = np.where(mask, z, -np.inf)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        A = e / e.sum(axis=1, keepdims=True)
        ctx[:, s] = A @ V[:, s]
        attn.append(A)
    H = X + ctx @ p["wo"]
    logits = H @ p["w_out"]
    cache = {"ids": ids, "X": X, "Q": Q, "K": K, "V": V, "ctx": ctx, "attn": attn, "H": H}
    return logits, cache


def _decoder_backward(d_logits, cache, model, grads):
    p = model.params
    d = model.config.embed_dim
    heads = model.config.heads
    dh = d // heads
    scale = math.sqrt(dh)
    X, H = cache["X"], cache["H"]
    T = X.shape[0]

    grads["w_out"] += H.T @ d_logits
    dH = d_logits @ p["w_out"].T
    dX = dH.copy()  # residual branch
    d_ctx = dH @ p["wo"].T
    grads["wo"] += cache["ctx"].T @ dH
    dQ = np.empty_like(cache["Q"])
    dK = np.empty_like(cache["K"])
    dV = np.empty_like(cache["V"])
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        A = cache["attn"][h]
        dA = d_ctx[:, s] @ cache["V"][:, s].T
        dV[:, s] = A.T @ d_ctx[:, s]
        dZ = (dA - (dA * A).sum(axis=1, keepdims=True)) * A
        dQ[:, s] = dZ @ cache["K"][:, s] / scale
        dK[:, s] = dZ.T @ cache["Q"][:, s] / scale
    grads["wq"] += X.T @ dQ
    grads["wk"] += X.T @ dK
    grads["wv"] += X.T @ dV
    dX += dQ @ p["wq"].T + dK @ p["wk"].T + dV @ p["wv"].T
    np.add.at(grads["tok_emb"], cache["ids"], dX)
    grads["pos_emb"][:T] += dX


class _KVCache:
    """Per-step key/value rows for incremental decoding."""

    def __init__(self, d):
        self.K = np.empty((0, d))
        self.V = np.empty((0, d))

    def append(self, k, v):
        self.K = np.vstack([self.K, k[None, :]])
        self.V = np.vstack([self.V, v[None, :]])


def _step_logits(model, token_id, pos, cache):
    """Logits for the next token given one new input token."""
    p = model.params
    d = model.config.embed_dim
    heads = model.config.heads
    dh = d // heads
    scale = math.sqrt(dh)
    x = p["tok_emb"][token_id] + p["pos_emb"][pos]
    q, k, v = x @ p["wq"], x @ p["wk"], x @ p["wv"]
    cache.append(k, v)
    ctx = np.empty(d)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        z = cache.K[:, s] @ q[s] / scale
        z -= z.max()
        e = np.exp(z)
        a = e / e.sum()
        ctx[s] = a @ cache.V[:, s]
    h_out = x + ctx @ p["wo"]
    return h_out @ p["w_out"]


def _softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def nucleus_sample(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    """Draw one id from the smallest high-probability prefix covering p.

    Candidates are ordered by descending probability with ties broken
    toward the lower id; the kept prefix is the shortest one whose mass
    reaches p (with a tiny float tolerance), renormalized before drawing.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if (probs < 0).any() or not np.isfinite(probs).all():
        raise ValueError("probs must be finite and non-negative")
    total = probs.sum()
    if total <= 0:
        raise ValueError("probs must have positive mass")
    probs = probs / total
    ids = np.arange(probs.size)
    order = np.lexsort((ids, -probs))  # descending prob, lower id on ties
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p - 1e-9, side="left"))
    kept = order[: k + 1]
    kept_p = probs[kept]
    kept_p = kept_p / kept_p.sum()
    r = rng.random()
    return int(kept[np.searchsorted(np.cumsum(kept_p), r, side="right").clip(0, kept.size - 1)])


def generate_raw(
    decoder: DecoderModel,
    max_tokens: int,
    nucleus_p: float = 0.9,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> list[int]:
    """Sample up to max_tokens ids autoregressively; stops after EOS.

    Output is raw: it may violate grammar and is meant to be passed
    through repair() before decoding.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if max_tokens > decoder.config.max_len:
        raise ValueError(
            f"max_tokens {max_tokens} exceeds decoder max_len {decoder.config.max_len}"
        )
    cache = _KVCache(decoder.config.embed_dim)
    out: list[int] = []
    token = BOS_ID
    for pos in range(max_tokens):
        logits = _step_logits(decoder, token, pos, cache)
        token = nucleus_sample(_softmax(logits), nucleus_p, rng)
        out.append(token)
        if token == remi.VOCAB.eos_id:
            break
    return out


# ---------------------------------------------------------------------------
# alignment-guided tuning


@dataclass(frozen=True)
class TuneResult:
    decoder: DecoderModel
    history: tuple[float, ...]  # per-epoch guidance loss
    raw_tokens: tuple[int, ...]
    repaired: remi.RemiSequence


def _guidance_loss_and_grads(decoder, align_model, input_ids, ut, grads=None):
    """Cosine guidance loss 1 - um.ut with um from soft-mixed distributions."""
    logits, cache = _decoder_forward(decoder, input_ids)
    T = logits.shape[0]
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    music_emb = align_model.params["music_emb"][:VOCAB_SIZE]
    E = P @ music_emb
    mean = E.mean(axis=0)
    z = mean @ align_model.params["music_proj"]
    r = np.linalg.norm(z)
    um = z / r
    loss = float(1.0 - um @ ut)
    if grads is not None:
        du = -ut
        dz = (du - um * (um @ du)) / r
        d_mean = align_model.params["music_proj"] @ dz
        dE = np.tile(d_mean / T, (T, 1))
        dP = dE @ music_emb.T
        d_logits = (dP - (dP * P).sum(axis=1, keepdims=True)) * P
        _decoder_backward(d_logits, cache, decoder, grads)
    return loss


def clip_guided_tune(
    decoder: DecoderModel, align_model: AlignModel, config: GenerationConfig
) -> TuneResult:
    """Tune the decoder toward the prompt under a frozen alignment model.

    A seeded rollout fixes the teacher-forcing context, then each epoch
    takes one SGD step on the cosine distance between the soft-mixed
    decoder output and the prompt's text embedding. The alignment model
    is read, never written. After tuning, a fresh seeded rollout gives
    raw tokens plus their repaired sequence.
    """
    if not config.prompt.strip():
        raise ValueError("guided tuning needs a non-empty prompt")
    ut = encode_text(config.prompt, align_model)
    context = generate_raw(
        decoder,
        min(config.context_len, decoder.config.max_len),
        config.nucleus_p,
        rng=np.random.default_rng(config.seed),
    )
    input_ids = np.asarray([BOS_ID] + context[:-1], dtype=np.int64)

    history = []
    best = math.inf
    stale = 0
    for _ in range(config.tune_epochs):
        grads = decoder.zero_grads()
        loss = _guidance_loss_and_grads(decoder, align_model, input_ids, ut, grads)
        if not math.isfinite(loss):
            raise ValueError("guidance loss became non-finite; lower tune_lr")
        for k in DECODER_PARAM_NAMES:
            decoder.params[k] -= config.tune_lr * grads[k]
        history.append(loss)
        if config.plateau_patience is not None:
            if loss < best - config.plateau_min_delta:
                best = loss
                stale = 0
            else:
                stale += 1
                if stale >= config.plateau_patience:
                    break

    raw = generate_raw(
        decoder,
        config.max_tokens,
        config.nucleus_p,
        rng=np.random.default_rng(config.seed),
    )
    return TuneResult(decoder, tuple(history), tuple(raw), remi.repair(raw))


def grad_check_decoder(
    decoder: DecoderModel,
    align_model: AlignModel,
    input_ids: Sequence[int],
    prompt: str = "steady bright keys",
    h: float = 1e-5,
    samples_per_tensor: int = 50,
    seed: int = 0,
    analytic_grads: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error of the guidance-loss gradients, all tensors.

    Mirrors the alignment grad check: central differences on sampled
    entries, embedding tables sampled on touched rows. analytic_grads
    overrides the computed gradient (corrupted-gradient control).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    ids = _check_input_ids(input_ids, decoder.config.max_len)
    ut = encode_text(prompt, align_model)
    if analytic_grads is None:
        analytic_grads = decoder.zero_grads()
        _guidance_loss_and_grads(decoder, align_model, ids, ut, analytic_grads)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in DECODER_PARAM_NAMES:
        tensor = decoder.params[name]
        cols = tensor.shape[1]
        if name == "tok_emb":
            rows = sorted({int(i) for i in ids})
            pool = [r * cols + c for r in rows for c in range(cols)]
        elif name == "pos_emb":
            pool = list(range(ids.size * cols))
        else:
            pool = list(range(tensor.size))
        if len(pool) > samples_per_tensor:
            chosen = rng.choice(len(pool), size=samples_per_tensor, replace=False)
            indices = [pool[i] for i in chosen]
        else:
            indices = pool
        flat = tensor.reshape(-1)
        ga_flat = np.asarray(analytic_grads[name]).reshape(-1)
        for idx in indices:
            keep = flat[idx]
            flat[idx] = keep + h
            hi = _guidance_loss_and_grads(decoder, align_model, ids, ut)
            flat[idx] = keep - h
            lo = _guidance_loss_and_grads(decoder, align_model, ids, ut)
            flat[idx] = keep
            g_fd = (hi - lo) / (2 * h)
            g_an = float(ga_flat[idx])
            rel = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
            worst = max(worst, rel)
    return worst
