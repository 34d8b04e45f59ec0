"""Contrastive text-music alignment, implemented directly on numpy.

Both modalities are embedding tables pooled through one cross-modal
attention block: music queries attend over text keys/values and vice
versa. Pooled outputs pass a projection head and are L2-normalized onto a
shared unit sphere where matched pairs score high dot products. Training
minimizes the symmetric InfoNCE loss with a learnable temperature.

All gradients are accumulated by a hand-written reverse pass in float64
and can be checked against central finite differences via grad_check().
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import SplitSet
from .remi import RemiSequence, from_text

MUSIC_VOCAB = 405
MUSIC_PAD = 405  # one extra embedding row past the vocabulary
TEXT_PAD = 0
TAU_MIN, TAU_MAX = 1 / 100, 100
EMBED_INIT_SCALE = 0.02

_WORD_RE = re.compile(r"[0-9a-z]+")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float):
        super().__init__(
            f"non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})"
        )
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


@dataclass
class AlignConfig:
    embed_dim: int = 64
    heads: int = 1
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 5e-6
    scheduler: str = "cosine"
    epochs: int = 50
    seed: int = 0
    temperature_init: float = 0.07
    text_hash_buckets: int = 32768
    loss_mode: str = "in_batch"

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ValueError("heads must divide embed_dim")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.scheduler not in ("cosine", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.loss_mode not in ("in_batch", "explicit"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.loss_mode == "in_batch" and self.batch_size < 2:
            raise ValueError("in_batch mode needs batch_size >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")
        if self.text_hash_buckets < 2:
            raise ValueError("text_hash_buckets must be >= 2")


# parameter tensor names, fixed order for deterministic iteration
PARAM_NAMES = (
    "music_emb",
    "text_emb",
    "music_wq",
    "music_wk",
    "music_wv",
    "music_wo",
    "text_wq",
    "text_wk",
    "text_wv",
    "text_wo",
    "music_proj",
    "text_proj",
    "log_temp",
)

CHECKPOINT_VERSION = 1


class AlignModel:
    """Parameter container. Use AlignModel.init() for a fresh seeded model."""

    def __init__(self, config: AlignConfig, params: dict[str, np.ndarray]):
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"missing parameter tensors: {sorted(missing)}")
        self.config = config
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}

    @classmethod
    def init(cls, config: AlignConfig, rng: np.random.Generator | None = None) -> "AlignModel":
        """Seeded init: small random embeddings, identity mixing matrices.

        Small embedding norms matter: the projection output is normalized,
        so gradient steps rotate short vectors faster, which is what lets
        the pinned small learning rate make progress.
        """
        if rng is None:
            rng = np.random.default_rng(config.seed)
        d = config.embed_dim
        eye = np.eye(d)
        params = {
            "music_emb": rng.normal(0.0, EMBED_INIT_SCALE, (MUSIC_VOCAB + 1, d)),
            "text_emb": rng.normal(0.0, EMBED_INIT_SCALE, (config.text_hash_buckets, d)),
            "music_wq": eye.copy(),
            "music_wk": eye.copy(),
            "music_wv": eye.copy(),
            "music_wo": eye.copy(),
            "text_wq": eye.copy(),
            "text_wk": eye.copy(),
            "text_wv": eye.copy(),
            "text_wo": eye.copy(),
            "music_proj": eye.copy(),
            "text_proj": eye.copy(),
            "log_temp": np.array(math.log(config.temperature_init)),
        }
        return cls(config, params)

    @property
    def temperature(self) -> float:
        return float(np.clip(np.exp(self.params["log_temp"]), TAU_MIN, TAU_MAX))

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def save(self, path) -> None:
        meta = json.dumps(
            {"format_version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        )
        # write through a handle so the file keeps the exact requested name
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **self.params)

    @classmethod
    def load(cls, path) -> "AlignModel":
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise ValueError(f"{path}: not an alignment checkpoint (no metadata)")
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"{path}: unsupported checkpoint version {meta.get('format_version')}"
                )
            config = AlignConfig(**meta["config"])
            params = {k: data[k] for k in PARAM_NAMES}
        return cls(config, params)


def tokenize_text(caption: str, buckets: int = 32768) -> list[int]:
    """Lowercase, split on non-alphanumeric runs, hash words into 1..buckets-1.

    Bucket 0 is the pad/empty-caption token. Hashing is crc32, stable
    across runs and platforms.
    """
    words = _WORD_RE.findall(caption.lower())
    if not words:
        return [TEXT_PAD]
    return [1 + zlib.crc32(w.encode()) % (buckets - 1) for w in words]


def _music_ids(seq: RemiSequence | Sequence[int]) -> np.ndarray:
    ids = np.asarray(seq.tokens if isinstance(seq, RemiSequence) else seq, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("music token sequence must be non-empty")
    if ids.min() < 0 or ids.max() > MUSIC_PAD:
        raise ValueError("music token id out of embedding range")
    return ids


def _normalize(z: np.ndarray) -> np.ndarray:
    return z / np.linalg.norm(z)


def encode_music(seq: RemiSequence | Sequence[int], model: AlignModel) -> np.ndarray:
    """Self-only music embedding: mean-pool -> projection -> unit norm."""
    states = model.params["music_emb"][_music_ids(seq)]
    return _normalize(states.mean(axis=0) @ model.params["music_proj"])


def encode_text(caption: str | Sequence[int], model: AlignModel) -> np.ndarray:
    """Self-only text embedding: mean-pool -> projection -> unit norm."""
    if isinstance(caption, str):
        ids = tokenize_text(caption, model.config.text_hash_buckets)
    else:
        ids = list(caption)
        if not ids:
            raise ValueError("text token sequence must be non-empty")
    states = model.params["text_emb"][np.asarray(ids, dtype=np.int64)]
    return _normalize(states.mean(axis=0) @ model.params["text_proj"])


# ---------------------------------------------------------------------------
# forward/backward machinery


def _attention_forward(q_states, kv_states, wq, wk, wv, wo, heads):
    """Multi-head scaled dot-product attention; returns output and cache."""
    d = q_states.shape[1]
    dh = d // heads
    scale = math.sqrt(dh)
    Q = q_states @ wq
    K = kv_states @ wk
    V = kv_states @ wv
    ctx = np.empty((q_states.shape[0], d))
    attn = []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = Q[:, s] @ K[:, s].T / scale
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        A = e / e.sum(axis=1, keepdims=True)
        ctx[:, s] = A @ V[:, s]
        attn.append(A)
    out = ctx @ wo
    cache = {
        "q_states": q_states,
        "kv_states": kv_states,
        "Q": Q,
        "K": K,
        "V": V,
        "ctx": ctx,
        "attn": attn,
        "heads": heads,
        "scale": scale,
    }
    return out, cache


def _attention_backward(d_out, cache, wq, wk, wv, wo, grads, prefix):
    """Backward through _attention_forward; returns (d_q_states, d_kv_states)."""
    q_states = cache["q_states"]
    kv_states = cache["kv_states"]
    heads, scale = cache["heads"], cache["scale"]
    d = q_states.shape[1]
    dh = d // heads

    grads[prefix + "wo"] += cache["ctx"].T @ d_out
    d_ctx = d_out @ wo.T
    dQ = np.empty_like(cache["Q"])
    dK = np.empty_like(cache["K"])
    dV = np.empty_like(cache["V"])
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        A = cache["attn"][h]
        dA = d_ctx[:, s] @ cache["V"][:, s].T
        dV[:, s] = A.T @ d_ctx[:, s]
        # softmax rows: dZ = (dA - rowsum(dA*A)) * A
        dZ = (dA - (dA * A).sum(axis=1, keepdims=True)) * A
        dQ[:, s] = dZ @ cache["K"][:, s] / scale
        dK[:, s] = dZ.T @ cache["Q"][:, s] / scale
    grads[prefix + "wq"] += q_states.T @ dQ
    grads[prefix + "wk"] += kv_states.T @ dK
    grads[prefix + "wv"] += kv_states.T @ dV
    d_q_states = dQ @ wq.T
    d_kv_states = dK @ wk.T + dV @ wv.T
    return d_q_states, d_kv_states


def _pool_project_normalize(states, proj):
    p = states.mean(axis=0)
    z = p @ proj
    r = np.linalg.norm(z)
    u = z / r
    return u, {"p": p, "z": z, "r": r, "u": u, "n": states.shape[0]}


def _pool_backward(du, cache, proj, grads, proj_name):
    u, r, p, n = cache["u"], cache["r"], cache["p"], cache["n"]
    dz = (du - u * (u @ du)) / r
    grads[proj_name] += np.outer(p, dz)
    dp = dz @ proj.T
    return np.tile(dp / n, (n, 1))  # d_states


def cross_attend(
    music_states: np.ndarray, text_states: np.ndarray, model: AlignModel
) -> tuple[np.ndarray, np.ndarray]:
    """Bidirectional cross-modal attention -> pooled unit summaries."""
    um, ut, _ = _pair_forward_states(music_states, text_states, model)
    return um, ut


def _pair_forward_states(music_states, text_states, model):
    if music_states.ndim != 2 or music_states.shape[0] == 0:
        raise ValueError("music states must be a non-empty (n, d) array")
    if text_states.ndim != 2 or text_states.shape[0] == 0:
        raise ValueError("text states must be a non-empty (n, d) array")
    p = model.params
    heads = model.config.heads
    om, m_attn = _attention_forward(
        music_states, text_states, p["music_wq"], p["music_wk"], p["music_wv"], p["music_wo"], heads
    )
    ot, t_attn = _attention_forward(
        text_states, music_states, p["text_wq"], p["text_wk"], p["text_wv"], p["text_wo"], heads
    )
    um, m_pool = _pool_project_normalize(om, p["music_proj"])
    ut, t_pool = _pool_project_normalize(ot, p["text_proj"])
    cache = {"m_attn": m_attn, "t_attn": t_attn, "m_pool": m_pool, "t_pool": t_pool}
    return um, ut, cache


def _pair_forward(music_ids, text_ids, model):
    music_states = model.params["music_emb"][music_ids]
    text_states = model.params["text_emb"][text_ids]
    um, ut, cache = _pair_forward_states(music_states, text_states, model)
    cache["music_ids"] = music_ids
    cache["text_ids"] = text_ids
    return um, ut, cache


def _pair_backward(dum, dut, cache, model, grads):
    p = model.params
    d_om = _pool_backward(dum, cache["m_pool"], p["music_proj"], grads, "music_proj")
    d_ot = _pool_backward(dut, cache["t_pool"], p["text_proj"], grads, "text_proj")
    d_ms_q, d_ts_kv = _attention_backward(
        d_om, cache["m_attn"], p["music_wq"], p["music_wk"], p["music_wv"], p["music_wo"], grads, "music_"
    )
    d_ts_q, d_ms_kv = _attention_backward(
        d_ot, cache["t_attn"], p["text_wq"], p["text_wk"], p["text_wv"], p["text_wo"], grads, "text_"
    )
    d_music_states = d_ms_q + d_ms_kv
    d_text_states = d_ts_q + d_ts_kv
    np.add.at(grads["music_emb"], cache["music_ids"], d_music_states)
    np.add.at(grads["text_emb"], cache["text_ids"], d_text_states)


def _clamped_tau(model):
    """(tau, d tau / d log_temp); the derivative is zero where the clamp binds."""
    t = float(model.params["log_temp"])
    raw = math.exp(t)
    if raw < TAU_MIN:
        return TAU_MIN, 0.0
    if raw > TAU_MAX:
        return TAU_MAX, 0.0
    return raw, raw


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def info_nce(music_embs: np.ndarray, text_embs: np.ndarray, tau: float) -> float:
    """Symmetric InfoNCE: mean row and column cross-entropy of M T'/tau."""
    M = np.asarray(music_embs, dtype=np.float64)
    T = np.asarray(text_embs, dtype=np.float64)
    if M.shape != T.shape or M.ndim != 2 or M.shape[0] < 2:
        raise ValueError("need matching (N>=2, d) embedding matrices")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    S = M @ T.T / tau
    if not np.isfinite(S).all():
        raise ValueError("non-finite similarities")
    diag = np.diag(S)
    row_ce = (_logsumexp(S, axis=1) - diag).mean()
    col_ce = (_logsumexp(S, axis=0) - diag).mean()
    return float(0.5 * (row_ce + col_ce))


def _info_nce_grad(S):
    """d(loss)/dS for the symmetric InfoNCE loss given S already scaled."""
    n = S.shape[0]
    Pr = np.exp(S - _logsumexp(S, axis=1)[:, None])
    Pc = np.exp(S - _logsumexp(S, axis=0)[None, :])
    eye = np.eye(n)
    return 0.5 * ((Pr - eye) + (Pc - eye)) / n


def contrast_loss_from_sims(sims: Sequence[float], tau: float) -> float:
    """Cross-entropy of sims/tau with the first entry as the target."""
    s = np.asarray(sims, dtype=np.float64) / tau
    return float(_logsumexp(s, axis=0) - s[0])


def pairwise_loss(
    music: RemiSequence | Sequence[int],
    positive: str | Sequence[int],
    negatives: Sequence[str | Sequence[int]],
    model: AlignModel,
) -> float:
    """Explicit-negative loss for one music segment and its caption set.

    Each candidate caption is embedded against the music through the
    cross-attention path; the loss is softmax cross-entropy over the
    resulting similarities at the model temperature, positive first.
    """
    if not negatives:
        raise ValueError("need at least one negative caption")
    m_ids = _music_ids(music)
    tau, _ = _clamped_tau(model)
    sims = []
    for caption in [positive, *negatives]:
        t_ids = np.asarray(_caption_ids(caption, model), dtype=np.int64)
        um, ut, _ = _pair_forward(m_ids, t_ids, model)
        sims.append(float(um @ ut))
    return contrast_loss_from_sims(sims, tau)


def _caption_ids(caption, model):
    if isinstance(caption, str):
        return tokenize_text(caption, model.config.text_hash_buckets)
    if len(caption) == 0:
        raise ValueError("text token sequence must be non-empty")
    return list(caption)


def _in_batch_loss_and_grads(batch, model, grads=None):
    """Loss over [(music_ids, text_ids), ...]; accumulates grads if given."""
    n = len(batch)
    ums, uts, caches = [], [], []
    for m_ids, t_ids in batch:
        um, ut, cache = _pair_forward(m_ids, t_ids, model)
        ums.append(um)
        uts.append(ut)
        caches.append(cache)
    M = np.stack(ums)
    T = np.stack(uts)
    tau, dtau_dt = _clamped_tau(model)
    R = M @ T.T
    S = R / tau  # non-finite values propagate into the loss; train() checks
    diag = np.diag(S)
    loss = float(0.5 * ((_logsumexp(S, 1) - diag).mean() + (_logsumexp(S, 0) - diag).mean()))
    if grads is not None:
        G = _info_nce_grad(S)
        dM = G @ T / tau
        dT = G.T @ M / tau
        grads["log_temp"] += -(G * S).sum() / tau * dtau_dt
        for i in range(n):
            _pair_backward(dM[i], dT[i], caches[i], model, grads)
    return loss


def _explicit_loss_and_grads(group, model, grads=None):
    """Loss for one (music_ids, [pos_text_ids, neg_text_ids...]) group."""
    m_ids, candidate_ids = group
    tau, dtau_dt = _clamped_tau(model)
    ums, uts, caches, sims = [], [], [], []
    for t_ids in candidate_ids:
        um, ut, cache = _pair_forward(m_ids, t_ids, model)
        ums.append(um)
        uts.append(ut)
        caches.append(cache)
        sims.append(um @ ut)
    raw = np.asarray(sims)
    s = raw / tau
    loss = float(_logsumexp(s, axis=0) - s[0])
    if grads is not None:
        p = np.exp(s - _logsumexp(s, axis=0))
        ds = p.copy()
        ds[0] -= 1.0
        grads["log_temp"] += float(-(ds * raw).sum() / tau**2) * dtau_dt
        for k in range(len(candidate_ids)):
            _pair_backward(ds[k] / tau * uts[k], ds[k] / tau * ums[k], caches[k], model, grads)
    return loss


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float  # nan when there is no validation split


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    """CSV rows (epoch, split, loss) for plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,split,loss\n")
        for rec in history:
            fh.write(f"{rec.epoch},train,{rec.train_loss!r}\n")
            if not math.isnan(rec.val_loss):
                fh.write(f"{rec.epoch},validation,{rec.val_loss!r}\n")


def lr_at(step: int, total_steps: int, config: AlignConfig) -> float:
    if config.scheduler == "constant":
        return config.lr_max
    if total_steps <= 1:
        return config.lr_max
    frac = step / total_steps
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * frac))

def _prepare_in_batch(examples, model):
    music_cache: dict[str, np.ndarray] = {}
    items = []
    for e in examples:
        if e.polarity != "positive":
            continue
        if e.music not in music_cache:
            music_cache[e.music] = _music_ids(from_text(e.music))
        t_ids = np.asarray(
            tokenize_text(e.caption, model.config.text_hash_buckets), dtype=np.int64
        )
        items.append((music_cache[e.music], t_ids))
    return items


def _prepare_explicit(examples, model):
    music_cache: dict[str, np.ndarray] = {}
    positives: list[tuple[str, str, str]] = []
    negatives: dict[tuple[str, str], list] = {}
    buckets = model.config.text_hash_buckets
    for e in examples:
        if e.music not in music_cache:
            music_cache[e.music] = _music_ids(from_text(e.music))
        key = (e.segment_id, e.music)
        if e.polarity == "positive":
            positives.append((e.segment_id, e.music, e.caption))
        else:
            negatives.setdefault(key, []).append(
                np.asarray(tokenize_text(e.caption, buckets), dtype=np.int64)
            )
    items = []
    for segment_id, music, caption in positives:
        negs = negatives.get((segment_id, music))
        if not negs:
            raise ValueError(f"segment {segment_id} has no negative captions for explicit mode")
        pos_ids = np.asarray(tokenize_text(caption, buckets), dtype=np.int64)
        items.append((music_cache[music], [pos_ids, *negs]))
    return items


def _epoch_eval(items, model, mode):
    if not items:
        return math.nan
    if mode == "in_batch":
        # single forward over everything, batched at config size
        bs = model.config.batch_size
        losses = [
            _in_batch_loss_and_grads(items[i : i + bs], model)
            for i in range(0, len(items), bs)
            if len(items[i : i + bs]) >= 2
        ]
    else:
        losses = [_explicit_loss_and_grads(g, model) for g in items]
    return float(np.mean(losses)) if losses else math.nan


def train(
    dataset: SplitSet, config: AlignConfig, model: AlignModel | None = None
) -> tuple[AlignModel, list[EpochRecord]]:
    """Seeded SGD over the train split; returns the model and loss history.

    Deterministic: identical (dataset, config) gives bit-identical
    parameters and history. Scheduler steps once per batch. Pass ``model``
    to continue training existing parameters in place.
    """
    if not dataset.train:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = AlignModel.init(config, rng)
    mode = config.loss_mode
    prepare = _prepare_in_batch if mode == "in_batch" else _prepare_explicit
    items = prepare(dataset.train, model)
    val_items = prepare(dataset.validation, model) if dataset.validation else []
    if not items:
        raise ValueError("train split has no usable examples for this loss mode")

    bs = config.batch_size
    starts = list(range(0, len(items), bs))
    if mode == "in_batch":
        starts = [s for s in starts if len(items[s : s + bs]) >= 2]
    total_steps = config.epochs * len(starts)
    if total_steps == 0:
        raise ValueError("no full batches; lower batch_size or add data")

    history: list[EpochRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        shuffled = [items[i] for i in order]
        epoch_losses = []
        for s in starts:
            batch = shuffled[s : s + bs]
            grads = model.zero_grads()
            if mode == "in_batch":
                loss = _in_batch_loss_and_grads(batch, model, grads)
            else:
                group_losses = [_explicit_loss_and_grads(g, model, grads) for g in batch]
                for k in grads:
                    grads[k] /= len(batch)
                loss = float(np.mean(group_losses))
            lr = lr_at(step, total_steps, config)
            if not math.isfinite(loss):
                norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
                raise TrainingDivergedError(step, lr, norm)
            for k in PARAM_NAMES:
                model.params[k] -= lr * grads[k]
            epoch_losses.append(loss)
            step += 1
        history.append(
            EpochRecord(epoch, float(np.mean(epoch_losses)), _epoch_eval(val_items, model, mode))
        )
    return model, history


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    model: AlignModel,
    batch: Sequence[tuple],
    h: float = 1e-5,
    samples_per_tensor: int = 50,
    seed: int = 0,
    analytic_grads: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``batch`` is [(music_ids, text_ids), ...] as used by the in-batch loss.
    Checks >= samples_per_tensor randomly chosen entries of every parameter
    tensor (embedding tables are sampled on rows the batch touches, where
    gradients are nonzero). Pass ``analytic_grads`` to verify an externally
    supplied gradient instead (used by the corrupted-gradient control).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    if len(batch) < 2:
        raise ValueError("gradient check needs at least 2 pairs")
    batch = [
        (np.asarray(m, dtype=np.int64), np.asarray(t, dtype=np.int64)) for m, t in batch
    ]
    if analytic_grads is None:
        analytic_grads = model.zero_grads()
        _in_batch_loss_and_grads(batch, model, analytic_grads)

    rng = np.random.default_rng(seed)
    touched = {
        "music_emb": sorted({int(i) for m, _ in batch for i in m}),
        "text_emb": sorted({int(i) for _, t in batch for i in t}),
    }
    worst = 0.0
    for name in PARAM_NAMES:
        tensor = model.params[name]
        if name in touched:
            rows = touched[name]
            cols = tensor.shape[1]
            pool = [r * cols + c for r in rows for c in range(cols)]
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
            loss_hi = _in_batch_loss_and_grads(batch, model)
            flat[idx] = keep - h
            loss_lo = _in_batch_loss_and_grads(batch, model)
            flat[idx] = keep
            g_fd = (loss_hi - loss_lo) / (2 * h)
            g_an = float(ga_flat[idx])
            rel = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
            worst = max(worst, rel)
    return worst
