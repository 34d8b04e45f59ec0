"""Alignment tests: loss oracles, finite-difference gradients, training."""

import math
import zlib

import numpy as np
import pytest

from textmuse import align
from textmuse.align import (
    AlignConfig,
    AlignModel,
    TrainingDivergedError,
    contrast_loss_from_sims,
    cross_attend,
    encode_music,
    encode_text,
    grad_check,
    info_nce,
    lr_at,
    pairwise_loss,
    tokenize_text,
    train,
    write_history_csv,
)
from textmuse.dataset import PairExample, SplitSet
from textmuse.remi import VOCAB, RemiSequence


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# symmetric InfoNCE


def oracle_info_nce(M, T, tau):
    """Plain-loop reimplementation used as the oracle."""
    n = len(M)
    S = [
        [sum(M[i][k] * T[j][k] for k in range(len(M[i]))) / tau for j in range(n)]
        for i in range(n)
    ]
    row = sum(
        math.log(sum(math.exp(S[i][j]) for j in range(n))) - S[i][i] for i in range(n)
    )
    col = sum(
        math.log(sum(math.exp(S[i][j]) for i in range(n))) - S[j][j] for j in range(n)
    )
    return 0.5 * (row + col) / n


def test_info_nce_matches_loop_oracle(rng):
    M = unit_rows(rng, 5, 8)
    T = unit_rows(rng, 5, 8)
    for tau in (0.07, 0.5, 1.0, 3.0):
        assert info_nce(M, T, tau) == pytest.approx(oracle_info_nce(M, T, tau), abs=1e-12)


def test_info_nce_two_perfect_pairs():
    M = np.eye(2)
    # matched pairs identical, mismatched orthogonal, tau 1
    assert info_nce(M, M, 1.0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_info_nce_random_pairs_near_log_n(rng):
    n = 64
    loss = info_nce(unit_rows(rng, n, 64), unit_rows(rng, n, 64), 1.0)
    assert abs(loss - math.log(n)) / math.log(n) < 0.15


def test_info_nce_sharper_temperature_rewards_alignment():
    M = np.eye(4)
    assert info_nce(M, M, 0.07) < 1e-5 < info_nce(M, M, 1.0)


def test_info_nce_validation(rng):
    M = unit_rows(rng, 3, 4)
    with pytest.raises(ValueError):
        info_nce(M, M[:2], 1.0)
    with pytest.raises(ValueError):
        info_nce(M[:1], M[:1], 1.0)
    with pytest.raises(ValueError):
        info_nce(M, M, 0.0)
    bad = M.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        info_nce(bad, M, 1.0)


def test_contrast_loss_from_sims_oracle():
    sims, tau = [0.9, 0.1, -0.2], 0.07
    s = [x / tau for x in sims]
    expected = math.log(sum(math.exp(x) for x in s)) - s[0]
    assert contrast_loss_from_sims(sims, tau) == pytest.approx(expected, abs=1e-12)
    # a dominant positive drives the loss toward zero
    assert contrast_loss_from_sims([1.0, -1.0, -1.0], 0.05) < 1e-10


# ---------------------------------------------------------------------------
# text hashing


def test_tokenize_text_words_and_case():
    ids = tokenize_text("Slow, DREAMY piano!!")
    expected = [1 + zlib.crc32(w.encode()) % 32767 for w in ["slow", "dreamy", "piano"]]
    assert ids == expected
    assert all(1 <= i <= 32767 for i in ids)


def test_tokenize_text_empty_is_pad():
    assert tokenize_text("") == [0]
    assert tokenize_text("?!... ") == [0]


def test_tokenize_text_bucket_count():
    assert tokenize_text("alpha beta gamma", buckets=2) == [1, 1, 1]
    ids = tokenize_text("alpha beta", buckets=997)
    assert all(1 <= i < 997 for i in ids)


def test_tokenize_text_digits_kept():
    assert tokenize_text("track 42") == tokenize_text("TRACK: 42?")


# ---------------------------------------------------------------------------
# encoders


def small_model(**overrides):
    cfg = AlignConfig(
        embed_dim=overrides.pop("embed_dim", 4),
        heads=overrides.pop("heads", 1),
        text_hash_buckets=overrides.pop("text_hash_buckets", 64),
        **overrides,
    )
    return AlignModel.init(cfg)


def test_encode_music_hand_oracle():
    model = small_model()
    p60, p64 = VOCAB.pitch_id(60), VOCAB.pitch_id(64)
    model.params["music_emb"][p60] = [1.0, 0.0, 0.0, 0.0]
    model.params["music_emb"][p64] = [0.0, 2.0, 0.0, 0.0]
    mean = np.array([0.5, 1.0, 0.0, 0.0])  # identity projection at init
    expected = mean / np.linalg.norm(mean)
    got = encode_music([p60, p64], model)
    assert np.allclose(got, expected, atol=1e-15)
    seq = RemiSequence.from_tokens([p60, p64])
    assert np.array_equal(encode_music(seq, model), got)


def test_encode_music_projection_applied(rng):
    model = small_model()
    proj = rng.normal(size=(4, 4))
    model.params["music_proj"] = proj
    ids = [VOCAB.pitch_id(50), VOCAB.pitch_id(51), VOCAB.pitch_id(50)]
    z = model.params["music_emb"][ids].mean(axis=0) @ proj
    assert np.allclose(encode_music(ids, model), z / np.linalg.norm(z), atol=1e-12)


def test_encode_text_hand_oracle():
    model = small_model()
    ids = tokenize_text("gentle waltz", model.config.text_hash_buckets)
    states = model.params["text_emb"][ids]
    z = states.mean(axis=0)
    assert np.allclose(encode_text("gentle waltz", model), z / np.linalg.norm(z), atol=1e-12)
    assert np.array_equal(encode_text(ids, model), encode_text("gentle waltz", model))


def test_encoders_unit_norm(rng):
    model = small_model(embed_dim=8)
    for _ in range(5):
        ids = rng.integers(0, 405, size=rng.integers(1, 20)).tolist()
        assert np.linalg.norm(encode_music(ids, model)) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(encode_text("any words here", model)) == pytest.approx(1.0, abs=1e-12)
    # empty caption falls back to the pad bucket, still a valid vector
    assert np.linalg.norm(encode_text("", model)) == pytest.approx(1.0, abs=1e-12)


def test_encoders_reject_empty_sequences():
    model = small_model()
    with pytest.raises(ValueError):
        encode_music([], model)
    with pytest.raises(ValueError):
        encode_text([], model)
    with pytest.raises(ValueError):
        encode_music([999], model)


# ---------------------------------------------------------------------------
# cross-modal attention


def oracle_pair_embeddings(ms, ts, params, heads):
    d = ms.shape[1]
    dh = d // heads

    def attend(q, kv, wq, wk, wv, wo):
        Q, K, V = q @ wq, kv @ wk, kv @ wv
        out = np.zeros((q.shape[0], d))
        for h in range(heads):
            s = slice(h * dh, (h + 1) * dh)
            z = Q[:, s] @ K[:, s].T / math.sqrt(dh)
            e = np.exp(z - z.max(axis=1, keepdims=True))
            A = e / e.sum(axis=1, keepdims=True)
            out[:, s] = A @ V[:, s]
        return out @ wo

    om = attend(ms, ts, params["music_wq"], params["music_wk"], params["music_wv"], params["music_wo"])
    ot = attend(ts, ms, params["text_wq"], params["text_wk"], params["text_wv"], params["text_wo"])
    um = om.mean(axis=0) @ params["music_proj"]
    ut = ot.mean(axis=0) @ params["text_proj"]
    return um / np.linalg.norm(um), ut / np.linalg.norm(ut)


def randomized_model(rng, d=4, heads=1, scale=0.5):
    model = small_model(embed_dim=d, heads=heads)
    for name, tensor in model.params.items():
        if tensor.ndim == 2:
            model.params[name] = rng.normal(0.0, scale, tensor.shape)
    return model


def test_cross_attend_matches_oracle(rng):
    model = randomized_model(rng)
    ms, ts = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    um, ut = cross_attend(ms, ts, model)
    om, ot = oracle_pair_embeddings(ms, ts, model.params, 1)
    assert np.allclose(um, om, atol=1e-12)
    assert np.allclose(ut, ot, atol=1e-12)


def test_cross_attend_multi_head(rng):
    model = randomized_model(rng, d=8, heads=2)
    ms, ts = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    um, ut = cross_attend(ms, ts, model)
    om, ot = oracle_pair_embeddings(ms, ts, model.params, 2)
    assert np.allclose(um, om, atol=1e-12)
    assert np.allclose(ut, ot, atol=1e-12)


def test_cross_attend_rejects_empty(rng):
    model = small_model()
    with pytest.raises(ValueError):
        cross_attend(np.zeros((0, 4)), np.ones((2, 4)), model)


def test_pairwise_loss_is_assembled_from_pair_similarities(rng):
    model = randomized_model(rng, d=4)
    music = [VOCAB.pitch_id(60), VOCAB.pitch_id(64), VOCAB.pitch_id(67)]
    captions = ["warm evening jazz", "harsh noise", "fast bebop"]
    sims = []
    for c in captions:
        t_ids = tokenize_text(c, model.config.text_hash_buckets)
        um, ut = cross_attend(
            model.params["music_emb"][music], model.params["text_emb"][t_ids], model
        )
        sims.append(float(um @ ut))
    expected = contrast_loss_from_sims(sims, model.temperature)
    got = pairwise_loss(music, captions[0], captions[1:], model)
    assert got == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        pairwise_loss(music, captions[0], [], model)


# ---------------------------------------------------------------------------
# gradients


def check_fixture(rng):
    """Model with random full-rank params and a small mixed batch."""
    cfg = AlignConfig(embed_dim=8, heads=2, text_hash_buckets=50, temperature_init=1.0)
    model = AlignModel.init(cfg)
    for name, tensor in model.params.items():
        if tensor.ndim == 2:
            model.params[name] = rng.normal(0.0, 0.35, tensor.shape)
    model.params["log_temp"] = np.array(0.0)
    batch = [
        ([5, 9, 9, 200], [3, 7]),
        ([82, 83, 84], [7, 11, 12]),
        ([404, 0, 1, 1, 250], [49]),
    ]
    return model, batch


def test_grad_check_all_tensors(rng):
    model, batch = check_fixture(rng)
    assert grad_check(model, batch) < 1e-4


def test_grad_check_negative_control(rng):
    model, batch = check_fixture(rng)
    arrays = [
        (np.asarray(m, dtype=np.int64), np.asarray(t, dtype=np.int64)) for m, t in batch
    ]
    grads = model.zero_grads()
    align._in_batch_loss_and_grads(arrays, model, grads)
    grads["music_wv"] = grads["music_wv"] * 1.5 + 0.01
    assert grad_check(model, batch, analytic_grads=grads) > 1e-2


def test_grad_check_covers_every_tensor(rng):
    model, batch = check_fixture(rng)
    arrays = [
        (np.asarray(m, dtype=np.int64), np.asarray(t, dtype=np.int64)) for m, t in batch
    ]
    clean = model.zero_grads()
    align._in_batch_loss_and_grads(arrays, model, clean)
    for name in align.PARAM_NAMES:
        corrupted = {k: v.copy() for k, v in clean.items()}
        corrupted[name] = corrupted[name] * 1.5 + 0.02
        err = grad_check(model, batch, samples_per_tensor=8, analytic_grads=corrupted)
        assert err > 1e-3, f"corruption of {name} went undetected"


def test_grad_check_validation(rng):
    model, batch = check_fixture(rng)
    with pytest.raises(ValueError):
        grad_check(model, batch, h=1.0)
    with pytest.raises(ValueError):
        grad_check(model, batch[:1])


def test_explicit_loss_gradients_match_finite_differences(rng):
    model, _ = check_fixture(rng)
    group = (
        np.array([5, 9, 200], dtype=np.int64),
        [
            np.array([3, 7], dtype=np.int64),
            np.array([11], dtype=np.int64),
            np.array([7, 12, 12], dtype=np.int64),
        ],
    )
    grads = model.zero_grads()
    align._explicit_loss_and_grads(group, model, grads)
    h = 1e-5
    worst = 0.0
    for name in align.PARAM_NAMES:
        flat = model.params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        if name == "music_emb":
            idxs = [int(i) * 8 + c for i in group[0] for c in (0, 5)]
        elif name == "text_emb":
            idxs = [int(i) * 8 + c for t in group[1] for i in t for c in (1, 6)]
        else:
            idxs = rng.choice(flat.size, size=min(10, flat.size), replace=False).tolist()
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            hi = align._explicit_loss_and_grads(group, model)
            flat[idx] = keep - h
            lo = align._explicit_loss_and_grads(group, model)
            flat[idx] = keep
            fd = (hi - lo) / (2 * h)
            worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-8))
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# training


WORDS = (
    "calm bright dark stormy gentle driving sparse lush brisk mellow airy tense "
    "warm icy bold shy grand plain vivid muted rapid slow dense light deep thin "
    "crisp soft loud quiet rough smooth"
).split()


def synthetic_pairs(n, repeat=4):
    examples = []
    for i in range(n):
        music = "\n".join([f"Note_Pitch_{30 + i}"] * repeat)
        examples.append(PairExample(music, WORDS[i % len(WORDS)] + f" {i}", "positive", f"s{i}"))
    return examples


def tiny_split(n_train=8, n_val=0):
    ex = synthetic_pairs(n_train + n_val)
    return SplitSet(tuple(ex[:n_train]), tuple(ex[n_train:]), (), seed=0)


def tiny_config(**overrides):
    base = dict(
        embed_dim=16,
        heads=1,
        batch_size=4,
        epochs=3,
        seed=0,
        text_hash_buckets=512,
    )
    base.update(overrides)
    return AlignConfig(**base)


def test_train_is_deterministic():
    ds, cfg = tiny_split(), tiny_config()
    m1, h1 = train(ds, cfg)
    m2, h2 = train(ds, cfg)
    assert h1 == h2
    for name in align.PARAM_NAMES:
        assert np.array_equal(m1.params[name], m2.params[name])


def test_train_history_shape_and_nan_val():
    _, hist = train(tiny_split(), tiny_config())
    assert [r.epoch for r in hist] == [0, 1, 2]
    assert all(math.isfinite(r.train_loss) for r in hist)
    assert all(math.isnan(r.val_loss) for r in hist)


def test_train_validation_loss_reported():
    _, hist = train(tiny_split(8, 4), tiny_config())
    assert all(math.isfinite(r.val_loss) for r in hist)


def test_train_loss_decreases():
    _, hist = train(tiny_split(), tiny_config(epochs=40))
    assert hist[-1].train_loss < hist[0].train_loss


def test_train_seed_changes_trajectory():
    ds = tiny_split()
    _, h0 = train(ds, tiny_config(seed=0, epochs=5))
    _, h1 = train(ds, tiny_config(seed=1, epochs=5))
    assert h0 != h1


def test_train_empty_split_rejected():
    with pytest.raises(ValueError):
        train(SplitSet((), (), (), 0), tiny_config())


def test_train_diverged_error():
    ds, cfg = tiny_split(), tiny_config()
    model = AlignModel.init(cfg)
    model.params["music_emb"][:] = np.nan
    with pytest.raises(TrainingDivergedError) as exc_info:
        train(ds, cfg, model=model)
    assert exc_info.value.step == 0
    assert exc_info.value.lr > 0


def test_train_resume_in_place():
    ds, cfg = tiny_split(), tiny_config(epochs=2)
    model, _ = train(ds, cfg)
    before = model.params["music_emb"].copy()
    returned, hist = train(ds, cfg, model=model)
    assert returned is model
    assert len(hist) == 2
    assert not np.array_equal(before, model.params["music_emb"])


def test_train_explicit_mode():
    ex = []
    for e in synthetic_pairs(6):
        ex.append(e)
        ex.append(PairExample(e.music, "unrelated words entirely", "negative", e.segment_id))
    ds = SplitSet(tuple(ex), (), (), seed=0)
    _, hist = train(ds, tiny_config(loss_mode="explicit", epochs=4))
    assert len(hist) == 4
    assert all(math.isfinite(r.train_loss) for r in hist)
    assert hist[-1].train_loss < hist[0].train_loss


def test_lr_schedule_endpoints():
    cfg = tiny_config(lr_max=1e-3, lr_min=1e-5)
    assert lr_at(0, 100, cfg) == pytest.approx(1e-3)
    assert lr_at(100, 100, cfg) == pytest.approx(1e-5)
    assert lr_at(50, 100, cfg) == pytest.approx((1e-3 + 1e-5) / 2)
    flat = tiny_config(scheduler="constant", lr_max=1e-3, lr_min=1e-5)
    assert lr_at(77, 100, flat) == 1e-3


def test_config_validation():
    for kwargs in (
        dict(embed_dim=0),
        dict(embed_dim=10, heads=3),
        dict(lr_max=1e-6, lr_min=1e-4),
        dict(epochs=0),
        dict(scheduler="linear"),
        dict(loss_mode="triplet"),
        dict(batch_size=1),
        dict(temperature_init=0.0),
        dict(text_hash_buckets=1),
    ):
        with pytest.raises(ValueError):
            AlignConfig(**kwargs)


def test_history_csv_format(tmp_path):
    hist = [
        align.EpochRecord(0, 1.5, math.nan),
        align.EpochRecord(1, 1.25, 1.375),
    ]
    path = tmp_path / "hist.csv"
    write_history_csv(hist, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,split,loss"
    assert lines[1] == "0,train,1.5"
    assert lines[2] == "1,train,1.25"
    assert lines[3] == "1,validation,1.375"
    assert len(lines) == 4


def test_checkpoint_round_trip(tmp_path):
    ds, cfg = tiny_split(), tiny_config()
    model, _ = train(ds, cfg)
    path = tmp_path / "model.npz"
    model.save(path)
    loaded = AlignModel.load(path)
    assert loaded.config == cfg
    for name in align.PARAM_NAMES:
        assert np.array_equal(loaded.params[name], model.params[name])


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bogus.npz"
    with open(path, "wb") as fh:
        np.savez(fh, junk=np.zeros(3))
    with pytest.raises(ValueError, match="not an alignment checkpoint"):
        AlignModel.load(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    model = AlignModel.init(tiny_config())
    path = tmp_path / "v.npz"
    meta = '{"format_version": 99, "config": {}}'
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **model.params)
    with pytest.raises(ValueError, match="version"):
        AlignModel.load(path)
