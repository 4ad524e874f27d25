import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rommamba.data import SEPARATOR_ID, Corpus, decode, pack, split_documents, synthetic_text
from rommamba.errors import ConfigError, NumericalError
from rommamba.model import ModelConfig, build_model
from rommamba.train import (
    AdamState,
    TrainConfig,
    adamw_step,
    clip_grads,
    decays,
    evaluate_ppl,
    load_model,
    lm_loss,
    lr_at,
    train,
    train_from_scratch,
)

TINY = ModelConfig(d_model=16, n_layers=2, pattern="R", num_experts=2, d_state=4)


def tiny_train_cfg(steps, **kw):
    base = dict(seq_len=32, batch_tokens=128, total_tokens=128 * steps, peak_lr=3e-3, log_interval=1, eval_windows=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_corpus():
    return Corpus.load("bundled:tiny", val_fraction=0.2)


# ---------------------------------------------------------------- optimizer


def test_adamw_single_step_example():
    p = {"w": np.ones((1, 1))}
    adamw_step(p, {"w": np.ones((1, 1))}, AdamState(), lr=1e-3, weight_decay=0.1)
    expected = 1 - 1e-4 - 1e-3 * (1 / (1 + 1e-8))
    assert p["w"][0, 0] == pytest.approx(expected, rel=1e-15)
    assert p["w"][0, 0] == pytest.approx(0.9989, abs=1e-9)


def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.full((2, 2), 3.0)}
    state = AdamState()
    for _ in range(3):
        adamw_step(p, {"w": np.zeros((2, 2))}, state, lr=1e-2, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], np.full((2, 2), 3.0))


def test_adamw_identical_runs_are_bitwise_equal(rng):
    grads = [rng.standard_normal((3, 4)) for _ in range(5)]
    outs = []
    for _ in range(2):
        p, s = {"w": np.ones((3, 4))}, AdamState()
        for g in grads:
            adamw_step(p, {"w": g.copy()}, s, lr=1e-2, weight_decay=0.1)
        outs.append(p["w"])
    np.testing.assert_array_equal(*outs)


def test_adamw_rejects_non_finite_and_names_tensor():
    with pytest.raises(NumericalError, match="layers.0.W"):
        adamw_step({"layers.0.W": np.ones(2)}, {"layers.0.W": np.array([1.0, np.nan])}, AdamState(), 1e-3)


def test_decay_mask():
    assert decays("layers.0.R.experts.0.W_in", (4, 8))
    for name, shape in (("layers.0.norm", (4,)), ("layers.0.M.conv_bias", (8,)), ("layers.0.M.A_log", (8, 4)),
                        ("layers.0.R.router.shared", (4, 2)), ("layers.0.M.dt_bias", (8,))):
        assert not decays(name, shape), name


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(0.01, 5.0))
def test_clip_bounds_norm(values, max_norm):
    grads = {"a": np.array(values[: len(values) // 2 + 1]), "b": np.array(values[len(values) // 2 + 1:])}
    pre, post = clip_grads(grads, max_norm)
    actual = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    assert post <= max_norm * (1 + 1e-6) and actual == pytest.approx(post, rel=1e-12, abs=1e-300)
    assert pre == pytest.approx(math.sqrt(sum(v * v for v in values)), rel=1e-12)


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    cfg = TrainConfig(total_tokens=1000 * 1024)
    assert cfg.warmup_steps == 10
    assert lr_at(cfg.warmup_steps, cfg) == 4e-4
    assert lr_at(cfg.total_steps, cfg) == 0.0
    mid = (cfg.warmup_steps + cfg.total_steps) / 2
    assert lr_at(mid, cfg) == pytest.approx(2e-4, rel=1e-12)
    assert lr_at(0, cfg) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5000), st.floats(0.0, 0.5))
def test_lr_shape(total, ratio):
    cfg = TrainConfig(seq_len=1, batch_tokens=1, total_tokens=total, warmup_ratio=ratio)
    values = [lr_at(s, cfg) for s in range(total + 1)]
    w = cfg.warmup_steps
    assert max(values) == values[w] == cfg.peak_lr
    assert all(b <= a for a, b in zip(values[w:], values[w + 1:]))
    assert all(b >= a for a, b in zip(values[: w + 1], values[1: w + 1]))
    # continuity: no jump larger than one warmup increment or the steepest cosine step
    step_bound = cfg.peak_lr * max(1.0 / w, math.pi / (2 * max(1, total - w)))
    assert max(abs(b - a) for a, b in zip(values, values[1:])) <= step_bound * (1 + 1e-9)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=100, batch_tokens=150)
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")


# ---------------------------------------------------------------- data


def test_documents_and_packing():
    docs = split_documents(b"one\n\ntwo\x00\n\n\nthree")
    assert docs == [b"one", b"two", b"three"]
    ids = pack(docs)
    assert ids.tolist().count(SEPARATOR_ID) == 3 and decode(ids[:3]) == "one"


def test_corpus_split_and_batches_deterministic(small_corpus):
    again = Corpus.load("bundled:tiny", val_fraction=0.2)
    np.testing.assert_array_equal(small_corpus.val, again.val)
    a = small_corpus.batch(3, 7, 4, 16)
    b = small_corpus.batch(3, 7, 4, 16)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[0][:, 1:], a[1][:, :-1])
    assert not np.array_equal(a[0], small_corpus.batch(3, 8, 4, 16)[0])


def test_synthetic_text_deterministic():
    assert synthetic_text(5000, seed=1) == synthetic_text(5000, seed=1)
    assert synthetic_text(5000, seed=1) != synthetic_text(5000, seed=2)
    assert len(synthetic_text(5000)) == 5000


def test_windows_do_not_overlap(small_corpus):
    x, y = small_corpus.windows(16, max_windows=5)
    assert x.shape == (5, 16)
    np.testing.assert_array_equal(x[1], small_corpus.val[16:32])
    np.testing.assert_array_equal(y[0], small_corpus.val[1:17])


# ---------------------------------------------------------------- evaluation


def test_untrained_model_ppl_near_vocab(small_corpus):
    model = build_model(TINY, seed=0)
    rows = evaluate_ppl(model, small_corpus, [32, 64], max_windows=16)
    assert [r["context_length"] for r in rows] == [32, 64]
    for r in rows:
        assert abs(r["ppl"] - 256) <= 0.05 * 256
    assert evaluate_ppl(model, small_corpus, [32], max_windows=16) == rows[:1]


def test_loss_streams_coincide_without_balance(small_corpus):
    model = build_model(TINY, seed=1)
    x, y = small_corpus.batch(0, 1, 2, 16)
    total, ce, _ = lm_loss(model, x, y, training=True, seed=5)
    assert total.item() == ce.item()
    total, ce, _ = lm_loss(model, x, y, training=True, seed=5, balance_alpha=1e-2)
    assert total.item() > ce.item()


# ---------------------------------------------------------------- training loop


def test_loss_decreases_on_repetitive_text():
    text = b"\n\n".join([b"the cat sat on the mat and the dog sat on the log. " * 8] * 6)
    corpus = Corpus.from_bytes(text, val_fraction=0.2)
    res = train_from_scratch(TINY, corpus, tiny_train_cfg(200))
    losses = [r["loss"] for r in res.history if r["split"] == "train"]
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0] - 1.0
    assert all(r["grad_norm"] <= 1.0 + 1e-6 for r in res.history if r["split"] == "train")


def test_metrics_records(tmp_path, small_corpus):
    train_from_scratch(TINY, small_corpus, tiny_train_cfg(4, log_interval=2), out_dir=str(tmp_path))
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["split"] for r in recs] == ["train", "train", "val"]
    fields = {"step", "tokens", "split", "loss", "ppl", "lr", "grad_norm", "per_layer_utilization"}
    assert all(fields <= set(r) for r in recs)
    util = recs[0]["per_layer_utilization"]
    assert set(util) == {"0.shared", "1.shared"} and all(abs(sum(u) - 1) < 1e-12 for u in util.values())


def test_resume_is_bitwise_identical(tmp_path, small_corpus):
    cfg = tiny_train_cfg(12, log_interval=3)
    full = train_from_scratch(TINY, small_corpus, cfg)
    train_from_scratch(TINY, small_corpus, cfg, out_dir=str(tmp_path), max_steps=5)
    model, state, meta = load_model(tmp_path / "checkpoint")
    assert state.step == 5 and meta["step"] == 5
    resumed = train(model, small_corpus, cfg, state=state)
    for k, v in full.model.state_dict().items():
        np.testing.assert_array_equal(resumed.model.state_dict()[k], v, err_msg=k)
        np.testing.assert_array_equal(resumed.state.m[k], full.state.m[k])
    assert resumed.final_val == full.final_val
    assert [r["loss"] for r in full.history if r["step"] > 5] == [r["loss"] for r in resumed.history]


def test_nan_loss_aborts_and_keeps_checkpoint(tmp_path, small_corpus):
    cfg = tiny_train_cfg(10, checkpoint_interval=2)
    res = train_from_scratch(TINY, small_corpus, cfg, out_dir=str(tmp_path), max_steps=2)
    before = (tmp_path / "checkpoint" / "tensors.bin").read_bytes()
    res.model.embed.data[:] = np.nan
    with pytest.raises(NumericalError, match="step 3"):
        train(res.model, small_corpus, cfg, out_dir=str(tmp_path), state=res.state)
    assert (tmp_path / "checkpoint" / "tensors.bin").read_bytes() == before
    model, state, _ = load_model(tmp_path / "checkpoint")
    assert state.step == 2 and np.isfinite(model.embed.data).all()
