import json
import math
import os

import numpy as np
import pytest

from rommamba.errors import ConfigError
from rommamba.model import (
    ModelConfig,
    build_model,
    init_attention_weights,
    lm_forward,
    load_checkpoint,
    save_checkpoint,
    swa_forward,
)
from rommamba.tensor import Tensor, cross_entropy
from conftest import rel_diff


def attention_oracle(x, w, window, n_heads, base=10000.0):
    """Direct quadratic attention with rotary positions, one head and one query at a time."""
    L, D = x.shape
    hd = D // n_heads
    q, k, v = x @ w.W_q.data, x @ w.W_k.data, x @ w.W_v.data

    def rotate(vec, pos):
        half = hd // 2
        out = vec.copy()
        for i in range(half):
            ang = pos * base ** (-2.0 * i / hd)
            a, b = vec[i], vec[i + half]
            out[i] = a * math.cos(ang) - b * math.sin(ang)
            out[i + half] = b * math.cos(ang) + a * math.sin(ang)
        return out

    ctx = np.zeros((L, D))
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        for t in range(L):
            qt = rotate(q[t, sl], t)
            keys = range(max(0, t - window + 1), t + 1)
            scores = np.array([qt @ rotate(k[s, sl], s) / math.sqrt(hd) for s in keys])
            p = np.exp(scores - scores.max())
            p /= p.sum()
            ctx[t, sl] = sum(pi * v[s, sl] for pi, s in zip(p, keys))
    return ctx @ w.W_o.data


# ---------------------------------------------------------------- attention


def test_window_one_attends_to_self(rng):
    w = init_attention_weights(8, seed=0, dtype=np.float64)
    x = rng.standard_normal((6, 8))
    out = swa_forward(Tensor(x), w, window=1, n_heads=2).data
    np.testing.assert_allclose(out, x @ w.W_v.data @ w.W_o.data, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("window,heads", [(10, 1), (64, 2), (3, 2)])
def test_attention_matches_quadratic_oracle(rng, window, heads):
    w = init_attention_weights(8, seed=1, dtype=np.float64)
    x = rng.standard_normal((10, 8))
    assert rel_diff(swa_forward(Tensor(x), w, window, heads).data, attention_oracle(x, w, window, heads)) < 1e-12


def test_attention_is_causal(rng):
    w = init_attention_weights(8, seed=2)
    x = rng.standard_normal((2, 12, 8)).astype(np.float32)
    x2 = x.copy()
    x2[:, 6:] += 1.0
    a = swa_forward(Tensor(x), w, 4, 2).data
    b = swa_forward(Tensor(x2), w, 4, 2).data
    np.testing.assert_array_equal(a[:, :6], b[:, :6])


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(pattern="RA", n_layers=3)
    with pytest.raises(ConfigError):
        ModelConfig(pattern="X")
    with pytest.raises(ConfigError):
        ModelConfig(swa_window=0)
    with pytest.raises(ConfigError):
        ModelConfig(num_experts=2, top_k=3)


def test_reuse_needs_preceding_rom_layer():
    with pytest.raises(ConfigError, match="E"):
        ModelConfig(pattern="ER", n_layers=2, ffn_reuse_router=True).reuse_bindings()
    assert ModelConfig(pattern="ER", n_layers=2, ffn_reuse_router=False).reuse_bindings() == {}
    assert ModelConfig(pattern="RE", n_layers=4).reuse_bindings() == {1: 0, 3: 2}


def test_dense_tail_layers():
    cfg = ModelConfig(pattern="RE", n_layers=6, dense_tail_layers=2)
    assert cfg.layer_kinds() == ["R", "E", "R", "E", "M", "F"]


# ---------------------------------------------------------------- forward


PATTERNS = ["M", "R", "RE", "MARE", "MFAF"]


@pytest.mark.parametrize("pattern", PATTERNS)
def test_full_model_causal(pattern):
    cfg = ModelConfig(d_model=16, n_layers=len(pattern) * 2 if len(pattern) < 4 else 4, pattern=pattern,
                      num_experts=4, swa_window=5, d_state=4, n_heads=2)
    model = build_model(cfg, seed=3)
    toks = np.random.default_rng(3).integers(0, 256, (2, 20))
    changed = toks.copy()
    changed[:, 11:] = (changed[:, 11:] + 101) % 256
    a, _ = lm_forward(model, toks)
    b, _ = lm_forward(model, changed)
    np.testing.assert_array_equal(a.data[:, :11], b.data[:, :11])


def test_initial_loss_near_uniform():
    model = build_model(ModelConfig(d_model=32, n_layers=2, pattern="R", num_experts=4, d_state=4), seed=4)
    toks = np.random.default_rng(4).integers(0, 256, (4, 64))
    logits, _ = lm_forward(model, toks[:, :-1])
    ce = cross_entropy(logits.reshape(-1, 256), toks[:, 1:].reshape(-1)).item()
    assert abs(ce - math.log(256)) <= 0.05 * math.log(256)


def test_forward_and_build_deterministic():
    cfg = ModelConfig(d_model=16, n_layers=2, pattern="RE", num_experts=4, d_state=4)
    m1, m2 = build_model(cfg, seed=5), build_model(cfg, seed=5)
    for (k, a), b in zip(m1.state_dict().items(), m2.state_dict().values()):
        np.testing.assert_array_equal(a, b, err_msg=k)
    toks = np.arange(30) % 256
    np.testing.assert_array_equal(lm_forward(m1, toks)[0].data, lm_forward(m1, toks)[0].data)
    assert not np.array_equal(build_model(cfg, seed=6).embed.data, m1.embed.data)


def test_token_out_of_range():
    model = build_model(ModelConfig(d_model=16, n_layers=1, pattern="M", d_state=2))
    with pytest.raises(ConfigError):
        lm_forward(model, np.array([1, 256]))


def test_rom_layers_reduce_to_dense_model():
    base = dict(d_model=16, n_layers=3, d_state=4, num_experts=1, top_k=1)
    rom = build_model(ModelConfig(pattern="R", **base), seed=7)
    dense = build_model(ModelConfig(pattern="M", **base), seed=7)
    copied = {k.replace(".R.", ".M."): v for k, v in rom.state_dict().items() if "router" not in k}
    dense.load_state_dict(copied)
    toks = np.random.default_rng(7).integers(0, 256, (2, 24))
    assert rel_diff(lm_forward(rom, toks)[0].data, lm_forward(dense, toks)[0].data) <= 1e-5


def test_shared_mode_traces_coherent_and_reused():
    cfg = ModelConfig(d_model=16, n_layers=2, pattern="RE", num_experts=4, d_state=4)
    model = build_model(cfg, seed=8)
    _, aux = lm_forward(model, np.arange(40) % 256)
    assert aux.traces[0].coherent()
    assert [name for _, name, _ in aux.decisions()] == ["shared"]


def test_balance_loss_reported_when_enabled():
    cfg = ModelConfig(d_model=16, n_layers=2, pattern="R", num_experts=4, d_state=4, balance_alpha=1e-3)
    _, aux = lm_forward(build_model(cfg, seed=9), np.arange(32) % 256)
    assert aux.balance_loss.shape == () and aux.balance_loss.item() >= 2 * 1e-3 * (1 - 1e-12)


def test_param_names_and_untied_head():
    cfg = ModelConfig(d_model=16, n_layers=2, pattern="RA", num_experts=2, d_state=2, tie_embeddings=False)
    names = list(build_model(cfg).parameters())
    assert names[0] == "embed" and names[-1] == "head"
    assert "layers.0.R.experts.1.W_out" in names and "layers.1.A.W_q" in names


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(d_model=16, n_layers=2, pattern="RE", num_experts=2, d_state=2)
    model = build_model(cfg, seed=10)
    tensors = dict(model.state_dict(), scalar=np.float64(2.5), ints=np.arange(5, dtype=np.int64))
    save_checkpoint(tmp_path / "ck", tensors, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"} and list(loaded) == list(tensors)
    for k, v in tensors.items():
        v = np.asarray(v)
        assert loaded[k].dtype == v.dtype and loaded[k].shape == v.shape
        np.testing.assert_array_equal(loaded[k], v)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["version"] == 1 and {"name", "shape", "dtype", "offset", "nbytes"} <= set(manifest["tensors"][0])
    assert not [p for p in os.listdir(tmp_path / "ck") if p.endswith(".tmp")]


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(tmp_path, {"a": np.ones(2)}, {})
    path = tmp_path / "manifest.json"
    m = json.loads(path.read_text())
    m["version"] = 99
    path.write_text(json.dumps(m))
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(tmp_path)
