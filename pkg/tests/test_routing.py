import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rommamba.errors import ConfigError, ContractError
from rommamba.routing import (
    RouterConfig,
    RouterWeights,
    assignment_fractions,
    balance_loss,
    jitter_noise,
    max_entropy,
    route,
    routing_stats,
)
from rommamba.tensor import Tensor


def route_logits(logits, K, renormalize=True):
    """Route with an identity router so the inputs are the logits themselves."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    N = logits.shape[-1]
    return route(Tensor(logits), RouterWeights(Tensor(np.eye(N))), RouterConfig(N, K, renormalize))


def test_top1_example():
    d = route_logits([2.0, 1.0, 0.0, -1.0], 1, renormalize=False)
    assert d.indices.tolist() == [[0]]
    assert d.gates.data[0, 0] == pytest.approx(math.exp(2) / sum(math.exp(v) for v in (2, 1, 0, -1)), rel=1e-14)
    assert d.gates.data[0, 0] == pytest.approx(0.6439, abs=5e-5)
    assert route_logits([2.0, 1.0, 0.0, -1.0], 1).gates.data[0, 0] == 1.0


def test_uniform_logits_top2_tie_break():
    d = route_logits([0.0, 0.0, 0.0, 0.0], 2)
    assert d.indices.tolist() == [[0, 1]]
    np.testing.assert_array_equal(d.gates.data, [[0.5, 0.5]])


@pytest.mark.parametrize("renorm", [True, False])
def test_single_expert_gate_is_one(renorm):
    d = route_logits([[3.0], [-2.0]], 1, renormalize=renorm)
    np.testing.assert_array_equal(d.gates.data, [[1.0], [1.0]])


def test_k_greater_than_n_is_config_error():
    with pytest.raises(ConfigError):
        RouterConfig(4, 5)
    with pytest.raises(ConfigError):
        RouterConfig(0, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.data())
def test_decision_invariants(N, data):
    K = data.draw(st.integers(1, N))
    renorm = data.draw(st.booleans())
    seed = data.draw(st.integers(0, 2**31 - 1))
    logits = np.random.default_rng(seed).standard_normal((6, N)) * 3
    d = route_logits(logits, K, renorm)
    p = d.probs.data
    assert all(len(set(row)) == K for row in d.indices.tolist())
    assert np.all(d.gates.data > 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    if renorm:
        np.testing.assert_allclose(d.gates.data.sum(-1), 1.0, atol=1e-6)
    else:
        np.testing.assert_array_equal(d.gates.data, np.take_along_axis(p, d.indices, -1))
    assert all(a in row for a, row in zip(p.argmax(-1), d.indices.tolist()))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.floats(-100, 100), st.integers(0, 2**31 - 1))
def test_shift_invariance(N, c, seed):
    logits = np.random.default_rng(seed).standard_normal((5, N))
    K = 1 + seed % N
    a = route_logits(logits, K)
    b = route_logits(logits + c, K)
    assert [sorted(r) for r in a.indices.tolist()] == [sorted(r) for r in b.indices.tolist()]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_column_permutation_equivariance(N, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((7, 5)))
    W = rng.standard_normal((5, N))
    perm = rng.permutation(N)
    cfg = RouterConfig(N, 1 + seed % N)
    a = route(x, RouterWeights(Tensor(W)), cfg)
    b = route(x, RouterWeights(Tensor(W[:, perm])), cfg)
    np.testing.assert_allclose(b.probs.data, a.probs.data[:, perm], rtol=1e-12)
    # b's expert j is a's expert perm[j]; continuous logits make ties vanishingly unlikely
    assert [sorted(perm[r]) for r in b.indices] == [sorted(r) for r in a.indices.tolist()]


def test_jitter_zero_is_identity_and_seeded_jitter_reproducible(rng):
    x = Tensor(rng.standard_normal((9, 4)))
    w = RouterWeights(Tensor(rng.standard_normal((4, 4))))
    plain = route(x, w, RouterConfig(4, 2, jitter_eps=0.0), training=True, seed=3)
    ref = route(x, w, RouterConfig(4, 2), training=False)
    np.testing.assert_array_equal(plain.probs.data, ref.probs.data)
    j1 = route(x, w, RouterConfig(4, 2, jitter_eps=0.3), training=True, seed=3, layer=1)
    j2 = route(x, w, RouterConfig(4, 2, jitter_eps=0.3), training=True, seed=3, layer=1)
    j3 = route(x, w, RouterConfig(4, 2, jitter_eps=0.3), training=True, seed=4, layer=1)
    np.testing.assert_array_equal(j1.probs.data, j2.probs.data)
    assert not np.array_equal(j1.probs.data, j3.probs.data)
    noise = jitter_noise((1000,), 0.3, 0, 0, np.float64)
    assert noise.min() >= 0.7 and noise.max() <= 1.3


# ---------------------------------------------------------------- balance loss


def test_balance_loss_uniform_one_layer():
    probs = Tensor(np.full((8, 4), 0.25))
    idx = (np.arange(8) % 4)[:, None]
    got = balance_loss([probs], [idx], RouterConfig(4, 1, balance_alpha=1e-3)).item()
    assert got == 1e-3


def test_balance_loss_degenerate_and_zero():
    onehot = np.zeros((5, 4))
    onehot[:, 0] = 1.0
    idx = np.zeros((5, 1), dtype=int)
    assert balance_loss([Tensor(onehot)], [idx], RouterConfig(4, 1, balance_alpha=0.01)).item() == 0.01 * 4
    assert balance_loss([Tensor(onehot)], [idx], RouterConfig(4, 1, balance_alpha=0.0)).item() == 0.0


def test_balance_loss_empty_is_contract_error():
    with pytest.raises(ContractError):
        balance_loss([Tensor(np.zeros((0, 4)))], [np.zeros((0, 1), dtype=int)], RouterConfig(4, 1))
    with pytest.raises(ContractError):
        balance_loss([], [], RouterConfig(4, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_self_weighted_balance_is_at_least_one(N, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(N) * 0.7)
    value = N * float(np.sum(p * p))
    assert value >= 1.0 - 1e-12
    assert N * float(np.sum(np.full(N, 1.0 / N) ** 2)) == pytest.approx(1.0, abs=1e-15)


def test_balance_loss_gradient_flows_through_probs(rng):
    logits = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    d = route(logits, RouterWeights(Tensor(np.eye(3))), RouterConfig(3, 1, balance_alpha=1.0))
    balance_loss([d.probs], [d.indices], RouterConfig(3, 1, balance_alpha=1.0)).backward()
    assert logits.grad is not None and np.abs(logits.grad).sum() > 0


# ---------------------------------------------------------------- statistics


def test_stats_examples():
    from rommamba.routing import RoutingDecision

    def dec(idx, N):
        idx = np.asarray(idx).reshape(-1, 1)
        return RoutingDecision(idx, Tensor(np.ones(idx.shape)), Tensor(np.ones((len(idx), N)) / N), N, 1)

    s = routing_stats(dec(np.arange(16) % 8, 8))
    assert s["entropy"] == pytest.approx(math.log(8), rel=1e-14)
    assert max_entropy(8) == pytest.approx(2.0794, abs=1e-4)
    s = routing_stats(dec(np.zeros(5, dtype=int), 4))
    assert s["entropy"] == 0.0 and s["max_load"] == 1.0
    np.testing.assert_allclose(assignment_fractions(np.array([0, 0, 1, 1, 2, 2]), 4), [1 / 3, 1 / 3, 1 / 3, 0])
