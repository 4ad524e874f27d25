"""Top-K token routing, balance loss and utilization statistics."""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, div, matmul, mean, mul, softmax, sum_, take_along_last


@dataclass
class RouterConfig:
    num_experts: int = 8
    top_k: int = 1
    renormalize: bool = True
    # multiplicative logit noise in [1 - eps, 1 + eps], applied only while training
    jitter_eps: float = 0.01
    balance_alpha: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must lie in [1, num_experts={self.num_experts}], got {self.top_k}")
        if self.jitter_eps < 0 or self.balance_alpha < 0:
            raise ConfigError("jitter_eps and balance_alpha must be nonnegative")


@dataclass
class RouterWeights:
    W_r: Tensor  # [Dm, N]

    @property
    def num_experts(self):
        return self.W_r.shape[1]


@dataclass
class RoutingDecision:
    """Per-token expert choice.

    ``indices[..., j]`` is the expert with the j-th largest probability (ties go to
    the lower id); ``gates`` are the matching weights; ``probs`` the full softmax.
    """

    indices: np.ndarray
    gates: Tensor
    probs: Tensor
    num_experts: int
    top_k: int
    meta: dict = field(default_factory=dict)

    @property
    def n_tokens(self):
        return int(np.prod(self.indices.shape[:-1]))

    def flat(self):
        """View with the token axes collapsed to one: indices ``[T, K]``, probs ``[T, N]``."""
        T = self.n_tokens
        return RoutingDecision(
            self.indices.reshape(T, self.top_k),
            self.gates.reshape(T, self.top_k),
            self.probs.reshape(T, self.num_experts),
            self.num_experts,
            self.top_k,
            self.meta,
        )


def jitter_noise(shape, eps, seed, layer, dtype):
    """Uniform ``[1 - eps, 1 + eps]`` noise; a pure function of ``(seed, layer)`` and token position."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(layer)]))
    return rng.uniform(1.0 - eps, 1.0 + eps, size=shape).astype(dtype)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort of -p keeps the lower expert id first among equal probabilities
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def route(x: Tensor, w: RouterWeights, cfg: RouterConfig, training=False, seed=0, layer=0) -> RoutingDecision:
    """Softmax router with top-K selection over ``x[..., Dm]``."""
    cfg.validate()
    if w.num_experts != cfg.num_experts:
        raise ConfigError(f"router has {w.num_experts} columns but config asks for {cfg.num_experts} experts")
    logits = matmul(x, w.W_r) if x.ndim >= 2 else matmul(x.reshape(1, -1), w.W_r)
    if training and cfg.jitter_eps > 0:
        logits = mul(logits, jitter_noise(logits.shape, cfg.jitter_eps, seed, layer, logits.dtype))
    probs = softmax(logits, axis=-1)
    idx = top_k_indices(probs.data, cfg.top_k)
    gates = take_along_last(probs, idx)
    if cfg.renormalize:
        gates = div(gates, sum_(gates, axis=-1, keepdims=True))
    return RoutingDecision(idx, gates, probs, cfg.num_experts, cfg.top_k)


def assignment_fractions(indices: np.ndarray, num_experts: int) -> np.ndarray:
    """Fraction of all token-slot assignments that go to each expert."""
    flat = np.asarray(indices).reshape(-1)
    if flat.size == 0:
        raise ContractError("routing statistics need at least one token")
    return np.bincount(flat, minlength=num_experts) / flat.size


def balance_loss(probs_per_layer, indices_per_layer, cfg: RouterConfig) -> Tensor:
    """``alpha * sum_layers N * sum_i F_i * mean_t(P[t, i])``.

    ``F_i`` (assignment fraction) is a constant; gradients flow through the probabilities.
    """
    if len(probs_per_layer) != len(indices_per_layer):
        raise ContractError("need one index array per probability tensor")
    if not probs_per_layer:
        raise ContractError("balance_loss needs at least one layer")
    total = None
    for probs, idx in zip(probs_per_layer, indices_per_layer):
        N = probs.shape[-1]
        if probs.size == 0:
            raise ContractError("balance_loss over an empty token set")
        F = assignment_fractions(idx, N).astype(probs.dtype)
        p_mean = mean(probs.reshape(-1, N), axis=0)
        term = mul(sum_(mul(p_mean, F)), float(N))
        total = term if total is None else total + term
    return mul(total, float(cfg.balance_alpha))


def routing_stats(decision: RoutingDecision) -> dict:
    """Utilization per expert, its entropy (nats) and the largest single-expert share."""
    util = assignment_fractions(decision.indices, decision.num_experts)
    nz = util[util > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return {"utilization": util.tolist(), "entropy": entropy + 0.0, "max_load": float(util.max())}


def max_entropy(num_experts: int) -> float:
    return math.log(num_experts)
