"""Closed-form parameter and FLOP counts for model configs.

FLOPs count a multiply-accumulate as 2 and ignore activations, norms and biases,
so totals are dominated by projections. Everything is an exact Python integer.
"""
from dataclasses import dataclass, field
from typing import List

from .model import ModelConfig
from .rom import INDEPENDENT, parse_expertized


@dataclass
class LayerCost:
    name: str
    kind: str
    total_params: int
    active_params: int
    flops: int = 0


@dataclass
class CostReport:
    seq_len: int
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(c.total_params for c in self.layers)

    @property
    def active_params(self) -> int:
        return sum(c.active_params for c in self.layers)

    @property
    def forward_flops(self) -> int:
        return sum(c.flops for c in self.layers)

    def summary(self) -> dict:
        return {"total_params": self.total_params, "active_params": self.active_params,
                "forward_flops": self.forward_flops, "seq_len": self.seq_len}


def mamba_param_groups(cfg: ModelConfig) -> dict:
    """Parameter count of each part of one Mamba layer, keyed by expertizable name where one applies."""
    d = cfg.dims
    Dm, De, Ds, dr, k = d.d_model, d.d_expand, d.d_state, d.dt_rank, d.conv_kernel
    return {
        "conv": Dm * De,
        "gate": Dm * De,
        "out": De * Dm,
        "x": De * (dr + 2 * Ds),
        "dt": dr * De + De,  # projection plus its bias
        "rest": k * De + De + De * Ds + (De if cfg.use_skip else 0),
    }


def mamba_flop_groups(cfg: ModelConfig) -> dict:
    """Per-token forward FLOPs of each part of one Mamba layer."""
    d = cfg.dims
    Dm, De, Ds, dr, k = d.d_model, d.d_expand, d.d_state, d.dt_rank, d.conv_kernel
    return {
        "conv": 2 * Dm * De,
        "gate": 2 * Dm * De,
        "out": 2 * De * Dm,
        "x": 2 * De * (dr + 2 * Ds),
        "dt": 2 * dr * De,
        # depthwise conv, then discretize + state update + readout
        "rest": 2 * k * De + 6 * De * Ds,
    }


def _n_routers(cfg, expertized):
    return len(expertized) if cfg.routing_mode == INDEPENDENT else 1


def _attention_flops(Dm, window, seq_len):
    # visible keys at position t: min(t + 1, window); QK^T and AV each cost 2*Dm per key
    visible = sum(min(t + 1, window) for t in range(seq_len))
    return seq_len * 8 * Dm * Dm + 4 * Dm * visible


def layer_cost(cfg: ModelConfig, index: int, kind: str, seq_len: int, bound_to_router: bool) -> LayerCost:
    Dm, Df, N, K = cfg.d_model, cfg.d_ff, cfg.num_experts, cfg.top_k
    norm = Dm
    name = f"layers.{index}.{kind}"
    if kind in "MR":
        p, f = mamba_param_groups(cfg), mamba_flop_groups(cfg)
        total = active = norm + sum(p.values())
        flops = sum(f.values())
        if kind == "R":
            ex = parse_expertized(cfg.expertized)
            routers = _n_routers(cfg, ex) * Dm * N
            total += (N - 1) * sum(p[e] for e in ex) + routers
            active += (K - 1) * sum(p[e] for e in ex) + routers
            flops += (K - 1) * sum(f[e] for e in ex) + _n_routers(cfg, ex) * 2 * Dm * N
        return LayerCost(name, kind, total, active, flops * seq_len)
    if kind == "A":
        total = norm + 4 * Dm * Dm
        return LayerCost(name, kind, total, total, _attention_flops(Dm, cfg.swa_window, seq_len))
    if kind == "F":
        total = norm + 3 * Dm * Df
        return LayerCost(name, kind, total, total, 6 * Dm * Df * seq_len)
    # E: SwiGLU experts, own router unless it reuses a RoM decision
    Ne = cfg.ffn_experts
    Ke = min(K, Ne)
    router = 0 if bound_to_router else Dm * Ne
    total = norm + Ne * 3 * Dm * Df + router
    active = norm + Ke * 3 * Dm * Df + router
    flops = Ke * 6 * Dm * Df + (0 if bound_to_router else 2 * Dm * Ne)
    return LayerCost(name, kind, total, active, flops * seq_len)


def count_flops(cfg: ModelConfig, seq_len: int = 4096) -> CostReport:
    """Parameters and forward FLOPs for one sequence of ``seq_len`` tokens, no model construction."""
    cfg.validate()
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    V, Dm = cfg.vocab_size, cfg.d_model
    bindings = cfg.reuse_bindings()
    rep = CostReport(seq_len)
    rep.layers.append(LayerCost("embed", "embed", V * Dm, V * Dm, 0))
    for i, kind in enumerate(cfg.layer_kinds()):
        rep.layers.append(layer_cost(cfg, i, kind, seq_len, i in bindings))
    rep.layers.append(LayerCost("final_norm", "norm", Dm, Dm, 0))
    head_params = 0 if cfg.tie_embeddings else Dm * V
    rep.layers.append(LayerCost("head", "head", head_params, head_params, 2 * Dm * V * seq_len))
    return rep


def count_params(cfg: ModelConfig) -> CostReport:
    return count_flops(cfg, seq_len=1)


def dense_twin(cfg: ModelConfig) -> ModelConfig:
    """The same stack with every R layer made dense and every E layer a single MLP."""
    d = cfg.to_dict()
    d["pattern"] = cfg.pattern.replace("R", "M").replace("E", "F")
    return ModelConfig.from_dict(d)


def format_count(n: int) -> str:
    for div, suffix in ((10**12, "T"), (10**9, "B"), (10**6, "M"), (10**3, "K")):
        if abs(n) >= div:
            return f"{n / div:.3g}{suffix}"
    return str(n)
