"""Routing Mamba layer and the shared-routing SwiGLU FFN-MoE.

In ``shared`` mode one router decision per token selects the same expert index for
every expertized projection of the layer. Conv/gate (and dt/x) projections sum the
selected experts' outputs without weights; only the output projection is scaled by
the gate values. ``independent`` mode gives every expertized projection its own
router and applies each router's gates to its own projection.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .mamba import MambaWeights, init_inner_weights, uniform_init
from .routing import RouterConfig, RouterWeights, RoutingDecision, route
from .ssm import MambaDims, SsmInnerWeights, a_matrix, selective_scan, split_xproj
from .tensor import (
    Tensor,
    add,
    concat,
    depthwise_conv1d_causal,
    getitem,
    gather_rows,
    matmul,
    mul,
    row_stable_matmul,
    reshape,
    scatter_add_rows,
    silu,
    softplus,
    sum_,
)

EXPERTIZABLE = ("conv", "gate", "out", "dt", "x")
PROJECTIONS = ("conv", "gate", "out")
SHARED, INDEPENDENT = "shared", "independent"
REUSE_ROUTER = "reuse"


def parse_expertized(spec) -> frozenset:
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.replace("+", ",").split(",") if s.strip()]
    out = frozenset(s.lower() for s in spec)
    unknown = out - set(EXPERTIZABLE)
    if unknown:
        raise ConfigError(f"unknown expertized projections {sorted(unknown)}; choose from {EXPERTIZABLE}")
    return out


@dataclass
class RoMWeights:
    """Expert copies of the expertized projections plus one shared copy of everything else.

    Non-expertized entries of ``W_in``, ``W_g``, ``W_out``, ``W_x``, ``W_dt``, ``dt_bias``
    hold a single tensor. ``routers`` maps ``"shared"`` (shared mode) or a projection
    name (independent mode) to its router.
    """

    W_in: List[Tensor]
    W_g: List[Tensor]
    W_out: List[Tensor]
    W_conv: Tensor
    conv_bias: Tensor
    inner: SsmInnerWeights
    W_x: List[Tensor]
    W_dt: List[Tensor]
    dt_bias: List[Tensor]
    routers: Dict[str, RouterWeights]
    expertized: frozenset
    num_experts: int

    def validate(self, mode):
        N = self.num_experts
        pairs = {"conv": self.W_in, "gate": self.W_g, "out": self.W_out, "x": self.W_x, "dt": self.W_dt}
        for name, lst in pairs.items():
            want = N if name in self.expertized else 1
            if len(lst) != want:
                raise ConfigError(f"projection {name!r} has {len(lst)} copies, expected {want}")
        if len(self.dt_bias) != len(self.W_dt):
            raise ConfigError("dt bias copies must match dt projection copies")
        for key, r in self.routers.items():
            if r.num_experts != N:
                raise ConfigError(f"router {key!r} has width {r.num_experts}, expected {N}")
        if mode == SHARED:
            if "gate" not in self.expertized:
                raise ConfigError("shared routing sources its decision from the gate projection; add 'gate' to expertized")
            if "shared" not in self.routers:
                raise ConfigError("shared mode needs a 'shared' router")
        elif mode == INDEPENDENT:
            if self.expertized & {"dt", "x"}:
                raise ConfigError("independent routing supports only conv/gate/out expertization")
            missing = [p for p in self.expertized if p not in self.routers]
            if missing:
                raise ConfigError(f"independent mode needs a router per expertized projection, missing {missing}")
        else:
            raise ConfigError(f"unknown routing mode {mode!r}; use 'shared' or 'independent'")

    def tensors(self):
        out = {}
        for name, lst in (("W_in", self.W_in), ("W_g", self.W_g)):
            _add_list(out, name, lst)
        out["W_conv"] = self.W_conv
        out["conv_bias"] = self.conv_bias
        _add_list(out, "W_x", self.W_x)
        _add_list(out, "W_dt", self.W_dt)
        _add_list(out, "dt_bias", self.dt_bias)
        out["A_log"] = self.inner.A_log
        if self.inner.D_skip is not None:
            out["D_skip"] = self.inner.D_skip
        _add_list(out, "W_out", self.W_out)
        for key in sorted(self.routers):
            out[f"router.{key}"] = self.routers[key].W_r
        return out


def _add_list(out, name, lst):
    if len(lst) == 1:
        out[name] = lst[0]
    else:
        for i, t in enumerate(lst):
            out[f"experts.{i}.{name}"] = t


def init_rom_weights(dims: MambaDims, num_experts, expertized=("conv", "gate", "out"), mode=SHARED, seed=0,
                     dtype=np.float32, use_skip=True) -> RoMWeights:
    """Independent uniform init per expert; routers get their own streams."""
    expertized = parse_expertized(expertized)
    rng = np.random.default_rng(seed)
    Dm, De, k = dims.d_model, dims.d_expand, dims.conv_kernel
    N = num_experts

    def copies(name, shape, fan_in):
        return [uniform_init(rng, shape, fan_in, dtype) for _ in range(N if name in expertized else 1)]

    W_in = copies("conv", (Dm, De), Dm)
    W_g = copies("gate", (Dm, De), Dm)
    W_conv = uniform_init(rng, (k, De), k, dtype)
    conv_bias = uniform_init(rng, (De,), k, dtype)
    inner = init_inner_weights(dims, rng, dtype, use_skip)
    W_x = [inner.W_x] + [uniform_init(rng, inner.W_x.shape, De, dtype) for _ in range(N - 1)] if "x" in expertized else [inner.W_x]
    if "dt" in expertized:
        W_dt = [inner.W_dt] + [uniform_init(rng, inner.W_dt.shape, dims.dt_rank, dtype) for _ in range(N - 1)]
        dt_bias = [inner.dt_bias] + [Tensor(inner.dt_bias.data.copy(), requires_grad=True) for _ in range(N - 1)]
    else:
        W_dt, dt_bias = [inner.W_dt], [inner.dt_bias]
    W_out = copies("out", (De, Dm), De)
    keys = ["shared"] if mode == SHARED else sorted(expertized)
    routers = {key: RouterWeights(uniform_init(rng, (Dm, N), Dm, dtype)) for key in keys}
    w = RoMWeights(W_in, W_g, W_out, W_conv, conv_bias, inner, W_x, W_dt, dt_bias, routers, expertized, N)
    w.validate(mode)
    return w


def rom_from_mamba(mw: MambaWeights, router: RouterWeights, expertized=("conv", "gate", "out")) -> RoMWeights:
    """Single-expert RoM weights that share tensors with a dense layer (N = 1 reduction)."""
    expertized = parse_expertized(expertized)
    if router.num_experts != 1:
        raise ConfigError("rom_from_mamba builds single-expert weights; router must have one column")
    inner = mw.inner
    return RoMWeights([mw.W_in], [mw.W_g], [mw.W_out], mw.W_conv, mw.conv_bias, inner, [inner.W_x],
                      [inner.W_dt], [inner.dt_bias], {"shared": router}, expertized, 1)


# ---------------------------------------------------------------------- dispatch / combine


@dataclass
class ExpertGroup:
    """Tokens routed to one expert: positions, which top-K slot chose it, and gathered inputs."""

    expert: int
    tokens: np.ndarray
    slots: np.ndarray
    inputs: Optional[Tensor] = None

    def __len__(self):
        return len(self.tokens)


def expert_groups(indices: np.ndarray, num_experts: int) -> List[ExpertGroup]:
    """Group ``(token, slot)`` pairs by expert, tokens in ascending position order."""
    if indices.size and (indices.min() < 0 or indices.max() >= num_experts):
        raise IndexError(f"expert index out of range [0, {num_experts})")
    groups = []
    for i in range(num_experts):
        tok, slot = np.nonzero(indices == i)
        groups.append(ExpertGroup(i, tok, slot))
    return groups


def dispatch_by_expert(x: Tensor, decision: RoutingDecision) -> List[ExpertGroup]:
    """Gather the rows of ``x[T, D]`` for each expert."""
    d = decision.flat()
    if x.shape[0] != d.n_tokens:
        raise ShapeError(f"dispatch: {x.shape[0]} rows for a decision over {d.n_tokens} tokens")
    groups = expert_groups(d.indices, d.num_experts)
    for g in groups:
        g.inputs = gather_rows(x, g.tokens)
    return groups


def combine(outputs, groups: List[ExpertGroup], decision: Optional[RoutingDecision], n_tokens, weighted=True) -> Tensor:
    """Scatter per-expert outputs back to token order, scaled by gates when ``weighted``."""
    parts, rows = [], []
    gates = decision.flat().gates if (weighted and decision is not None) else None
    for out, g in zip(outputs, groups):
        if len(g) == 0:
            continue
        if gates is not None:
            out = mul(out, getitem(gates, (g.tokens, g.slots)).reshape(-1, 1))
        parts.append(out)
        rows.append(g.tokens)
    if not parts:
        raise ShapeError("combine: no expert produced output")
    stacked = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return scatter_add_rows(stacked, np.concatenate(rows), n_tokens)


def _mixture(x, mats, decision, weighted, bias=None):
    """Sum over selected experts of ``x @ mats[i] (+ bias[i])``, optionally gate-weighted.

    A single matrix means the projection is shared and no routing is applied.
    """
    if len(mats) == 1:
        out = matmul(x, mats[0])
        return out + bias[0] if bias is not None else out
    groups = dispatch_by_expert(x, decision)
    outs = []
    for g in groups:
        if len(g) == 0:
            outs.append(None)
            continue
        y = row_stable_matmul(g.inputs, mats[g.expert])
        outs.append(y + bias[g.expert] if bias is not None else y)
    return combine(outs, groups, decision, x.shape[0], weighted)


def _mixture_dense(x, mats, decision, weighted, bias=None):
    """Literal masked sum over all experts: every expert sees every token."""
    if len(mats) == 1:
        out = matmul(x, mats[0])
        return out + bias[0] if bias is not None else out
    d = decision.flat()
    T, K = d.indices.shape
    onehot = (d.indices[:, :, None] == np.arange(d.num_experts)[None, None, :]).astype(x.dtype)
    if weighted:
        coeff = sum_(mul(d.gates.reshape(T, K, 1), onehot), axis=1)
    else:
        coeff = Tensor(onehot.sum(axis=1))
    total = None
    for i, W in enumerate(mats):
        y = matmul(x, W)
        if bias is not None:
            y = y + bias[i]
        term = mul(y, getitem(coeff, (slice(None), slice(i, i + 1))))
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------- RoM forward


@dataclass
class RoMTrace:
    """Decisions per projection and the exact index arrays each projection used."""

    decisions: Dict[str, RoutingDecision] = field(default_factory=dict)
    used_indices: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def decision(self) -> RoutingDecision:
        return self.decisions.get("gate") or next(iter(self.decisions.values()))

    def coherent(self) -> bool:
        arrays = list(self.used_indices.values())
        return all(np.array_equal(arrays[0], a) for a in arrays[1:])


def _decisions(x_flat, w, cfg, mode, training, seed, layer):
    if mode == SHARED:
        d = route(x_flat, w.routers["shared"], cfg, training, seed, layer)
        return {p: d for p in w.expertized}
    out = {}
    for j, p in enumerate(sorted(w.expertized)):
        out[p] = route(x_flat, w.routers[p], cfg, training, seed, 1000 * (layer + 1) + j)
    return out


def _rom(x, w: RoMWeights, cfg: RouterConfig, mode, training, seed, layer, decisions, mixture):
    w.validate(mode)
    cfg.validate()
    if cfg.num_experts != w.num_experts:
        raise ConfigError(f"router config has {cfg.num_experts} experts, weights have {w.num_experts}")
    if w.expertized & {"dt", "x"} and cfg.top_k != 1:
        raise ConfigError("dt/x expertization requires top_k == 1")
    Dm = w.W_g[0].shape[0]
    if x.shape[-1] != Dm:
        raise ShapeError(f"rom_forward: input {x.shape} vs d_model {Dm}")
    lead = x.shape[:-1]
    xf = reshape(x, (-1, Dm))
    if decisions is None:
        decisions = _decisions(xf, w, cfg, mode, training, seed, layer)
    trace = RoMTrace(decisions=dict(decisions))
    weighted = mode == INDEPENDENT

    def mix(name, inp, mats, bias=None, gated=weighted):
        dec = decisions.get(name)
        if dec is not None and len(mats) > 1:
            trace.used_indices[name] = dec.flat().indices.copy()
        return mixture(inp, mats, dec, gated, bias)

    G = silu(mix("gate", xf, w.W_g))
    H = mix("conv", xf, w.W_in)
    De = H.shape[-1]
    U = silu(depthwise_conv1d_causal(reshape(H, lead + (De,)), w.W_conv, w.conv_bias))
    Uf = reshape(U, (-1, De))
    dr, Ds = w.inner.dt_rank, w.inner.d_state
    delta_raw, B, C = split_xproj(mix("x", Uf, w.W_x), dr, Ds)
    delta = softplus(mix("dt", delta_raw, w.W_dt, bias=w.dt_bias))
    Y = selective_scan(U, reshape(delta, lead + (De,)), a_matrix(w.inner.A_log),
                       reshape(B, lead + (Ds,)), reshape(C, lead + (Ds,)), w.inner.D_skip)
    Z = mul(reshape(Y, (-1, De)), G)
    O = mix("out", Z, w.W_out, gated=True)
    return reshape(O, lead + (Dm,)), trace


def rom_forward(x: Tensor, w: RoMWeights, cfg: RouterConfig, mode=SHARED, training=False, seed=0, layer=0,
                decisions=None):
    """Sparse-dispatch RoM layer over ``x[..., L, Dm]``; returns ``(output, RoMTrace)``."""
    return _rom(x, w, cfg, mode, training, seed, layer, decisions, _mixture)


def rom_forward_dense_reference(x: Tensor, w: RoMWeights, cfg: RouterConfig, mode=SHARED, training=False, seed=0,
                                layer=0, decisions=None):
    """Same layer with every expert applied to every token and masked: the brute-force oracle."""
    return _rom(x, w, cfg, mode, training, seed, layer, decisions, _mixture_dense)


# ---------------------------------------------------------------------- FFN-MoE


@dataclass
class FfnMoeWeights:
    """SwiGLU experts; ``router`` is ``REUSE_ROUTER`` to take decisions from a preceding RoM layer."""

    W_up: List[Tensor]  # N x [Dm, Df]
    W_gate: List[Tensor]
    W_down: List[Tensor]  # N x [Df, Dm]
    router: object

    @property
    def num_experts(self):
        return len(self.W_up)

    @property
    def reuses_router(self):
        return isinstance(self.router, str) and self.router == REUSE_ROUTER

    def tensors(self):
        out = {}
        for name, lst in (("W_up", self.W_up), ("W_gate", self.W_gate), ("W_down", self.W_down)):
            _add_list(out, name, lst)
        if not self.reuses_router:
            out["router"] = self.router.W_r
        return out


def init_ffn_moe_weights(d_model, d_ff, num_experts, reuse_router=False, seed=0, dtype=np.float32) -> FfnMoeWeights:
    rng = np.random.default_rng(seed)
    up, gate, down = [], [], []
    for _ in range(num_experts):
        up.append(uniform_init(rng, (d_model, d_ff), d_model, dtype))
        gate.append(uniform_init(rng, (d_model, d_ff), d_model, dtype))
        down.append(uniform_init(rng, (d_ff, d_model), d_ff, dtype))
    router = REUSE_ROUTER if reuse_router else RouterWeights(uniform_init(rng, (d_model, num_experts), d_model, dtype))
    return FfnMoeWeights(up, gate, down, router)


def swiglu(x, W_up, W_gate, W_down, mm=matmul):
    return mm(mul(silu(mm(x, W_gate)), mm(x, W_up)), W_down)


def _ffn_decision(xf, w, cfg, shared_decision, training, seed, layer):
    if shared_decision is not None:
        d = shared_decision.flat()
        if d.n_tokens != xf.shape[0] or d.num_experts != w.num_experts:
            raise ConfigError("shared decision does not match this FFN-MoE layer's tokens or expert count")
        return d
    if w.reuses_router:
        raise ConfigError("this FFN-MoE layer reuses a RoM router but no shared decision was supplied")
    return route(xf, w.router, cfg, training, seed, layer).flat()


def ffn_moe_forward(x: Tensor, w: FfnMoeWeights, cfg: RouterConfig, shared_decision=None, training=False, seed=0,
                    layer=0):
    """``sum_{i in S} gate_i * SwiGLU_i(x_t)``; returns ``(output, decision)``."""
    Dm = w.W_up[0].shape[0]
    lead = x.shape[:-1]
    xf = reshape(x, (-1, Dm))
    d = _ffn_decision(xf, w, cfg, shared_decision, training, seed, layer)
    groups = dispatch_by_expert(xf, d)
    outs = []
    for g in groups:
        i = g.expert
        outs.append(swiglu(g.inputs, w.W_up[i], w.W_gate[i], w.W_down[i], row_stable_matmul) if len(g) else None)
    return reshape(combine(outs, groups, d, xf.shape[0], weighted=True), lead + (Dm,)), d


def ffn_moe_forward_dense_reference(x: Tensor, w: FfnMoeWeights, cfg: RouterConfig, shared_decision=None,
                                    training=False, seed=0, layer=0):
    Dm = w.W_up[0].shape[0]
    lead = x.shape[:-1]
    xf = reshape(x, (-1, Dm))
    d = _ffn_decision(xf, w, cfg, shared_decision, training, seed, layer)
    T, K = d.indices.shape
    onehot = (d.indices[:, :, None] == np.arange(w.num_experts)[None, None, :]).astype(xf.dtype)
    coeff = sum_(mul(d.gates.reshape(T, K, 1), onehot), axis=1)
    total = None
    for i in range(w.num_experts):
        term = mul(swiglu(xf, w.W_up[i], w.W_gate[i], w.W_down[i]), getitem(coeff, (slice(None), slice(i, i + 1))))
        total = term if total is None else add(total, term)
    return reshape(total, lead + (Dm,)), d
