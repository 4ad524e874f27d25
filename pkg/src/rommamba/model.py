"""Language models assembled from layer-pattern strings.

Pattern letters: ``M`` Mamba, ``R`` Routing Mamba, ``A`` sliding-window attention,
``F`` SwiGLU MLP, ``E`` SwiGLU FFN-MoE. Every layer is wrapped as
``x <- x + layer(rmsnorm(x))``.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .mamba import init_mamba_weights, mamba_forward, uniform_init
from .rom import (
    INDEPENDENT,
    SHARED,
    ffn_moe_forward,
    init_ffn_moe_weights,
    init_rom_weights,
    parse_expertized,
    rom_forward,
    swiglu,
)
from .routing import RouterConfig, balance_loss
from .ssm import MambaDims
from .tensor import (
    Tensor,
    add,
    concat,
    custom_op,
    embedding,
    getitem,
    matmul,
    mul,
    neg,
    reshape,
    rmsnorm,
    softmax,
    transpose,
)

LAYER_KINDS = "MRAFE"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    pattern: str = "R"
    expand: int = 2
    d_state: int = 16
    dt_rank: int = 0  # 0 -> ceil(d_model / 16)
    conv_kernel: int = 4
    use_skip: bool = True
    num_experts: int = 8
    top_k: int = 1
    renormalize: bool = True
    jitter_eps: float = 0.01
    balance_alpha: float = 0.0
    expertized: str = "conv,gate,out"
    routing_mode: str = SHARED
    swa_window: int = 2048
    n_heads: int = 0  # 0 -> max(1, d_model // 64)
    ffn_mult: str = "8/3"
    ffn_num_experts: int = 0  # 0 -> num_experts
    ffn_reuse_router: bool = True
    tie_embeddings: bool = True
    norm_eps: float = 1e-5
    dense_tail_layers: int = 0

    def __post_init__(self):
        self.pattern = self.pattern.upper()
        self.ffn_mult = str(self.ffn_mult)
        self.validate()

    def validate(self):
        if not self.pattern or any(c not in LAYER_KINDS for c in self.pattern):
            raise ConfigError(f"pattern {self.pattern!r} must be a non-empty string over {LAYER_KINDS}")
        if self.n_layers < 1 or self.n_layers % len(self.pattern):
            raise ConfigError(f"pattern length {len(self.pattern)} must divide n_layers={self.n_layers}")
        if self.swa_window < 1:
            raise ConfigError("swa_window must be >= 1")
        if self.dense_tail_layers < 0:
            raise ConfigError("dense_tail_layers must be >= 0")
        if self.routing_mode not in (SHARED, INDEPENDENT):
            raise ConfigError(f"routing_mode must be 'shared' or 'independent', got {self.routing_mode!r}")
        if self.vocab_size < 1 or self.d_model < 1:
            raise ConfigError("vocab_size and d_model must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by {self.heads} heads")
        if (self.d_model // self.heads) % 2:
            raise ConfigError("attention head dimension must be even for rotary encoding")
        parse_expertized(self.expertized)
        Fraction(self.ffn_mult)
        RouterConfig(self.num_experts, self.top_k, self.renormalize, self.jitter_eps, self.balance_alpha)

    # derived quantities
    @property
    def dims(self) -> MambaDims:
        return MambaDims(self.d_model, self.expand * self.d_model, self.d_state, self.dt_rank or None, self.conv_kernel)

    @property
    def heads(self) -> int:
        return self.n_heads or max(1, self.d_model // 64)

    @property
    def d_ff(self) -> int:
        return int(round(Fraction(self.ffn_mult) * self.d_model))

    @property
    def ffn_experts(self) -> int:
        if self.ffn_reuse_router:
            return self.num_experts
        return self.ffn_num_experts or self.num_experts

    def router(self, num_experts=None) -> RouterConfig:
        n = num_experts or self.num_experts
        return RouterConfig(n, min(self.top_k, n), self.renormalize, self.jitter_eps, self.balance_alpha)

    def layer_kinds(self) -> List[str]:
        """Per-layer letters after forcing the last ``dense_tail_layers`` dense."""
        P = len(self.pattern)
        kinds = [self.pattern[i % P] for i in range(self.n_layers)]
        for i in range(max(0, self.n_layers - self.dense_tail_layers), self.n_layers):
            kinds[i] = {"R": "M", "E": "F"}.get(kinds[i], kinds[i])
        return kinds

    def reuse_bindings(self) -> Dict[int, int]:
        """E layer index -> the R layer whose decision it reuses (same pattern repeat)."""
        if not self.ffn_reuse_router:
            return {}
        kinds = self.layer_kinds()
        P = len(self.pattern)
        out = {}
        for i, k in enumerate(kinds):
            if k != "E":
                continue
            start = i - i % P
            src = next((j for j in range(i - 1, start - 1, -1) if kinds[j] == "R"), None)
            if src is None:
                raise ConfigError(f"layer {i} (E) reuses a RoM router but no R layer precedes it in its pattern repeat")
            out[i] = src
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------- sub-layers


@dataclass
class AttentionWeights:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor

    def tensors(self):
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}


@dataclass
class MlpWeights:
    W_up: Tensor
    W_gate: Tensor
    W_down: Tensor

    def tensors(self):
        return {"W_up": self.W_up, "W_gate": self.W_gate, "W_down": self.W_down}


def init_attention_weights(d_model, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return AttentionWeights(*(uniform_init(rng, (d_model, d_model), d_model, dtype) for _ in range(4)))


def init_mlp_weights(d_model, d_ff, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return MlpWeights(
        uniform_init(rng, (d_model, d_ff), d_model, dtype),
        uniform_init(rng, (d_model, d_ff), d_model, dtype),
        uniform_init(rng, (d_ff, d_model), d_ff, dtype),
    )


def rotary_tables(L, head_dim, dtype, base=10000.0):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(L, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1).astype(dtype)
    return cos, sin


def apply_rotary(x: Tensor, cos, sin) -> Tensor:
    """Rotate feature pairs ``(i, i + hd/2)`` of ``x[..., L, hd]`` by position-dependent angles."""
    half = x.shape[-1] // 2
    x1 = getitem(x, (Ellipsis, slice(0, half)))
    x2 = getitem(x, (Ellipsis, slice(half, None)))
    rotated = concat([neg(x2), x1], axis=-1)
    return add(mul(x, cos), mul(rotated, sin))


def masked_fill(x: Tensor, mask: np.ndarray, value) -> Tensor:
    """``x`` with entries where ``mask`` is true replaced by ``value`` (no gradient there)."""
    keep = ~mask
    return custom_op(np.where(mask, np.asarray(value, dtype=x.dtype), x.data), (x,), lambda g: (g * keep,), "masked_fill")


def window_mask(L, window):
    """True where attention is disallowed: future positions or further back than ``window - 1``."""
    t = np.arange(L)
    diff = t[:, None] - t[None, :]
    return (diff < 0) | (diff >= window)


def swa_forward(x: Tensor, w: AttentionWeights, window: int, n_heads: int = 1) -> Tensor:
    """Multi-head causal attention over ``x[..., L, D]`` where position t sees ``t-window+1 .. t``."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    D = x.shape[-1]
    if D % n_heads:
        raise ShapeError(f"d_model {D} not divisible by {n_heads} heads")
    hd = D // n_heads
    L = x.shape[-2]
    lead = x.shape[:-2]

    def heads(t):
        t = reshape(t, lead + (L, n_heads, hd))
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(t, axes)

    cos, sin = rotary_tables(L, hd, x.dtype)
    q = apply_rotary(heads(matmul(x, w.W_q)), cos, sin)
    k = apply_rotary(heads(matmul(x, w.W_k)), cos, sin)
    v = heads(matmul(x, w.W_v))
    nd = k.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(hd))
    probs = softmax(masked_fill(scores, window_mask(L, window), -np.inf), axis=-1)
    ctx = matmul(probs, v)
    nd = ctx.ndim
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return matmul(reshape(ctx, lead + (L, D)), w.W_o)


# ---------------------------------------------------------------------- model


@dataclass
class Layer:
    index: int
    kind: str
    norm: Tensor
    weights: object

    def tensors(self):
        out = {"norm": self.norm}
        out.update(self.weights.tensors())
        return out


@dataclass
class LanguageModel:
    cfg: ModelConfig
    embed: Tensor
    layers: List[Layer]
    final_norm: Tensor
    head: Optional[Tensor] = None
    bindings: Dict[int, int] = field(default_factory=dict)

    def parameters(self) -> Dict[str, Tensor]:
        out = {"embed": self.embed}
        for layer in self.layers:
            for name, t in layer.tensors().items():
                out[f"layers.{layer.index}.{layer.kind}.{name}"] = t
        out["final_norm"] = self.final_norm
        if self.head is not None:
            out["head"] = self.head
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    @property
    def dtype(self):
        return self.embed.dtype

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {t.shape}")
            t.data = np.ascontiguousarray(state[k], dtype=t.dtype)


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32) -> LanguageModel:
    """Instantiate ``cfg`` deterministically; layer ``i`` draws from the stream ``(seed, i)``."""
    cfg.validate()
    kinds = cfg.layer_kinds()
    bindings = cfg.reuse_bindings()
    dims = cfg.dims
    rng = np.random.default_rng([seed, 1_000_003])
    embed = Tensor((rng.standard_normal((cfg.vocab_size, cfg.d_model)) * 0.02).astype(dtype), requires_grad=True)
    head = None
    if not cfg.tie_embeddings:
        head = Tensor((rng.standard_normal((cfg.d_model, cfg.vocab_size)) * 0.02).astype(dtype), requires_grad=True)
    layers = []
    for i, kind in enumerate(kinds):
        lseed = [seed, i]
        if kind == "M":
            w = init_mamba_weights(dims, lseed, dtype, cfg.use_skip)
        elif kind == "R":
            w = init_rom_weights(dims, cfg.num_experts, cfg.expertized, cfg.routing_mode, lseed, dtype, cfg.use_skip)
        elif kind == "A":
            w = init_attention_weights(cfg.d_model, lseed, dtype)
        elif kind == "F":
            w = init_mlp_weights(cfg.d_model, cfg.d_ff, lseed, dtype)
        else:
            w = init_ffn_moe_weights(cfg.d_model, cfg.d_ff, cfg.ffn_experts, i in bindings, lseed, dtype)
        norm = Tensor(np.ones(cfg.d_model, dtype=dtype), requires_grad=True)
        layers.append(Layer(i, kind, norm, w))
    final_norm = Tensor(np.ones(cfg.d_model, dtype=dtype), requires_grad=True)
    return LanguageModel(cfg, embed, layers, final_norm, head, bindings)


@dataclass
class LMAux:
    balance_loss: Optional[Tensor] = None
    traces: Dict[int, object] = field(default_factory=dict)

    def decisions(self):
        """``(layer index, name, RoutingDecision)`` for every routed computation."""
        out = []
        for i, tr in sorted(self.traces.items()):
            if hasattr(tr, "decisions"):
                distinct = {id(d): (name, d) for name, d in sorted(tr.decisions.items(), reverse=True)}
                if len(distinct) == 1:
                    out.append((i, "shared", next(iter(distinct.values()))[1]))
                else:
                    out.extend((i, name, d) for name, d in sorted(distinct.values(), key=lambda nd: nd[0]))
            else:
                out.append((i, "ffn", tr))
        return out


def lm_forward(model: LanguageModel, tokens, training=False, seed=0):
    """Next-token logits ``[..., L, vocab]`` for integer ``tokens[..., L]``, plus routing aux."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ConfigError(f"token id out of range [0, {cfg.vocab_size})")
    x = embedding(model.embed, tokens)
    aux = LMAux()
    rom_decisions = {}
    for layer in model.layers:
        h = rmsnorm(x, layer.norm, cfg.norm_eps)
        kind = layer.kind
        if kind == "M":
            out = mamba_forward(h, layer.weights)
        elif kind == "R":
            out, trace = rom_forward(h, layer.weights, cfg.router(), cfg.routing_mode, training, seed, layer.index)
            aux.traces[layer.index] = trace
            rom_decisions[layer.index] = trace.decision
        elif kind == "A":
            out = swa_forward(h, layer.weights, cfg.swa_window, cfg.heads)
        elif kind == "F":
            w = layer.weights
            out = swiglu(h, w.W_up, w.W_gate, w.W_down)
        else:
            shared = rom_decisions.get(model.bindings[layer.index]) if layer.index in model.bindings else None
            out, d = ffn_moe_forward(h, layer.weights, cfg.router(cfg.ffn_experts), shared, training, seed, layer.index)
            if shared is None:
                aux.traces[layer.index] = d
        x = add(x, out)
    x = rmsnorm(x, model.final_norm, cfg.norm_eps)
    head = model.head if model.head is not None else transpose(model.embed, None)
    logits = matmul(x, head)
    if cfg.balance_alpha > 0:
        routed = aux.decisions()
        if routed:
            aux.balance_loss = balance_loss([d.probs for _, _, d in routed], [d.indices for _, _, d in routed],
                                            cfg.router())
    return logits, aux


# ---------------------------------------------------------------------- checkpoints


MANIFEST, BLOB = "manifest.json", "tensors.bin"


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict):
    """Write ``manifest.json`` (names, shapes, dtypes, offsets) and a little-endian ``tensors.bin``."""
    os.makedirs(path, exist_ok=True)
    entries, offset = [], 0
    tmp_blob = os.path.join(path, BLOB + ".tmp")
    with open(tmp_blob, "wb") as f:
        for name, arr in tensors.items():
            arr = np.require(arr, requirements="C")
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset,
                            "nbytes": len(raw)})
            f.write(raw)
            offset += len(raw)
    manifest = {"version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta}
    tmp_manifest = os.path.join(path, MANIFEST + ".tmp")
    with open(tmp_manifest, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp_blob, os.path.join(path, BLOB))
    os.replace(tmp_manifest, os.path.join(path, MANIFEST))


def load_checkpoint(path):
    with open(os.path.join(path, MANIFEST)) as f:
        manifest = json.load(f)
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    with open(os.path.join(path, BLOB), "rb") as f:
        blob = f.read()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]), copy=True)
    return out, manifest["meta"]
