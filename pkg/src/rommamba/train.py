"""Deterministic desk-scale training: AdamW, warmup + cosine, clipping, checkpoints, perplexity."""
import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

from .data import Corpus
from .errors import ConfigError, NumericalError
from .model import LanguageModel, ModelConfig, build_model, lm_forward, load_checkpoint, save_checkpoint
from .routing import RouterConfig, balance_loss, routing_stats
from .tensor import add, cross_entropy, no_grad

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    peak_lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_ratio: float = 0.01
    total_tokens: int = 2000 * 1024
    batch_tokens: int = 1024
    seq_len: int = 128
    seed: int = 0
    dtype: str = "float32"
    # None falls back to the model's router setting
    balance_alpha: Optional[float] = None
    log_interval: int = 50
    eval_interval: int = 0
    eval_windows: int = 64
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.seq_len < 1 or self.batch_tokens < self.seq_len or self.batch_tokens % self.seq_len:
            raise ConfigError(f"batch_tokens={self.batch_tokens} must be a positive multiple of seq_len={self.seq_len}")
        if self.total_tokens < self.batch_tokens:
            raise ConfigError("total_tokens must cover at least one batch")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.peak_lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("peak_lr and grad_clip must be positive")

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.batch_tokens

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_ratio * self.total_steps)))

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(step, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then cosine decay to exactly 0."""
    total, warm, peak = cfg.total_steps, cfg.warmup_steps, cfg.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    progress = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, shape) -> bool:
    """Weight decay applies to matrices only; norms, biases, A_log and routers are exempt."""
    return len(shape) >= 2 and "A_log" not in name and "router" not in name


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr, betas=(0.9, 0.95),
               eps=1e-8, weight_decay=0.0, decay_mask: Optional[Dict[str, bool]] = None):
    """In-place AdamW: ``theta -= lr*wd*theta + lr*m_hat/(sqrt(v_hat)+eps)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in {name!r} ({bad} entries)")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        if wd:
            p -= (lr * wd) * p + lr * update
        else:
            p -= lr * update


def clip_grads(grads: Dict[str, np.ndarray], max_norm):
    """Scale all gradients so the global L2 norm is at most ``max_norm``; returns (pre, post) norms."""
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                          for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        post = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        return total, post
    return total, total


# ---------------------------------------------------------------------- loss / eval


def step_seed(seed, step):
    """Jitter stream for one step; distinct steps and seeds never share noise."""
    return int(seed) * 1_000_003 + int(step)


def lm_loss(model: LanguageModel, inputs, targets, training=False, seed=0, balance_alpha=None):
    """``(total, cross_entropy, aux)`` where total adds the weighted balance term when enabled."""
    logits, aux = lm_forward(model, inputs, training=training, seed=seed)
    V = model.cfg.vocab_size
    ce = cross_entropy(logits.reshape(-1, V), np.asarray(targets).reshape(-1))
    alpha = model.cfg.balance_alpha if balance_alpha is None else balance_alpha
    routed = aux.decisions()
    total = ce
    if alpha > 0 and routed:
        rcfg = RouterConfig(model.cfg.num_experts, 1, balance_alpha=alpha)
        bal = balance_loss([d.probs for _, _, d in routed], [d.indices for _, _, d in routed], rcfg)
        total = add(ce, bal)
    return total, ce, aux


def per_layer_utilization(aux) -> Dict[str, List[float]]:
    return {f"{i}.{name}": routing_stats(d)["utilization"] for i, name, d in aux.decisions()}


def evaluate_ppl(model: LanguageModel, corpus: Corpus, context_lengths, max_windows=None, batch_size=8,
                 split="val") -> List[dict]:
    """Perplexity per context length over non-overlapping windows (no jitter)."""
    rows = []
    with no_grad():
        for length in context_lengths:
            x, y = corpus.windows(int(length), split, max_windows)
            nll_sum, n_tok = 0.0, 0
            for s in range(0, len(x), batch_size):
                xb, yb = x[s:s + batch_size], y[s:s + batch_size]
                _, ce, _ = lm_loss(model, xb, yb, training=False, balance_alpha=0.0)
                nll_sum += float(ce.data) * yb.size
                n_tok += yb.size
            nll = nll_sum / n_tok
            rows.append({"context_length": int(length), "windows": len(x), "tokens": n_tok, "nll": nll,
                         "ppl": math.exp(nll)})
    return rows


def write_ppl_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["context_length", "windows", "tokens", "nll", "ppl"])
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: LanguageModel
    state: AdamState
    history: List[dict]
    final_val: Optional[dict] = None


class MetricsSink:
    """Newline-delimited JSON records to a file and/or a callback."""

    def __init__(self, path=None, callback=None):
        self.path, self.callback = path, callback
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._f = open(path, "a") if path else None

    def emit(self, rec):
        if self._f:
            self._f.write(json.dumps(rec, sort_keys=True) + "\n")
            self._f.flush()
        if self.callback:
            self.callback(rec)

    def close(self):
        if self._f:
            self._f.close()


def checkpoint_tensors(model: LanguageModel, state: AdamState):
    out = dict(model.state_dict())
    for k in model.parameters():
        if k in state.m:
            out[f"opt.m.{k}"] = state.m[k]
            out[f"opt.v.{k}"] = state.v[k]
    return out


def save_training_checkpoint(path, model, state, tcfg, tokens):
    meta = {"kind": "train", "step": state.step, "tokens": tokens, "model_config": model.cfg.to_dict(),
            "train_config": tcfg.to_dict() if tcfg else None}
    save_checkpoint(path, checkpoint_tensors(model, state), meta)


def load_model(path, dtype=None):
    """Rebuild a model (and optimizer state when present) from a checkpoint directory."""
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    first = tensors["embed"].dtype
    model = build_model(cfg, seed=0, dtype=dtype or first)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state_dict(params)
    state = AdamState(step=int(meta.get("step", 0)))
    for k in model.parameters():
        if f"opt.m.{k}" in tensors:
            state.m[k] = tensors[f"opt.m.{k}"].astype(model.dtype)
            state.v[k] = tensors[f"opt.v.{k}"].astype(model.dtype)
    return model, state, meta


def train(model: LanguageModel, corpus: Corpus, cfg: TrainConfig, out_dir=None, state: Optional[AdamState] = None,
          max_steps=None, metrics: Optional[MetricsSink] = None, verbose=False) -> TrainResult:
    """Run (or continue from ``state``) until ``cfg.total_steps``.

    Batches and router jitter are pure functions of ``(cfg.seed, step)``, so resuming
    from a checkpoint reproduces the uninterrupted run bitwise.
    """
    cfg.validate()
    state = state or AdamState()
    params = model.parameters()
    decay_mask = {k: decays(k, t.shape) for k, t in params.items()}
    history = []
    own_sink = metrics is None
    if own_sink:
        metrics = MetricsSink(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    end = cfg.total_steps if max_steps is None else min(cfg.total_steps, state.step + max_steps)
    t0 = time.time()
    try:
        while state.step < end:
            step = state.step + 1
            x, y = corpus.batch(cfg.seed, step, cfg.batch_size, cfg.seq_len)
            for t in params.values():
                t.grad = None
            loss, ce, aux = lm_loss(model, x, y, training=True, seed=step_seed(cfg.seed, step),
                                    balance_alpha=cfg.balance_alpha)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise NumericalError(f"loss became {lval} at step {step}; last checkpoint left untouched")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            raw_norm, norm = clip_grads(grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            adamw_step({k: t.data for k, t in params.items()}, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.eps,
                       cfg.weight_decay, decay_mask)
            tokens = step * cfg.batch_tokens
            if step % cfg.log_interval == 0 or step == end:
                rec = {"step": step, "tokens": tokens, "split": "train", "loss": lval, "ce": float(ce.data),
                       "ppl": math.exp(min(float(ce.data), 700.0)), "lr": lr, "grad_norm": norm,
                       "grad_norm_raw": raw_norm, "per_layer_utilization": per_layer_utilization(aux),
                       "elapsed": round(time.time() - t0, 3)}
                history.append(rec)
                metrics.emit(rec)
                if verbose:
                    print(f"step {step:6d}  loss {lval:.4f}  lr {lr:.2e}  |g| {raw_norm:.3f}", flush=True)
            if cfg.eval_interval and step % cfg.eval_interval == 0 and step != cfg.total_steps:
                history.append(_eval_record(model, corpus, cfg, step, metrics))
            if out_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_training_checkpoint(os.path.join(out_dir, "checkpoint"), model, state, cfg, tokens)
        final = None
        if state.step == cfg.total_steps:
            final = _eval_record(model, corpus, cfg, state.step, metrics)
            history.append(final)
        if out_dir:
            save_training_checkpoint(os.path.join(out_dir, "checkpoint"), model, state, cfg,
                                     state.step * cfg.batch_tokens)
    finally:
        if own_sink:
            metrics.close()
    return TrainResult(model, state, history, final)


def _eval_record(model, corpus, cfg, step, metrics):
    row = evaluate_ppl(model, corpus, [cfg.seq_len], max_windows=cfg.eval_windows)[0]
    rec = {"step": step, "tokens": step * cfg.batch_tokens, "split": "val", "loss": row["nll"], "ppl": row["ppl"],
           "lr": lr_at(step, cfg), "grad_norm": None, "per_layer_utilization": None}
    metrics.emit(rec)
    return rec


def train_from_scratch(model_cfg: ModelConfig, corpus: Corpus, cfg: TrainConfig, **kw) -> TrainResult:
    model = build_model(model_cfg, seed=cfg.seed, dtype=cfg.np_dtype)
    return train(model, corpus, cfg, **kw)
