"""Selective state-space core: input-dependent parameters, ZOH discretization, scans.

Sequence tensors are ``[L, ...]`` or batched ``[B, L, ...]``; every function here
accepts both and returns the same rank it was given.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, custom_op, exp, matmul, neg, softplus, split, unbroadcast


@dataclass(frozen=True)
class MambaDims:
    """Hyperparameters of one Mamba / RoM layer.

    ``d_expand`` defaults to ``2 * d_model``, ``dt_rank`` to ``ceil(d_model / 16)``.
    """

    d_model: int
    d_expand: Optional[int] = None
    d_state: int = 16
    dt_rank: Optional[int] = None
    conv_kernel: int = 4

    def __post_init__(self):
        if self.d_expand is None:
            object.__setattr__(self, "d_expand", 2 * self.d_model)
        if self.dt_rank is None:
            object.__setattr__(self, "dt_rank", max(1, math.ceil(self.d_model / 16)))
        for name in ("d_model", "d_expand", "d_state", "dt_rank", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"MambaDims.{name} must be positive, got {getattr(self, name)}")


@dataclass
class SsmInnerWeights:
    W_x: Tensor  # [De, dt_rank + 2 * Ds] -> (delta_raw, B, C)
    W_dt: Tensor  # [dt_rank, De]
    dt_bias: Tensor  # [De]
    A_log: Tensor  # [De, Ds]; A = -exp(A_log)
    D_skip: Optional[Tensor] = None  # [De]

    @property
    def dt_rank(self):
        return self.W_dt.shape[0]

    @property
    def d_state(self):
        return self.A_log.shape[1]

    def tensors(self):
        out = {"W_x": self.W_x, "W_dt": self.W_dt, "dt_bias": self.dt_bias, "A_log": self.A_log}
        if self.D_skip is not None:
            out["D_skip"] = self.D_skip
        return out


def a_matrix(A_log: Tensor) -> Tensor:
    return neg(exp(A_log))


def ssm_inputs(u: Tensor, w: SsmInnerWeights):
    """Project ``u[..., L, De]`` to ``(delta, B, C)``.

    ``(delta_raw, B, C) = split(u @ W_x)`` and ``delta = softplus(delta_raw @ W_dt + dt_bias)``,
    so ``delta`` is strictly positive.
    """
    delta_raw, B, C = split_xproj(matmul(u, w.W_x), w.dt_rank, w.d_state)
    return softplus(matmul(delta_raw, w.W_dt) + w.dt_bias), B, C


def split_xproj(xproj: Tensor, dt_rank: int, d_state: int):
    return split(xproj, [dt_rank, d_state, d_state], axis=-1)


# ---------------------------------------------------------------------- discretization


def discretize_zoh(A: Tensor, B: Tensor, delta: Tensor):
    """Zero-order hold: ``A_bar = exp(delta*A)``, ``B_bar = (exp(delta*A) - 1) / A * B``.

    ``A: [De, Ds]``, ``B: [..., L, Ds]``, ``delta: [..., L, De]``; both outputs are
    ``[..., L, De, Ds]``. Near ``delta*A == 0`` the quotient falls back to
    ``delta * (1 + x/2 + x**2/6)`` with ``x = delta*A``.
    """
    if A.ndim != 2 or delta.shape[-1] != A.shape[0] or B.shape[-1] != A.shape[1]:
        raise ShapeError(f"discretize_zoh: A {A.shape}, B {B.shape}, delta {delta.shape}")
    Ad, Bd, dd = A.data, B.data, delta.data
    a, phi = kernels.zoh_coefficients(dd, Ad)
    a = a.astype(dd.dtype, copy=False)
    phi = phi.astype(dd.dtype, copy=False)
    Bx = Bd[..., None, :]

    def abar_backward(g):
        ga = g * a
        return unbroadcast(ga * dd[..., None], Ad.shape), np.sum(ga * Ad, axis=-1)

    def bbar_backward(g):
        dphi_dd, dphi_dA = kernels._phi_partials(dd, Ad, a, phi)
        gphi = g * Bx
        gA = unbroadcast(gphi * dphi_dA, Ad.shape)
        gB = np.sum(g * phi, axis=-2)
        gdelta = np.sum(gphi * dphi_dd, axis=-1)
        return gA, gB, gdelta

    abar = custom_op(a, (A, delta), abar_backward, "zoh_abar")
    bbar = custom_op(phi * Bx, (A, B, delta), bbar_backward, "zoh_bbar")
    return abar, bbar


# ---------------------------------------------------------------------- scans


def _skip_data(D_skip, De, dtype):
    return np.zeros(De, dtype=dtype) if D_skip is None else np.ascontiguousarray(D_skip.data, dtype=dtype)


def _scan_op(u, Abar, Bbar, C, D_skip, fwd):
    unbatched = u.ndim == 2
    ud = u.data[None] if unbatched else u.data
    ad = Abar.data[None] if unbatched else Abar.data
    bd = Bbar.data[None] if unbatched else Bbar.data
    cd = C.data[None] if unbatched else C.data
    if ad.shape != bd.shape or ad.shape[:3] != ud.shape or cd.shape != ud.shape[:2] + ad.shape[3:]:
        raise ShapeError(f"scan shapes: u {u.shape}, A_bar {Abar.shape}, B_bar {Bbar.shape}, C {C.shape}")
    dtype = ud.dtype
    Dd = _skip_data(D_skip, ud.shape[-1], dtype)
    ud, ad, bd, cd = (np.ascontiguousarray(x, dtype=dtype) for x in (ud, ad, bd, cd))
    y, hs = fwd(ud, ad, bd, cd, Dd)

    def backward(g):
        g = np.ascontiguousarray(g[None] if unbatched else g, dtype=dtype)
        gu, ga, gbb, gC, gD = kernels.scan_bwd(g, ud, ad, bd, cd, Dd, hs)
        grads = [gu, ga, gbb, gC]
        if unbatched:
            grads = [x[0] for x in grads]
        return tuple(grads) + ((gD,) if D_skip is not None else ())

    parents = (u, Abar, Bbar, C) + ((D_skip,) if D_skip is not None else ())
    return custom_op(y[0] if unbatched else y, parents, backward, "selective_scan")


def selective_scan_sequential(u, Abar, Bbar, C, D_skip=None):
    """``h_t = A_bar_t * h_{t-1} + B_bar_t * u_t``, ``y_t = C_t . h_t (+ D * u_t)``, ``h_0 = 0``.

    ``u: [..., L, De]``, ``Abar, Bbar: [..., L, De, Ds]``, ``C: [..., L, Ds]``.
    """
    return _scan_op(u, Abar, Bbar, C, D_skip, kernels.scan_fwd)


def chunked_scan_numpy(u, a, bb, C, D, chunk):
    """Forward scan in chunks with a carried state; returns ``(y, states)``.

    Within a chunk of length ``c`` the state at step ``t`` is
    ``P_t * h_in + sum_{j<=t} (prod_{j<i<=t} a_i) * bb_j * u_j`` where ``P_t`` is the
    running product of ``a`` from the chunk start. Arrays are batched.
    """
    Bsz, L, De = u.shape
    Ds = a.shape[-1]
    hs = np.empty((Bsz, L, De, Ds), dtype=u.dtype)
    h_in = np.zeros((Bsz, De, Ds), dtype=u.dtype)
    x = bb * u[..., None]
    for c0 in range(0, L, chunk):
        c1 = min(c0 + chunk, L)
        c = c1 - c0
        ac = a[:, c0:c1]
        # decay[:, t, j] = prod_{j < i <= t} a_i (1 on the diagonal, 0 above it)
        steps = np.where(
            (np.arange(c)[:, None] > np.arange(c)[None, :])[None, :, :, None, None],
            ac[:, :, None],
            np.ones((), dtype=u.dtype),
        )
        decay = np.cumprod(steps, axis=1)
        decay = decay * np.tril(np.ones((c, c), dtype=u.dtype))[None, :, :, None, None]
        prefix = np.cumprod(ac, axis=1)
        inner = np.einsum("btjds,bjds->btds", decay, x[:, c0:c1])
        hc = prefix * h_in[:, None] + inner
        hs[:, c0:c1] = hc
        h_in = hc[:, -1]
    y = np.einsum("blds,bls->bld", hs, C) + D * u
    return y, hs


def selective_scan_chunked(u, Abar, Bbar, C, D_skip=None, chunk=16):
    """Same result as :func:`selective_scan_sequential`, computed chunk by chunk."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    return _scan_op(u, Abar, Bbar, C, D_skip, lambda *args: chunked_scan_numpy(*args, chunk=chunk))


def selective_scan(u, delta, A, B, C, D_skip=None):
    """Discretize and scan in one op; never materializes ``B_bar``.

    Mathematically ``selective_scan_sequential(u, *discretize_zoh(A, B, delta), C, D_skip)``.
    """
    unbatched = u.ndim == 2
    lift = (lambda x: x[None]) if unbatched else (lambda x: x)
    dtype = u.dtype
    ud, dd, Bd, Cd = (np.ascontiguousarray(lift(t.data), dtype=dtype) for t in (u, delta, B, C))
    Ad = np.ascontiguousarray(A.data, dtype=dtype)
    if dd.shape != ud.shape or Ad.shape[0] != ud.shape[-1] or Bd.shape != Cd.shape or Bd.shape[-1] != Ad.shape[1]:
        raise ShapeError(f"selective_scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}")
    Dd = _skip_data(D_skip, ud.shape[-1], dtype)
    y, cache = kernels.zoh_scan_fwd(ud, dd, Ad, Bd, Cd, Dd)

    def backward(g):
        g = np.ascontiguousarray(lift(g), dtype=dtype)
        gu, gdelta, gA, gB, gC, gD = kernels.zoh_scan_bwd(g, ud, dd, Ad, Bd, Cd, Dd, cache)
        seq = [gu, gdelta, gB, gC]
        if unbatched:
            seq = [x[0] for x in seq]
        gu, gdelta, gB, gC = seq
        return (gu, gdelta, gA, gB, gC) + ((gD,) if D_skip is not None else ())

    parents = (u, delta, A, B, C) + ((D_skip,) if D_skip is not None else ())
    return custom_op(y[0] if unbatched else y, parents, backward, "selective_scan_zoh")


def ssm_forward(u: Tensor, w: SsmInnerWeights, use_skip=True) -> Tensor:
    """``u[..., L, De]`` through input projection, discretization and the fused scan."""
    delta, B, C = ssm_inputs(u, w)
    return selective_scan(u, delta, a_matrix(w.A_log), B, C, w.D_skip if use_skip else None)
