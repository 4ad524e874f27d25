"""Selective-scan kernels.

Two families, each with a forward and a backward:

* ``scan_*``     -- recurrence over pre-discretized ``a`` (A-bar) and ``bb`` (B-bar) arrays.
* ``zoh_scan_*`` -- ZOH discretization plus recurrence. The per-state ``B-bar`` tensor is
  never materialized; only the scalar factor ``phi = expm1(delta*A)/A`` is.

The transcendental part (``exp``/``expm1``) always runs through numpy, whose SIMD
kernels beat scalar libm calls from numba. The recurrences have a numba ``@njit``
loop nest and a numpy loop over time; the public names bind to one of them
according to :mod:`rommamba._accel`.

Layouts: ``u, delta: [B, L, De]``, ``a, bb, phi: [B, L, De, Ds]``, ``A: [De, Ds]``,
``Bm, C: [B, L, Ds]``, ``D: [De]`` (pass zeros to disable the skip term).
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# |delta * A| below this uses the two-term series for expm1(x)/x
ZOH_SERIES_EPS = 1e-4


def zoh_coefficients(delta, A):
    """Return ``(a, phi)`` with ``a = exp(delta*A)`` and ``phi = (exp(delta*A) - 1) / A``.

    ``delta`` has shape ``[..., De]`` and ``A`` has shape ``[De, Ds]``; outputs are
    ``[..., De, Ds]``. Where ``|delta*A| < ZOH_SERIES_EPS`` the quotient is replaced by
    ``delta * (1 + x/2 + x**2/6)`` with ``x = delta*A``, which also covers ``A == 0``.
    """
    dt = delta[..., None]
    dA = dt * A
    em1 = np.expm1(dA)
    # 1 + expm1(x) is within an ulp of exp(x) and saves a second transcendental pass
    a = em1 + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.divide(em1, A, out=em1)
    # cheap necessary condition for any |dA| < eps; usually false since dA <= -eps
    if dA.size and dA.max() > -ZOH_SERIES_EPS and dA.min() < ZOH_SERIES_EPS:
        small = np.abs(dA) < ZOH_SERIES_EPS
        if small.any():
            phi = np.where(small, dt * (1.0 + dA * (0.5 + dA / 6.0)), phi)
    return a, phi


def _phi_partials(delta, A, a, phi):
    """d(phi)/d(delta) and d(phi)/d(A) given the forward coefficients."""
    dt = delta[..., None]
    dA = dt * A
    small = np.abs(dA) < ZOH_SERIES_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        dphi_dA = (dt * a - phi) / A
    dphi_dd = a
    if small.any():
        dphi_dd = np.where(small, 1.0 + dA * (1.0 + 0.5 * dA), a)
        dphi_dA = np.where(small, dt * dt * (0.5 + dA / 3.0), dphi_dA)
    return dphi_dd, dphi_dA


# --------------------------------------------------------------------------- numpy


def scan_fwd_numpy(u, a, bb, C, D):
    Bsz, L, De = u.shape
    Ds = a.shape[-1]
    h = np.zeros((Bsz, De, Ds), dtype=u.dtype)
    hs = np.empty((Bsz, L, De, Ds), dtype=u.dtype)
    y = np.empty_like(u)
    for t in range(L):
        h = a[:, t] * h + bb[:, t] * u[:, t, :, None]
        hs[:, t] = h
        y[:, t] = np.einsum("bds,bs->bd", h, C[:, t]) + D * u[:, t]
    return y, hs


def _state_grads_numpy(gy, C, a, hs):
    """dL/dh_t for every t (the reverse-time recurrence), shape ``[B, L, De, Ds]``."""
    L = gy.shape[1]
    G = np.empty_like(hs)
    carry = np.zeros_like(hs[:, 0])
    for t in range(L - 1, -1, -1):
        g = carry + gy[:, t, :, None] * C[:, t, None, :]
        G[:, t] = g
        carry = g * a[:, t]
    return G


def _shift_prev(hs):
    h_prev = np.empty_like(hs)
    h_prev[:, 0] = 0.0
    h_prev[:, 1:] = hs[:, :-1]
    return h_prev


def scan_bwd_numpy(gy, u, a, bb, C, D, hs):
    G = _state_grads_numpy(gy, C, a, hs)
    ga = G * _shift_prev(hs)
    gbb = G * u[..., None]
    gu = gy * D + np.einsum("blds,blds->bld", G, bb)
    gC = np.einsum("bld,blds->bls", gy, hs)
    gD = np.einsum("bld,bld->d", gy, u)
    return gu, ga, gbb, gC, gD


def zoh_core_fwd_numpy(u, a, phi, Bm, C, D):
    Bsz, L, De = u.shape
    Ds = a.shape[-1]
    h = np.zeros((Bsz, De, Ds), dtype=u.dtype)
    hs = np.empty((Bsz, L, De, Ds), dtype=u.dtype)
    y = np.empty_like(u)
    for t in range(L):
        h = a[:, t] * h + phi[:, t] * (Bm[:, t, None, :] * u[:, t, :, None])
        hs[:, t] = h
        y[:, t] = np.einsum("bds,bs->bd", h, C[:, t]) + D * u[:, t]
    return y, hs


def zoh_core_bwd_numpy(gy, u, delta, A, a, phi, Bm, C, D, hs):
    dphi_dd, dphi_dA = _phi_partials(delta, A, a, phi)
    G = _state_grads_numpy(gy, C, a, hs)
    ga = G * _shift_prev(hs)
    gbb = G * u[..., None]
    Bx = Bm[:, :, None, :]
    gu = gy * D + np.einsum("blds,blds->bld", G, phi * Bx)
    gB = np.einsum("blds,blds->bls", gbb, phi)
    gphi = gbb * Bx
    gdelta = np.sum(ga * a * A + gphi * dphi_dd, axis=-1)
    gA = np.sum(ga * a * delta[..., None] + gphi * dphi_dA, axis=(0, 1))
    gC = np.einsum("bld,blds->bls", gy, hs)
    gD = np.einsum("bld,bld->d", gy, u)
    return gu, gdelta, gA, gB, gC, gD


# --------------------------------------------------------------------------- numba


@njit
def scan_fwd_numba(u, a, bb, C, D):
    Bsz, L, De = u.shape
    Ds = a.shape[3]
    hs = np.empty((Bsz, L, De, Ds), dtype=u.dtype)
    y = np.empty_like(u)
    h = np.zeros((De, Ds), dtype=u.dtype)
    for b in range(Bsz):
        h[:, :] = 0.0
        for t in range(L):
            for d in range(De):
                ut = u[b, t, d]
                acc = D[d] * ut
                for s in range(Ds):
                    hv = a[b, t, d, s] * h[d, s] + bb[b, t, d, s] * ut
                    h[d, s] = hv
                    hs[b, t, d, s] = hv
                    acc += C[b, t, s] * hv
                y[b, t, d] = acc
    return y, hs


@njit
def scan_bwd_numba(gy, u, a, bb, C, D, hs):
    Bsz, L, De = u.shape
    Ds = a.shape[3]
    gu = np.zeros_like(u)
    ga = np.zeros_like(a)
    gbb = np.zeros_like(bb)
    gC = np.zeros_like(C)
    gD = np.zeros(De, dtype=u.dtype)
    carry = np.zeros((De, Ds), dtype=u.dtype)
    for b in range(Bsz):
        carry[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(De):
                gyt = gy[b, t, d]
                ut = u[b, t, d]
                gD[d] += gyt * ut
                gacc = gyt * D[d]
                for s in range(Ds):
                    g = carry[d, s] + gyt * C[b, t, s]
                    gC[b, t, s] += gyt * hs[b, t, d, s]
                    if t > 0:
                        ga[b, t, d, s] = g * hs[b, t - 1, d, s]
                    gbb[b, t, d, s] = g * ut
                    gacc += g * bb[b, t, d, s]
                    carry[d, s] = g * a[b, t, d, s]
                gu[b, t, d] = gacc
    return gu, ga, gbb, gC, gD


@njit
def zoh_core_fwd_numba(u, a, phi, Bm, C, D):
    Bsz, L, De = u.shape
    Ds = a.shape[3]
    hs = np.empty((Bsz, L, De, Ds), dtype=u.dtype)
    y = np.empty_like(u)
    h = np.zeros((De, Ds), dtype=u.dtype)
    for b in range(Bsz):
        h[:, :] = 0.0
        for t in range(L):
            for d in range(De):
                ut = u[b, t, d]
                acc = D[d] * ut
                for s in range(Ds):
                    hv = a[b, t, d, s] * h[d, s] + phi[b, t, d, s] * (Bm[b, t, s] * ut)
                    h[d, s] = hv
                    hs[b, t, d, s] = hv
                    acc += C[b, t, s] * hv
                y[b, t, d] = acc
    return y, hs


@njit
def zoh_core_bwd_numba(gy, u, delta, A, a, phi, Bm, C, D, hs, eps=ZOH_SERIES_EPS):
    Bsz, L, De = u.shape
    Ds = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(C)
    gD = np.zeros(De, dtype=u.dtype)
    carry = np.zeros((De, Ds), dtype=u.dtype)
    for b in range(Bsz):
        carry[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(De):
                gyt = gy[b, t, d]
                ut = u[b, t, d]
                dt = delta[b, t, d]
                gD[d] += gyt * ut
                gacc = gyt * D[d]
                gdacc = gyt * 0.0
                for s in range(Ds):
                    av = a[b, t, d, s]
                    ph = phi[b, t, d, s]
                    Ads = A[d, s]
                    Bts = Bm[b, t, s]
                    g = carry[d, s] + gyt * C[b, t, s]
                    gC[b, t, s] += gyt * hs[b, t, d, s]
                    if t > 0:
                        ga = g * hs[b, t - 1, d, s]
                    else:
                        ga = g * 0.0
                    gbb = g * ut
                    gacc += g * ph * Bts
                    gB[b, t, s] += gbb * ph
                    gphi = gbb * Bts
                    dA = dt * Ads
                    if abs(dA) < eps:
                        pdd = 1.0 + dA * (1.0 + 0.5 * dA)
                        pdA = dt * dt * (0.5 + dA / 3.0)
                    else:
                        pdd = av
                        pdA = (dt * av - ph) / Ads
                    gdacc += ga * av * Ads + gphi * pdd
                    gA[d, s] += ga * av * dt + gphi * pdA
                    carry[d, s] = g * av
                gu[b, t, d] = gacc
                gdelta[b, t, d] = gdacc
    return gu, gdelta, gA, gB, gC, gD


if USE_NUMBA:
    scan_fwd, scan_bwd = scan_fwd_numba, scan_bwd_numba
    _zoh_core_fwd, _zoh_core_bwd = zoh_core_fwd_numba, zoh_core_bwd_numba
else:
    scan_fwd, scan_bwd = scan_fwd_numpy, scan_bwd_numpy
    _zoh_core_fwd, _zoh_core_bwd = zoh_core_fwd_numpy, zoh_core_bwd_numpy


def zoh_scan_fwd(u, delta, A, Bm, C, D, core=None):
    """Discretize and scan. Returns ``(y, cache)``; ``cache`` feeds :func:`zoh_scan_bwd`."""
    core = core or _zoh_core_fwd
    a, phi = zoh_coefficients(delta, A)
    y, hs = core(u, a, phi, Bm, C, D)
    return y, (a, phi, hs)


def zoh_scan_bwd(gy, u, delta, A, Bm, C, D, cache, core=None):
    """Gradients ``(gu, gdelta, gA, gB, gC, gD)`` of ``sum(gy * y)``."""
    core = core or _zoh_core_bwd
    a, phi, hs = cache
    return core(gy, u, delta, A, a, phi, Bm, C, D, hs)
