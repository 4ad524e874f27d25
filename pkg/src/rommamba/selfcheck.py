"""Fast oracle and invariant checks runnable from an installed package (no test runner needed)."""
import time

import numpy as np

from .gradcheck import gradcheck, random_weighted_sum
from .mamba import init_mamba_weights, mamba_forward
from .model import ModelConfig, build_model, lm_forward
from .rom import init_rom_weights, rom_forward, rom_forward_dense_reference, rom_from_mamba
from .routing import RouterConfig, RouterWeights, balance_loss
from .ssm import MambaDims, a_matrix, discretize_zoh, selective_scan_chunked, selective_scan_sequential
from .tensor import Tensor, matmul, rmsnorm, silu, softmax, softplus


def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def check_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)

    def fn(x, w, g):
        return random_weighted_sum(softmax(rmsnorm(silu(softplus(matmul(x, w))), g)))

    err, _ = gradcheck(fn, [x, w, g])
    return err < 1e-5, f"max rel err {err:.2e}"


def check_scan_equivalence():
    rng = np.random.default_rng(1)
    L, De, Ds = 32, 3, 4
    u = Tensor(rng.standard_normal((L, De)))
    delta = Tensor(rng.uniform(0.05, 0.5, (L, De)))
    A = a_matrix(Tensor(np.log(rng.uniform(0.5, 2.0, (De, Ds)))))
    B = Tensor(rng.standard_normal((L, Ds)))
    C = Tensor(rng.standard_normal((L, Ds)))
    Ab, Bb = discretize_zoh(A, B, delta)
    ref = selective_scan_sequential(u, Ab, Bb, C).data
    worst = max(_rel(selective_scan_chunked(u, Ab, Bb, C, chunk=c).data, ref) for c in (1, 3, 8, L))
    return worst <= 1e-10, f"max rel diff {worst:.1e}"


def check_dense_reduction():
    dims = MambaDims(8, d_state=4)
    mw = init_mamba_weights(dims, seed=2)
    rw = rom_from_mamba(mw, RouterWeights(Tensor(np.random.default_rng(3).standard_normal((8, 1)).astype(np.float32))))
    x = Tensor(np.random.default_rng(4).standard_normal((10, 8)).astype(np.float32))
    out, _ = rom_forward(x, rw, RouterConfig(1, 1))
    err = _rel(out.data, mamba_forward(x, mw).data)
    return err <= 1e-6, f"rel diff {err:.1e}"


def check_sparse_dense_oracle():
    dims = MambaDims(8, d_state=4)
    worst, coherent = 0.0, True
    for mode in ("shared", "independent"):
        for N, K in ((4, 1), (4, 2)):
            w = init_rom_weights(dims, N, mode=mode, seed=5, dtype=np.float64)
            x = Tensor(np.random.default_rng(6).standard_normal((2, 6, 8)))
            cfg = RouterConfig(N, K)
            a, tr = rom_forward(x, w, cfg, mode)
            b, _ = rom_forward_dense_reference(x, w, cfg, mode)
            worst = max(worst, _rel(a.data, b.data))
            if mode == "shared":
                coherent &= tr.coherent()
    return worst <= 1e-5 and coherent, f"max rel diff {worst:.1e}, shared coherent={coherent}"


def check_balance_loss():
    alpha, N, T, M = 0.01, 4, 8, 3
    uniform = [Tensor(np.full((T, N), 1.0 / N)) for _ in range(M)]
    idx = [np.arange(T)[:, None] % N for _ in range(M)]
    got = float(balance_loss(uniform, idx, RouterConfig(N, 1, balance_alpha=alpha)).data)
    onehot = np.zeros((T, N))
    onehot[:, 0] = 1.0
    degenerate = float(balance_loss([Tensor(onehot)] * M, [np.zeros((T, 1), int)] * M,
                                    RouterConfig(N, 1, balance_alpha=alpha)).data)
    ok = got == alpha * M and degenerate == alpha * N * M
    return ok, f"uniform {got!r}, degenerate {degenerate!r}"


def check_causality():
    cfg = ModelConfig(d_model=16, n_layers=4, pattern="MARE", num_experts=4, swa_window=5, d_state=4)
    model = build_model(cfg, seed=7)
    toks = np.random.default_rng(8).integers(0, 256, 24)
    changed = toks.copy()
    changed[12:] = (changed[12:] + 17) % 256
    a, _ = lm_forward(model, toks)
    b, _ = lm_forward(model, changed)
    ok = np.array_equal(a.data[:12], b.data[:12])
    return ok, "past logits bitwise unchanged" if ok else "past logits changed"


CHECKS = [
    ("gradients", check_gradients),
    ("scan-equivalence", check_scan_equivalence),
    ("dense-reduction", check_dense_reduction),
    ("sparse-dense-oracle", check_sparse_dense_oracle),
    ("balance-loss", check_balance_loss),
    ("causality", check_causality),
]


def run_selfcheck(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going so every check prints a line
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:20s} {detail}  ({time.time() - t0:.2f}s)")
    return all_ok
