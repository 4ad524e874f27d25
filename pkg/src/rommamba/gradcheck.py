"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_grad(fn, inputs, index, step=1e-6):
    x = inputs[index]
    flat = x.data.reshape(-1)
    out = np.empty(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*inputs).data)
            flat[i] = orig - step
            fm = float(fn(*inputs).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def gradcheck(fn, inputs, step=1e-6, floor=1e-8):
    """Max relative error between autodiff and central differences over all inputs.

    ``fn(*inputs)`` must return a scalar :class:`Tensor`; ``inputs`` should be
    double-precision tensors with ``requires_grad=True``. Returns
    ``(max_error, per_input_errors)``.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    errors = []
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, inputs, i, step)
        errors.append(float(relative_error(analytic, numeric, floor).max()) if t.size else 0.0)
    return max(errors), errors


def random_weighted_sum(out: Tensor, seed=0):
    """Scalar ``sum(out * r)`` with fixed random ``r``, a generic test loss."""
    r = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape) * np.where(
        np.random.default_rng(seed + 1).random(out.shape) < 0.5, -1.0, 1.0
    )
    return (out * Tensor(r.astype(out.dtype))).sum()
