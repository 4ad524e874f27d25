"""Dense Mamba layer."""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ssm import MambaDims, SsmInnerWeights, a_matrix, selective_scan, ssm_inputs
from .tensor import Tensor, depthwise_conv1d_causal, matmul, silu

DT_MIN, DT_MAX = 1e-3, 1e-1


@dataclass
class MambaWeights:
    W_in: Tensor  # [Dm, De]  conv projection
    W_g: Tensor  # [Dm, De]   gate projection
    W_conv: Tensor  # [k, De]
    conv_bias: Tensor  # [De]
    inner: SsmInnerWeights
    W_out: Tensor  # [De, Dm]

    def tensors(self):
        out = {"W_in": self.W_in, "W_g": self.W_g, "W_conv": self.W_conv, "conv_bias": self.conv_bias}
        out.update(self.inner.tensors())
        out["W_out"] = self.W_out
        return out

    @property
    def W_in_g(self):
        """The fused ``[Dm, 2*De]`` view of conv and gate projections."""
        return np.concatenate([self.W_in.data, self.W_g.data], axis=1)


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_inner_weights(dims: MambaDims, rng, dtype=np.float32, use_skip=True) -> SsmInnerWeights:
    De, Ds, dr = dims.d_expand, dims.d_state, dims.dt_rank
    dt = np.exp(rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=De))
    # inverse softplus, so softplus(dt_bias) == dt
    dt_bias = dt + np.log(-np.expm1(-dt))
    A_log = np.tile(np.log(np.arange(1, Ds + 1, dtype=np.float64)), (De, 1))
    return SsmInnerWeights(
        W_x=uniform_init(rng, (De, dr + 2 * Ds), De, dtype),
        W_dt=uniform_init(rng, (dr, De), dr, dtype),
        dt_bias=Tensor(dt_bias.astype(dtype), requires_grad=True),
        A_log=Tensor(A_log.astype(dtype), requires_grad=True),
        D_skip=Tensor(np.ones(De, dtype=dtype), requires_grad=True) if use_skip else None,
    )


def init_mamba_weights(dims: MambaDims, seed, dtype=np.float32, use_skip=True) -> MambaWeights:
    """Uniform(+-1/sqrt(fan_in)) projections; S4D-real ``A_log``; ``dt`` spread over [1e-3, 1e-1]."""
    rng = np.random.default_rng(seed)
    Dm, De, k = dims.d_model, dims.d_expand, dims.conv_kernel
    return MambaWeights(
        W_in=uniform_init(rng, (Dm, De), Dm, dtype),
        W_g=uniform_init(rng, (Dm, De), Dm, dtype),
        W_conv=uniform_init(rng, (k, De), k, dtype),
        conv_bias=uniform_init(rng, (De,), k, dtype),
        inner=init_inner_weights(dims, rng, dtype, use_skip),
        W_out=uniform_init(rng, (De, Dm), De, dtype),
    )


def conv_ssm(H: Tensor, W_conv: Tensor, conv_bias: Tensor, inner: SsmInnerWeights) -> Tensor:
    """Short convolution, SiLU, then the selective SSM: ``H[..., L, De] -> Y[..., L, De]``."""
    U = silu(depthwise_conv1d_causal(H, W_conv, conv_bias))
    delta, B, C = ssm_inputs(U, inner)
    return selective_scan(U, delta, a_matrix(inner.A_log), B, C, inner.D_skip)


def mamba_forward(x: Tensor, w: MambaWeights) -> Tensor:
    """``(SSM(SiLU(conv(x W_in))) * SiLU(x W_g)) W_out`` for ``x[..., L, Dm]``."""
    if x.shape[-1] != w.W_in.shape[0]:
        raise ShapeError(f"mamba_forward: input {x.shape} vs W_in {w.W_in.shape}")
    Y = conv_ssm(matmul(x, w.W_in), w.W_conv, w.conv_bias, w.inner)
    G = silu(matmul(x, w.W_g))
    return matmul(Y * G, w.W_out)
