"""Dense MLP math with exact reverse-mode gradients and forward-mode JVPs.

Everything is float64 numpy.  The MLP stack is affine -> (layer norm) ->
SiLU on hidden layers and a bare affine output layer.  SiLU is used because
the training loop differentiates the network in time via a dual-number pass,
which needs a C1 activation.  Reductions are plain row-major numpy sums, so
seeded runs are bitwise reproducible.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError

LN_EPS = 1e-5


def ensure_finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")


@dataclass
class Dual:
    """A value paired with a tangent of the same shape."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if np.shape(self.primal) != np.shape(self.tangent):
            raise ShapeError(
                f"dual primal {np.shape(self.primal)} vs tangent "
                f"{np.shape(self.tangent)}"
            )


def sinusoidal_embed(t, dim):
    """Interleaved sin/cos features of a time value in [0, 1].

    Frequencies are geometric: w_k = 10000^(-2k/dim) for pair k, giving
    embed[2k] = sin(w_k t), embed[2k+1] = cos(w_k t).  `t` may be a scalar
    (returns shape (dim,)) or a 1-D array (returns (len(t), dim)).
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * k / dim)
    ang = t[..., None] * w
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def sinusoidal_embed_dot(t, dim):
    """d/dt of sinusoidal_embed: interleaved [w_k cos(w_k t), -w_k sin(w_k t)]."""
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * k / dim)
    ang = t[..., None] * w
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = w * np.cos(ang)
    out[..., 1::2] = -w * np.sin(ang)
    return out


@dataclass
class MlpSpec:
    layer_sizes: tuple
    use_layer_norm: bool = False
    final_init: str = "zero"  # "zero" | "kaiming_small"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ConfigError("MlpSpec needs at least input and output sizes")
        if any(n < 1 for n in self.layer_sizes):
            raise ConfigError(f"all layer sizes must be >= 1: {self.layer_sizes}")
        if self.final_init not in ("zero", "kaiming_small"):
            raise ConfigError(f"unknown final_init {self.final_init!r}")


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    ln_gains: list = field(default_factory=list)
    ln_shifts: list = field(default_factory=list)

    def tensors(self):
        """All parameter arrays in a fixed deterministic order."""
        out = []
        for l in range(len(self.weights)):
            out.append(self.weights[l])
            out.append(self.biases[l])
        out.extend(self.ln_gains)
        out.extend(self.ln_shifts)
        return out

    def zeros_like(self):
        g = MlpParams(self.spec)
        g.weights = [np.zeros_like(w) for w in self.weights]
        g.biases = [np.zeros_like(b) for b in self.biases]
        g.ln_gains = [np.zeros_like(a) for a in self.ln_gains]
        g.ln_shifts = [np.zeros_like(a) for a in self.ln_shifts]
        return g


def init_mlp(spec, seed):
    """Kaiming (fan-in scaled normal) hidden layers, zero biases.

    The output layer is all-zero under final_init="zero", else Kaiming
    scaled by gain 0.01.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    params = MlpParams(spec)
    sizes = spec.layer_sizes
    n_layers = len(sizes) - 1
    for l in range(n_layers):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        std = np.sqrt(2.0 / fan_in)
        if l == n_layers - 1:
            if spec.final_init == "zero":
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * (std * 0.01)
        else:
            w = rng.standard_normal((fan_in, fan_out)) * std
        params.weights.append(w)
        params.biases.append(np.zeros(fan_out))
    if spec.use_layer_norm:
        for l in range(n_layers - 1):
            params.ln_gains.append(np.ones(sizes[l + 1]))
            params.ln_shifts.append(np.zeros(sizes[l + 1]))
    return params


def _silu(z):
    sig = expit(z)
    return z * sig, sig


def _dsilu(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def mlp_forward(params, x):
    """Forward pass; returns (y, cache) with cache holding what backward needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.layer_sizes[0]:
        raise ShapeError(
            f"input {x.shape} does not match mlp input size "
            f"{params.spec.layer_sizes[0]}"
        )
    use_ln = params.spec.use_layer_norm
    h = x
    layers = []
    n_hidden = len(params.weights) - 1
    for l in range(n_hidden):
        z = h @ params.weights[l] + params.biases[l]
        if use_ln:
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            zhat = (z - mu) * inv_std
            pre = params.ln_gains[l] * zhat + params.ln_shifts[l]
        else:
            zhat = inv_std = None
            pre = z
        act, sig = _silu(pre)
        layers.append((h, pre, sig, zhat, inv_std))
        h = act
    y = h @ params.weights[-1] + params.biases[-1]
    cache = (layers, h)
    return y, cache


def mlp_backward(params, cache, dL_dy):
    """Exact reverse-mode gradients w.r.t. parameters and input.

    `cache` must come from a matching mlp_forward (or mlp_jvp) call.
    Returns (grads, dL_dx) with grads shaped like params.
    """
    layers, h_last = cache
    dL_dy = np.asarray(dL_dy, dtype=np.float64)
    if dL_dy.shape[1] != params.spec.layer_sizes[-1]:
        raise ShapeError(f"dL_dy has {dL_dy.shape[1]} columns, "
                         f"expected {params.spec.layer_sizes[-1]}")
    if len(layers) != len(params.weights) - 1 or h_last.shape[0] != dL_dy.shape[0]:
        raise ShapeError("cache does not match this backward call")
    grads = params.zeros_like()
    use_ln = params.spec.use_layer_norm

    grads.weights[-1][...] = h_last.T @ dL_dy
    grads.biases[-1][...] = dL_dy.sum(axis=0)
    dh = dL_dy @ params.weights[-1].T

    for l in range(len(layers) - 1, -1, -1):
        h_in, pre, sig, zhat, inv_std = layers[l]
        dpre = dh * _dsilu(pre, sig)
        if use_ln:
            grads.ln_gains[l][...] = (dpre * zhat).sum(axis=0)
            grads.ln_shifts[l][...] = dpre.sum(axis=0)
            dzhat = dpre * params.ln_gains[l]
            m1 = dzhat.mean(axis=1, keepdims=True)
            m2 = (dzhat * zhat).mean(axis=1, keepdims=True)
            dz = inv_std * (dzhat - m1 - zhat * m2)
        else:
            dz = dpre
        grads.weights[l][...] = h_in.T @ dz
        grads.biases[l][...] = dz.sum(axis=0)
        dh = dz @ params.weights[l].T
    return grads, dh


def mlp_jvp(params, x):
    """Dual-number forward pass.

    Propagates the tangent through every affine map, layer norm, and SiLU.
    Returns (y, dy, cache); the cache is a regular forward cache, so a
    backward pass on the primal can reuse it.
    """
    if not isinstance(x, Dual):
        raise ShapeError("mlp_jvp expects a Dual input")
    h = np.asarray(x.primal, dtype=np.float64)
    dh = np.asarray(x.tangent, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.spec.layer_sizes[0]:
        raise ShapeError(
            f"input {h.shape} does not match mlp input size "
            f"{params.spec.layer_sizes[0]}"
        )
    use_ln = params.spec.use_layer_norm
    layers = []
    n_hidden = len(params.weights) - 1
    for l in range(n_hidden):
        z = h @ params.weights[l] + params.biases[l]
        dz = dh @ params.weights[l]
        if use_ln:
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            zhat = (z - mu) * inv_std
            dmu = dz.mean(axis=1, keepdims=True)
            dvar = 2.0 * ((z - mu) * dz).mean(axis=1, keepdims=True)
            dinv = -0.5 * inv_std ** 3 * dvar
            dzhat = (dz - dmu) * inv_std + (z - mu) * dinv
            pre = params.ln_gains[l] * zhat + params.ln_shifts[l]
            dpre = params.ln_gains[l] * dzhat
        else:
            zhat = inv_std = None
            pre, dpre = z, dz
        act, sig = _silu(pre)
        layers.append((h, pre, sig, zhat, inv_std))
        h = act
        dh = dpre * _dsilu(pre, sig)
    y = h @ params.weights[-1] + params.biases[-1]
    dy = dh @ params.weights[-1]
    cache = (layers, h)
    return y, dy, cache


@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(tensors, lr):
    return AdamState(
        lr=lr,
        m=[np.zeros_like(p) for p in tensors],
        v=[np.zeros_like(p) for p in tensors],
    )


def global_norm(tensors):
    total = 0.0
    for g in tensors:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def adam_step(state, tensors, grads, max_grad_norm):
    """One clipped, bias-corrected Adam update, in place.

    The whole gradient set is clipped by its global norm first.  If any
    gradient entry is non-finite the step is rejected: nothing (params,
    moments, counter) is mutated.
    """
    if len(tensors) != len(state.m) or len(grads) != len(tensors):
        raise ShapeError("optimizer state does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, step rejected")
    norm = global_norm(grads)
    scale = 1.0
    if max_grad_norm > 0.0 and norm > max_grad_norm:
        scale = max_grad_norm / norm
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for p, m, v, g in zip(tensors, state.m, state.v, grads):
        if scale != 1.0:
            g = g * scale
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return tensors, state
