"""MeanFlow residual variants: targets, losses, time sampling, inference.

A one-step policy learns g = phi - u, where u(a_t, b, t) is the average
velocity of the linear noising path a_t = (1-t)a + t*e and phi is a fixed
analytic function.  Substituting u = phi - g into the MeanFlow identity
u = v - (t-b) * du/dt gives the regression target

    g_tgt = phi - v + (t-b) * (dphi/dt - dgdt),

and the one-step sample is a = e - u(e,0,1) = e - phi(e,0,1) + g(e,0,1).

The seven variants below differ only in phi:

    name          phi        target                                inference
    plain_u       (g = u)    v - (t-b)*dgdt                        e - g_out
    residual_at   a_t        a_t + (t-b-1)*v - (t-b)*dgdt          g_out
    e_minus_u     e          a + (t-b)*dgdt                        g_out
    et_minus_u    e*t        (2t-b)*e - v - (t-b)*dgdt             g_out
    const2        2          2 - v - (t-b)*dgdt                    e - (2 - g_out)
    time_t        t          2t - b - v - (t-b)*dgdt               e - (1 - g_out)
    two_at        2*a_t      2*a_t + (2t-2b-1)*v - (t-b)*dgdt      g_out - e

e_minus_u and et_minus_u have a phi that is not a function of the network
inputs, which is exactly what makes them collapse; they are implemented for
the comparison study.  The network's raw output is g itself for every
variant, so a zero-initialised final layer starts all of them at g = 0:
action-predicting variants (residual_at, e_minus_u, et_minus_u) then emit
bounded actions from the very first step, while plain_u starts at a = e,
which is the out-of-bound behaviour the bound_loss diagnostic tracks.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ensure_finite
from .errors import ConfigError, DomainError, ShapeError
from .nets import PolicyNet, make_policy_mlp, policy_forward


@dataclass(frozen=True)
class VariantSpec:
    name: str
    target: callable
    inference: callable
    # d(action)/d(g_out) of the inference rule; the only non-identity slope
    # is plain_u's a = e - g_out.
    inference_dg: float = 1.0


def _col(x):
    """Normalize a time value to broadcast against (B, A) rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    return x


def _t_plain_u(a, e, a_t, v, b, t, dgdt):
    return v - (t - b) * dgdt


def _t_residual_at(a, e, a_t, v, b, t, dgdt):
    return a_t + (t - b - 1.0) * v - (t - b) * dgdt


def _t_e_minus_u(a, e, a_t, v, b, t, dgdt):
    return a + (t - b) * dgdt


def _t_et_minus_u(a, e, a_t, v, b, t, dgdt):
    return (2.0 * t - b) * e - v - (t - b) * dgdt


def _t_const2(a, e, a_t, v, b, t, dgdt):
    return 2.0 - v - (t - b) * dgdt


def _t_time_t(a, e, a_t, v, b, t, dgdt):
    return (2.0 * t - b) - v - (t - b) * dgdt


def _t_two_at(a, e, a_t, v, b, t, dgdt):
    return 2.0 * a_t + (2.0 * t - 2.0 * b - 1.0) * v - (t - b) * dgdt


VARIANTS = {
    "plain_u": VariantSpec("plain_u", _t_plain_u,
                           lambda e, g: e - g, inference_dg=-1.0),
    "residual_at": VariantSpec("residual_at", _t_residual_at,
                               lambda e, g: g),
    "e_minus_u": VariantSpec("e_minus_u", _t_e_minus_u,
                             lambda e, g: g),
    "et_minus_u": VariantSpec("et_minus_u", _t_et_minus_u,
                              lambda e, g: g),
    "const2": VariantSpec("const2", _t_const2,
                          lambda e, g: e - (2.0 - g)),
    "time_t": VariantSpec("time_t", _t_time_t,
                          lambda e, g: e - (1.0 - g)),
    "two_at": VariantSpec("two_at", _t_two_at,
                          lambda e, g: g - e),
}

COMPLIANT_VARIANTS = ("plain_u", "residual_at", "const2", "time_t", "two_at")
PATHOLOGICAL_VARIANTS = ("e_minus_u", "et_minus_u")


def get_variant(variant):
    if isinstance(variant, VariantSpec):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigError(
            f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}"
        ) from None


def make_policy(variant, state_dim, action_dim, hidden=None, seed=0,
                time_embed_dim=32):
    """Build a PolicyNet (zero-init final layer) tagged with the variant."""
    spec = get_variant(variant)
    kwargs = {} if hidden is None else {"hidden": tuple(hidden)}
    mlp = make_policy_mlp(state_dim, action_dim, seed=seed,
                          time_embed_dim=time_embed_dim, **kwargs)
    return PolicyNet(mlp, state_dim, action_dim, spec.name, time_embed_dim)


# ---------------------------------------------------------------------------
# Time sampling and path interpolation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSampler:
    """Emits pairs 0 <= b <= t <= 1.

    continuous:        two U(0,1) draws, swapped so b <= t
    continuous_b_zero: b = 0, t ~ U(0,1)
    discrete:          b = 0, t uniform on {1/N, 2/N, ..., 1}
    """

    strategy: str = "continuous"
    n: int = 50

    def __post_init__(self):
        if self.strategy not in ("continuous", "continuous_b_zero", "discrete"):
            raise ConfigError(f"unknown time sampler {self.strategy!r}")
        if self.strategy == "discrete" and self.n < 1:
            raise ConfigError("discrete sampler needs n >= 1")


def sample_times(sampler, rng):
    """One (b, t) pair as floats."""
    b, t = sample_times_batch(sampler, rng, 1)
    return float(b[0]), float(t[0])


def sample_times_batch(sampler, rng, size):
    """Vectorized (b, t) arrays of shape (size,), same law per element."""
    if sampler.strategy == "continuous":
        u = rng.random((size, 2))
        return u.min(axis=1), u.max(axis=1)
    if sampler.strategy == "continuous_b_zero":
        return np.zeros(size), rng.random(size)
    return (np.zeros(size),
            rng.integers(1, sampler.n + 1, size).astype(np.float64) / sampler.n)


def interpolate(a, e, t):
    """Noising path a_t = (1-t)a + t*e and its velocity v = e - a."""
    a = np.asarray(a, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if a.shape != e.shape:
        raise ShapeError(f"a {a.shape} vs e {e.shape}")
    t = _col(t)
    return (1.0 - t) * a + t * e, e - a


# ---------------------------------------------------------------------------
# Targets and losses.
# ---------------------------------------------------------------------------

def mfi_target(variant, a, e, a_t, v, b, t, dgdt):
    """Stop-gradient regression target for the variant's g network.

    dgdt must be the variant's own network total time derivative from
    policy_jvp; callers never differentiate through the result.
    """
    spec = get_variant(variant)
    a = np.asarray(a, dtype=np.float64)
    for other in (e, a_t, v, dgdt):
        if np.shape(other) != a.shape:
            raise ShapeError("mfi_target arguments must share one shape")
    return spec.target(a, e, a_t, v, _col(b), _col(t), dgdt)


@dataclass(frozen=True)
class LossWeighting:
    """Powered-l2 weighting w = (||delta||^2 + c)^(-p), w under stop-grad."""

    p: float = 0.2
    c: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"weighting power p must be in [0,1): {self.p}")
        if self.c <= 0.0:
            raise ConfigError(f"weighting constant c must be > 0: {self.c}")


def mfi_loss(g_pred, g_tgt, weighting):
    loss, _ = mfi_loss_grad(g_pred, g_tgt, weighting)
    return loss


def mfi_loss_grad(g_pred, g_tgt, weighting):
    """Weighted MFI regression loss and its gradient w.r.t. g_pred.

    loss = mean_batch sg(w) * ||g_pred - g_tgt||^2.  The weight carries no
    gradient, so dL/dg_pred = 2 * w * delta / B exactly.
    """
    g_pred = np.asarray(g_pred, dtype=np.float64)
    g_tgt = np.asarray(g_tgt, dtype=np.float64)
    if g_pred.shape != g_tgt.shape:
        raise ShapeError(f"g_pred {g_pred.shape} vs g_tgt {g_tgt.shape}")
    delta = g_pred - g_tgt
    sq = np.sum(delta * delta, axis=1)
    w = (sq + weighting.c) ** (-weighting.p)
    loss = float(np.mean(w * sq))
    ensure_finite("mfi loss", loss)
    grad = (2.0 / g_pred.shape[0]) * w[:, None] * delta
    return loss, grad


# ---------------------------------------------------------------------------
# Inference.
# ---------------------------------------------------------------------------

def one_step_action(variant, net, s, e):
    """Single network evaluation at (b=0, t=1) mapped through the variant's
    inference rule.  No clipping; callers measure boundedness upstream."""
    spec = get_variant(variant)
    e = np.asarray(e, dtype=np.float64)
    g_out = policy_forward(net, s, e, 0.0, 1.0)
    return spec.inference(e, g_out)


def policy_action(net, s, e):
    """one_step_action with the variant the network was built for."""
    return one_step_action(net.variant, net, s, e)


def naive_two_step_action(u_net, s, e):
    """Predict average velocity, subtract from noise: a = e - u(e, 0, 1).

    Same math as plain_u inference, kept as its own entry point so the
    bound-loss comparison against residual inference reads directly.
    """
    e = np.asarray(e, dtype=np.float64)
    return e - policy_forward(u_net, s, e, 0.0, 1.0)


def flow_matching_loss(v_net, s, a, e, t):
    """Plain conditional flow-matching objective, as a baseline.

    mean_batch || v_net(s, a_t, t) - (e - a) ||^2, with the velocity net
    evaluated at b = t (where the average velocity equals the instantaneous
    one).
    """
    a_t, v = interpolate(a, e, t)
    pred = policy_forward(v_net, s, a_t, t, t)
    resid = pred - v
    return float(np.mean(np.sum(resid * resid, axis=1)))


# ---------------------------------------------------------------------------
# Softsign helpers for boundary-heavy action data.
# ---------------------------------------------------------------------------

def softsign(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.abs(x))


def inv_softsign(a, eps=1e-8):
    a = np.asarray(a, dtype=np.float64)
    if np.any(np.abs(a) >= 1.0):
        raise DomainError("inv_softsign requires |a| < 1")
    return a / (1.0 - np.abs(a) + eps)
