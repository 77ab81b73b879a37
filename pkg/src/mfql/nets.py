"""Policy and critic networks plus the binary checkpoint format.

The policy g(s, a_t, b, t) is an MLP over [s || a_t || embed(b) || embed(t)]
whose raw output IS the residual quantity g; every variant shares this
architecture and differs only in its regression target and inference rule.
With a zero-initialised final layer g starts at the zero function, so
action-predicting variants emit bounded actions from the first step while
velocity-predicting ones start at raw noise.

The critic is a small ensemble (2 members by default) over [s || a] with
mean aggregation, plus a Polyak-averaged delayed copy.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Dual,
    MlpParams,
    MlpSpec,
    init_mlp,
    mlp_forward,
    mlp_jvp,
    sinusoidal_embed,
    sinusoidal_embed_dot,
)
from .errors import ConfigError, DataFormatError, ShapeError

TIME_EMBED_DIM = 32
ACTOR_HIDDEN_DEFAULT = (256, 256, 256)
CRITIC_HIDDEN_DEFAULT = (512, 512, 512, 512)
CHECKPOINT_MAGIC = b"MFQL1"


@dataclass
class PolicyNet:
    mlp: MlpParams
    state_dim: int
    action_dim: int
    variant: str
    time_embed_dim: int = TIME_EMBED_DIM

    def tensors(self):
        return self.mlp.tensors()


@dataclass
class CriticEnsemble:
    members: list
    state_dim: int
    action_dim: int
    aggregation: str = "mean"

    def tensors(self):
        out = []
        for m in self.members:
            out.extend(m.tensors())
        return out


@dataclass
class TargetCritic:
    ensemble: CriticEnsemble
    tau: float = 0.005


def make_policy_mlp(state_dim, action_dim, hidden=ACTOR_HIDDEN_DEFAULT,
                    seed=0, time_embed_dim=TIME_EMBED_DIM, use_layer_norm=False):
    in_dim = state_dim + action_dim + 2 * time_embed_dim
    spec = MlpSpec((in_dim, *hidden, action_dim),
                   use_layer_norm=use_layer_norm, final_init="zero")
    return init_mlp(spec, seed)


def make_critic(state_dim, action_dim, hidden=CRITIC_HIDDEN_DEFAULT,
                seed=0, n_members=2, use_layer_norm=True):
    spec = MlpSpec((state_dim + action_dim, *hidden, 1),
                   use_layer_norm=use_layer_norm, final_init="kaiming_small")
    members = [init_mlp(spec, [seed, 7, i]) for i in range(n_members)]
    return CriticEnsemble(members, state_dim, action_dim)


def make_target(critic, tau=0.005):
    copies = []
    for m in critic.members:
        c = m.zeros_like()
        for dst, src in zip(c.tensors(), m.tensors()):
            dst[...] = src
        copies.append(c)
    return TargetCritic(
        CriticEnsemble(copies, critic.state_dim, critic.action_dim,
                       critic.aggregation),
        tau,
    )


def _as_time_col(x, batch):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return np.full(batch, float(x))
    if x.shape != (batch,):
        raise ShapeError(f"time input shape {x.shape}, expected ({batch},)")
    return x


def _policy_input(net, s, a_t, b, t):
    s = np.asarray(s, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    if s.ndim != 2 or a_t.ndim != 2:
        raise ShapeError("policy inputs must be 2-D batches")
    if s.shape[0] != a_t.shape[0]:
        raise ShapeError(f"batch mismatch: s {s.shape} vs a_t {a_t.shape}")
    if s.shape[1] != net.state_dim or a_t.shape[1] != net.action_dim:
        raise ShapeError(
            f"expected dims ({net.state_dim},{net.action_dim}), "
            f"got s {s.shape}, a_t {a_t.shape}"
        )
    batch = s.shape[0]
    b = _as_time_col(b, batch)
    t = _as_time_col(t, batch)
    eb = sinusoidal_embed(b, net.time_embed_dim)
    et = sinusoidal_embed(t, net.time_embed_dim)
    x = np.concatenate([s, a_t, eb, et], axis=1)
    return x, a_t, t


def policy_forward(net, s, a_t, b, t):
    """g(s, a_t, b, t) for a batch; b and t are scalars or (B,) arrays."""
    g, _ = policy_forward_cached(net, s, a_t, b, t)
    return g


def policy_forward_cached(net, s, a_t, b, t):
    x, _, _ = _policy_input(net, s, a_t, b, t)
    return mlp_forward(net.mlp, x)


def policy_jvp(net, s, a_t, b, t, v):
    """Value and total time derivative of g along the interpolation path.

    dgdt = v . dg/da_t + dg/dt, computed in one dual-number pass with
    tangents (0 for s, v for a_t, 0 for b, 1 for t); the t tangent enters
    through the derivative of its sinusoidal embedding.
    """
    g, dgdt, _ = policy_jvp_cached(net, s, a_t, b, t, v)
    return g, dgdt


def policy_jvp_cached(net, s, a_t, b, t, v):
    x, a_t, t = _policy_input(net, s, a_t, b, t)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != a_t.shape:
        raise ShapeError(f"v shape {v.shape} != a_t shape {a_t.shape}")
    batch = x.shape[0]
    d = net.time_embed_dim
    tangent = np.zeros_like(x)
    tangent[:, net.state_dim:net.state_dim + net.action_dim] = v
    tangent[:, net.state_dim + net.action_dim + d:] = sinusoidal_embed_dot(t, d)
    y, dy, cache = mlp_jvp(net.mlp, Dual(x, tangent))
    return y, dy, cache


def critic_forward(critic, s, a):
    """Per-member Q values (B, M) and their mean aggregate (B,)."""
    per_member, _ = critic_forward_cached(critic, s, a)
    return per_member, per_member.mean(axis=1)


def critic_forward_cached(critic, s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.ndim != 2 or a.ndim != 2 or s.shape[0] != a.shape[0]:
        raise ShapeError(f"bad critic inputs s {s.shape}, a {a.shape}")
    if a.shape[1] != critic.action_dim or s.shape[1] != critic.state_dim:
        raise ShapeError(
            f"expected dims ({critic.state_dim},{critic.action_dim}), "
            f"got s {s.shape}, a {a.shape}"
        )
    x = np.concatenate([s, a], axis=1)
    cols = []
    caches = []
    for m in critic.members:
        y, cache = mlp_forward(m, x)
        cols.append(y[:, 0])
        caches.append(cache)
    return np.stack(cols, axis=1), caches


def polyak_update(target, online, tau):
    """theta_bar <- (1 - tau) * theta_bar + tau * theta, elementwise."""
    dst = target.ensemble.tensors()
    src = online.tensors()
    if len(dst) != len(src):
        raise ShapeError("target/online parameter lists differ")
    for d, s in zip(dst, src):
        if d.shape != s.shape:
            raise ShapeError(f"target {d.shape} vs online {s.shape}")
        d *= 1.0 - tau
        d += tau * s
    return target


# ---------------------------------------------------------------------------
# Checkpoint format: magic "MFQL1", then per tensor
#   u32 name length | name utf-8 | u32 rank | u32 dims... | f64 payload
# all little-endian, payload row-major.
# ---------------------------------------------------------------------------

def write_tensors(path, named):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def read_tensors(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic")
    out = {}
    off = len(CHECKPOINT_MAGIC)
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from("<" + "I" * rank, blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def _mlp_entries(prefix, mlp):
    out = {}
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}/w{l}"] = w
        out[f"{prefix}/b{l}"] = b
    for l, (g, s) in enumerate(zip(mlp.ln_gains, mlp.ln_shifts)):
        out[f"{prefix}/ln_g{l}"] = g
        out[f"{prefix}/ln_s{l}"] = s
    return out


def _mlp_from_entries(entries, prefix):
    n_layers = 0
    while f"{prefix}/w{n_layers}" in entries:
        n_layers += 1
    if n_layers == 0:
        return None
    weights = [entries[f"{prefix}/w{l}"].copy() for l in range(n_layers)]
    biases = [entries[f"{prefix}/b{l}"].copy() for l in range(n_layers)]
    use_ln = f"{prefix}/ln_g0" in entries
    sizes = (weights[0].shape[0],) + tuple(w.shape[1] for w in weights)
    spec = MlpSpec(sizes, use_layer_norm=use_ln, final_init="zero")
    params = MlpParams(spec, weights, biases)
    if use_ln:
        params.ln_gains = [entries[f"{prefix}/ln_g{l}"].copy()
                           for l in range(n_layers - 1)]
        params.ln_shifts = [entries[f"{prefix}/ln_s{l}"].copy()
                            for l in range(n_layers - 1)]
    return params


def save_checkpoint(path, policy, critic=None, target=None, extras=None):
    """Write policy (plus optional critic/target) into one tensor file."""
    named = {
        "meta/state_dim": np.array([policy.state_dim], dtype=np.float64),
        "meta/action_dim": np.array([policy.action_dim], dtype=np.float64),
        "meta/time_embed_dim": np.array([policy.time_embed_dim], dtype=np.float64),
        "meta/variant": np.frombuffer(policy.variant.encode("utf-8"),
                                      dtype=np.uint8).astype(np.float64),
    }
    for key, value in (extras or {}).items():
        named[f"meta/x_{key}"] = np.atleast_1d(
            np.asarray(value, dtype=np.float64))
    named.update(_mlp_entries("policy", policy.mlp))
    if critic is not None:
        named["meta/n_members"] = np.array([len(critic.members)], np.float64)
        for i, m in enumerate(critic.members):
            named.update(_mlp_entries(f"critic{i}", m))
    if target is not None:
        named["meta/tau"] = np.array([target.tau], dtype=np.float64)
        for i, m in enumerate(target.ensemble.members):
            named.update(_mlp_entries(f"target{i}", m))
    write_tensors(path, named)


def load_checkpoint(path):
    """Read a checkpoint back into (policy, critic, target, extras)."""
    entries = read_tensors(path)
    for key in ("meta/state_dim", "meta/action_dim", "meta/variant"):
        if key not in entries:
            raise DataFormatError(f"{path}: checkpoint missing {key}")
    state_dim = int(entries["meta/state_dim"][0])
    action_dim = int(entries["meta/action_dim"][0])
    variant = bytes(entries["meta/variant"].astype(np.uint8)).decode("utf-8")
    policy = PolicyNet(
        mlp=_mlp_from_entries(entries, "policy"),
        state_dim=state_dim,
        action_dim=action_dim,
        variant=variant,
        time_embed_dim=int(entries["meta/time_embed_dim"][0]),
    )
    if policy.mlp is None:
        raise DataFormatError(f"{path}: checkpoint has no policy tensors")
    critic = target = None
    if "meta/n_members" in entries:
        n = int(entries["meta/n_members"][0])
        members = [_mlp_from_entries(entries, f"critic{i}") for i in range(n)]
        if any(m is None for m in members):
            raise DataFormatError(f"{path}: incomplete critic tensors")
        critic = CriticEnsemble(members, state_dim, action_dim)
        tmembers = [_mlp_from_entries(entries, f"target{i}") for i in range(n)]
        if all(m is not None for m in tmembers):
            target = TargetCritic(
                CriticEnsemble(tmembers, state_dim, action_dim),
                float(entries.get("meta/tau", np.array([0.005]))[0]),
            )
    extras = {}
    for name, arr in entries.items():
        if name.startswith("meta/x_"):
            key = name[len("meta/x_"):]
            extras[key] = float(arr[0]) if arr.size == 1 else arr
    return policy, critic, target, extras
