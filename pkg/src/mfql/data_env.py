"""Toy 2-D target densities, the point-reach environment, and dataset I/O.

The point-reach environment is a [-1,1]^2 arena with a box obstacle between
a fixed start and a fixed goal.  An offline dataset is generated by a 50/50
mixture of two scripted experts that route above vs below the box, so the
action distribution at states near the start is genuinely bimodal.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError

# ---------------------------------------------------------------------------
# Toy densities on [-1, 1]^2.
# ---------------------------------------------------------------------------

# "On" cells of the 4x4 checkerboard: even (row+col) parity.
CHECKER_ON_CELLS = tuple(
    (i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0
)

EIGHT_GAUSSIANS_RADIUS = 0.8
EIGHT_GAUSSIANS_SIGMA = 0.05
EIGHT_GAUSSIANS_CENTERS = np.stack(
    [
        EIGHT_GAUSSIANS_RADIUS
        * np.array([np.cos(k * np.pi / 4.0), np.sin(k * np.pi / 4.0)])
        for k in range(8)
    ]
)


@dataclass(frozen=True)
class ToyDistribution:
    kind: str  # "checkerboard" | "eight_gaussians"

    def __post_init__(self):
        if self.kind not in ("checkerboard", "eight_gaussians"):
            raise ConfigError(f"unknown toy distribution {self.kind!r}")


def sample_toy(dist, n, rng):
    """n samples from the toy density as a (n, 2) array."""
    if isinstance(dist, str):
        dist = ToyDistribution(dist)
    if n < 1:
        raise ConfigError("need n >= 1 samples")
    if dist.kind == "checkerboard":
        cells = rng.integers(0, len(CHECKER_ON_CELLS), n)
        offs = rng.random((n, 2))
        corners = np.array(CHECKER_ON_CELLS, dtype=np.float64)[cells]
        return -1.0 + 0.5 * (corners + offs)
    comp = rng.integers(0, 8, n)
    offs = rng.standard_normal((n, 2)) * EIGHT_GAUSSIANS_SIGMA
    # truncate at 3 sigma radially by redrawing
    lim = 3.0 * EIGHT_GAUSSIANS_SIGMA
    bad = np.linalg.norm(offs, axis=1) > lim
    while np.any(bad):
        offs[bad] = rng.standard_normal((int(bad.sum()), 2)) * EIGHT_GAUSSIANS_SIGMA
        bad = np.linalg.norm(offs, axis=1) > lim
    return EIGHT_GAUSSIANS_CENTERS[comp] + offs


def checkerboard_cell(points):
    """Cell indices (floor(2(x+1)), floor(2(y+1))) clipped to the 4x4 grid."""
    idx = np.floor(2.0 * (np.asarray(points) + 1.0)).astype(int)
    return np.clip(idx, 0, 3)


# ---------------------------------------------------------------------------
# Point-reach environment.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointReachEnv:
    start: tuple = (-0.8, 0.0)
    goal: tuple = (0.8, 0.0)
    step_scale: float = 0.1
    success_radius: float = 0.1
    horizon: int = 50
    # obstacle box (xmin, xmax, ymin, ymax); interior is impassable
    obstacle: tuple = (-0.3, 0.3, -0.3, 0.3)

    @property
    def goal_arr(self):
        return np.asarray(self.goal, dtype=np.float64)

    def in_obstacle(self, p):
        p = np.asarray(p, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        xmin, xmax, ymin, ymax = self.obstacle
        return (x > xmin) & (x < xmax) & (y > ymin) & (y < ymax)


def env_step(env, s, a):
    """Deterministic transition for a batch (or single pair) of (s, a).

    Actions are clipped to [-1,1]^2 here (actuator limit; out-of-range
    magnitude is measured upstream by bound_loss).  Moves landing inside
    the obstacle are rejected wholesale.  Reward is 0 within the success
    radius of the goal and -1 otherwise; done flags success.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    a2 = np.atleast_2d(a)
    if s2.shape != a2.shape or s2.shape[1] != 2:
        raise ShapeError(f"env_step shapes s {s.shape}, a {a.shape}")
    a2 = np.clip(a2, -1.0, 1.0)
    nxt = np.clip(s2 + env.step_scale * a2, -1.0, 1.0)
    blocked = env.in_obstacle(nxt)
    nxt = np.where(blocked[:, None], s2, nxt)
    dist = np.linalg.norm(nxt - env.goal_arr, axis=1)
    done = dist < env.success_radius
    r = np.where(done, 0.0, -1.0)
    if single:
        return nxt[0], float(r[0]), bool(done[0])
    return nxt, r, done


def expert_action(env, s, mode):
    """Scripted waypoint controller routing above (+1) or below (-1) the box.

    Stateless: climb to the corridor at y = mode*0.55 while left of the box,
    traverse it, then descend to the goal.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    y_cor = 0.55 * float(mode)
    target = np.empty_like(s)
    climb = (np.abs(s[:, 1] - y_cor) > 0.15) & (s[:, 0] < env.obstacle[0])
    traverse = ~climb & (s[:, 0] < env.obstacle[1] + 0.1)
    target[climb, 0] = s[climb, 0]
    target[climb, 1] = y_cor
    target[traverse, 0] = env.obstacle[1] + 0.2
    target[traverse, 1] = y_cor
    final = ~climb & ~traverse
    target[final] = env.goal_arr
    return np.clip((target - s) / env.step_scale, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Offline dataset.
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    source_seed: int = -1

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise ConfigError("dataset must be non-empty")
        for name in ("actions", "rewards", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"dataset column {name} has wrong length")

    def __len__(self):
        return len(self.states)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def row(self, i):
        return Transition(self.states[i], self.actions[i],
                          float(self.rewards[i]), self.next_states[i],
                          bool(self.dones[i]))


def gen_offline_dataset(env, n_episodes, rng, noise_sigma=0.15,
                        random_frac=0.1):
    """Roll the 50/50 noisy-expert mixture and record all transitions.

    Each step uses the episode's expert with N(0, sigma^2) action noise,
    except a `random_frac` fraction of fully random actions.  Recorded
    actions are clipped to [-1,1]^2.  done marks success only; episodes
    that time out at the horizon simply stop.
    """
    if n_episodes < 1:
        raise ConfigError("need n_episodes >= 1")
    cols = {k: [] for k in ("s", "a", "r", "s2", "d")}
    for _ in range(n_episodes):
        mode = 1.0 if rng.random() < 0.5 else -1.0
        s = np.asarray(env.start, dtype=np.float64)
        for _ in range(env.horizon):
            if rng.random() < random_frac:
                a = rng.uniform(-1.0, 1.0, 2)
            else:
                base = expert_action(env, s, mode)[0]
                a = np.clip(base + noise_sigma * rng.standard_normal(2),
                            -1.0, 1.0)
            s_next, r, done = env_step(env, s, a)
            cols["s"].append(s)
            cols["a"].append(a)
            cols["r"].append(r)
            cols["s2"].append(s_next)
            cols["d"].append(1.0 if done else 0.0)
            s = s_next
            if done:
                break
    return OfflineDataset(
        states=np.array(cols["s"]),
        actions=np.array(cols["a"]),
        rewards=np.array(cols["r"]),
        next_states=np.array(cols["s2"]),
        dones=np.array(cols["d"]),
    )


# ---------------------------------------------------------------------------
# Text serialization: `# mfql-dataset v1 state_dim=<D> action_dim=<A>`
# header, then one CSV row `s...,a...,r,s'...,done` per transition with 17
# significant digits (bit-exact float64 round trip).
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(
    r"^# mfql-dataset v1 state_dim=(\d+) action_dim=(\d+)$"
)


def _fmt(x):
    return "%.17g" % x


def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# mfql-dataset v1 state_dim={ds.state_dim} "
                f"action_dim={ds.action_dim}\n")
        for i in range(len(ds)):
            parts = (
                [_fmt(x) for x in ds.states[i]]
                + [_fmt(x) for x in ds.actions[i]]
                + [_fmt(ds.rewards[i])]
                + [_fmt(x) for x in ds.next_states[i]]
                + [str(int(ds.dones[i]))]
            )
            f.write(",".join(parts) + "\n")


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError("missing header", line=1)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise DataFormatError("missing header", line=1)
    sd, ad = int(m.group(1)), int(m.group(2))
    width = 2 * sd + ad + 2
    rows = []
    for ln, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        parts = text.split(",")
        if len(parts) != width:
            raise DataFormatError(
                f"expected {width} fields, got {len(parts)}", line=ln)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataFormatError(f"bad number ({exc})", line=ln) from exc
    if not rows:
        raise DataFormatError("dataset has no transitions", line=len(lines))
    arr = np.array(rows, dtype=np.float64)
    return OfflineDataset(
        states=arr[:, :sd],
        actions=arr[:, sd:sd + ad],
        rewards=arr[:, sd + ad],
        next_states=arr[:, sd + ad + 1:2 * sd + ad + 1],
        dones=arr[:, -1],
    )
