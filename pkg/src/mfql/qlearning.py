"""Offline actor-critic training for one-step policies.

One training step is: (1) critic regression onto the Bellman target built
with best-of-K candidate actions from the one-step policy, scored by the
delayed target critic; (2) actor update minimizing -Q(s, a_pi) plus alpha
times the MeanFlow-identity regression loss; (3) Polyak update of the
target critic; (4) the multiplicative adaptive-alpha rule fed with the
actor's Q loss.  Everything is driven by a single numpy Generator so
seeded runs are bitwise reproducible.
"""

import collections
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import adam_init, adam_step, mlp_backward
from .data_env import env_step, sample_toy
from .errors import ConfigError, DataFormatError, NumericError
from .meanflow import (
    LossWeighting,
    TimeSampler,
    get_variant,
    interpolate,
    make_policy,
    mfi_loss_grad,
    mfi_target,
    policy_action,
    sample_times_batch,
)
from .metrics import wasserstein2
from .nets import (
    critic_forward,
    critic_forward_cached,
    make_critic,
    make_target,
    policy_forward_cached,
    policy_jvp_cached,
    polyak_update,
    save_checkpoint,
)

METRICS_COLUMNS = ("step", "loss_mfi", "loss_q", "loss_critic", "alpha",
                   "bound_loss", "eval_success", "eval_w2")


@dataclass
class TrainConfig:
    variant: str = "residual_at"
    alpha0: float = 10.0
    K: int = 5
    gamma: float = 0.99
    tau: float = 0.005
    batch: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    grad_clip: float = 1.0
    sampler: TimeSampler = field(default_factory=TimeSampler)
    weighting: LossWeighting = field(default_factory=LossWeighting)
    total_steps: int = 100000
    eval_interval: int = 5000
    eval_episodes: int = 50
    log_interval: int = 100
    alpha_interval: int = 2000
    alpha_window: int = 20
    alpha_hi: float = 5.0
    alpha_lo: float = 0.2
    alpha_up: float = 1.2
    alpha_down: float = 0.8
    seed: int = 0
    actor_hidden: tuple = (256, 256, 256)
    critic_hidden: tuple = (512, 512, 512, 512)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0,1)")
        if min(self.actor_lr, self.critic_lr, self.alpha0, self.tau) <= 0:
            raise ConfigError("rates and alpha0 must be > 0")
        if self.batch < 1 or self.total_steps < 0:
            raise ConfigError("batch must be >= 1 and total_steps >= 0")


@dataclass
class AlphaScheduler:
    """Multiplicative controller for the behaviour-cloning weight.

    Every `interval` calls the incoming Q loss is compared against the mean
    of the previously recorded window: alpha is scaled by `up` when the loss
    exceeds hi*mean, by `down` when it falls below lo*mean.  Values are
    recorded after the comparison, so the window never contains the value
    being judged.
    """

    alpha: float
    interval: int = 2000
    window: int = 20
    hi: float = 5.0
    lo: float = 0.2
    up: float = 1.2
    down: float = 0.8
    calls: int = 0
    history: collections.deque = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must start positive")
        if self.history is None:
            self.history = collections.deque(maxlen=self.window)


def adaptive_alpha_update(sched, l_q):
    l_q = float(l_q)
    if not np.isfinite(l_q):
        raise NumericError("non-finite Q loss fed to alpha scheduler")
    sched.calls += 1
    if sched.interval > 0 and sched.calls % sched.interval == 0 and sched.history:
        m = float(np.mean(sched.history))
        if l_q > sched.hi * m:
            sched.alpha *= sched.up
        elif l_q < sched.lo * m:
            sched.alpha *= sched.down
    sched.history.append(l_q)
    return sched


def bound_loss(actions):
    """Mean overshoot of |action| beyond 1, over all entries."""
    a = np.asarray(actions, dtype=np.float64)
    return float(np.mean(np.maximum(np.abs(a) - 1.0, 0.0)))


def select_best_of_k(policy, critic, s, k, rng):
    """Draw K one-step candidates per state, keep the critic argmax.

    Ties break toward the lowest candidate index (argmax's first hit).
    """
    if k < 1:
        raise ConfigError("K must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    n, a_dim = s.shape[0], policy.action_dim
    e = rng.standard_normal((n, k, a_dim))
    s_rep = np.repeat(s, k, axis=0)
    cand = policy_action(policy, s_rep, e.reshape(n * k, a_dim))
    _, q = critic_forward(critic, s_rep, cand)
    idx = q.reshape(n, k).argmax(axis=1)
    return cand.reshape(n, k, a_dim)[np.arange(n), idx]


@dataclass
class TrainState:
    config: TrainConfig
    policy: object
    critic: object
    target: object
    actor_opt: object
    critic_opt: object
    sched: AlphaScheduler
    rng: np.random.Generator
    step: int = 0


def init_train_state(config, state_dim, action_dim):
    policy = make_policy(config.variant, state_dim, action_dim,
                         config.actor_hidden, seed=[config.seed, 1])
    critic = make_critic(state_dim, action_dim, config.critic_hidden,
                         seed=config.seed)
    target = make_target(critic, config.tau)
    sched = AlphaScheduler(
        alpha=config.alpha0, interval=config.alpha_interval,
        window=config.alpha_window, hi=config.alpha_hi, lo=config.alpha_lo,
        up=config.alpha_up, down=config.alpha_down)
    return TrainState(
        config=config,
        policy=policy,
        critic=critic,
        target=target,
        actor_opt=adam_init(policy.tensors(), config.actor_lr),
        critic_opt=adam_init(critic.tensors(), config.critic_lr),
        sched=sched,
        rng=np.random.default_rng([config.seed, 3]),
    )


def critic_loss(state, batch):
    """Bellman regression loss and gradients w.r.t. critic parameters only.

    Candidates for the target action come from the online policy and are
    scored by the target critic, which also provides the target value
    y = r + gamma * (1 - done) * Q_bar(s', a'); y is a constant in the
    backward pass.
    """
    s, a, r, s2, done = batch
    cfg = state.config
    a2 = select_best_of_k(state.policy, state.target.ensemble, s2, cfg.K,
                          state.rng)
    _, q2 = critic_forward(state.target.ensemble, s2, a2)
    y = r + cfg.gamma * (1.0 - done) * q2
    if not np.all(np.isfinite(y)):
        raise NumericError(f"step {state.step}: non-finite Bellman target")
    per, caches = critic_forward_cached(state.critic, s, a)
    resid = per - y[:, None]
    n, m = resid.shape
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise NumericError(f"step {state.step}: non-finite critic loss")
    dq = (2.0 / (n * m)) * resid
    grads = []
    for j, (member, cache) in enumerate(zip(state.critic.members, caches)):
        g, _ = mlp_backward(member, cache, dq[:, j:j + 1])
        grads.extend(g.tensors())
    return loss, grads


def actor_loss(state, batch):
    """Combined actor objective L_Q + alpha * L_MFI and its policy gradients.

    The MFI part regresses the dual-number output onto the variant target
    (a stop-gradient constant).  The Q part pushes a single fresh one-step
    sample a_pi uphill on the frozen critic's aggregate.
    """
    s, a_data = batch[0], batch[1]
    cfg = state.config
    policy = state.policy
    spec = get_variant(policy.variant)
    n, a_dim = a_data.shape

    e1 = state.rng.standard_normal((n, a_dim))
    b, t = sample_times_batch(cfg.sampler, state.rng, n)
    a_t, v = interpolate(a_data, e1, t)
    g_pred, dgdt, jvp_cache = policy_jvp_cached(policy, s, a_t, b, t, v)
    g_tgt = mfi_target(spec, a_data, e1, a_t, v, b, t, dgdt)
    l_mfi, dmfi = mfi_loss_grad(g_pred, g_tgt, cfg.weighting)
    g_mfi, _ = mlp_backward(policy.mlp, jvp_cache, dmfi)

    e2 = state.rng.standard_normal((n, a_dim))
    g_out, fwd_cache = policy_forward_cached(policy, s, e2, 0.0, 1.0)
    a_pi = spec.inference(e2, g_out)
    per, ccaches = critic_forward_cached(state.critic, s, a_pi)
    n_members = len(state.critic.members)
    l_q = -float(per.mean())
    if not np.isfinite(l_q) or not np.isfinite(l_mfi):
        raise NumericError(f"step {state.step}: non-finite actor loss")
    dl_da = np.zeros_like(a_pi)
    dy = np.full((n, 1), -1.0 / (n * n_members))
    for member, cache in zip(state.critic.members, ccaches):
        _, dx = mlp_backward(member, cache, dy)
        dl_da += dx[:, state.critic.state_dim:]
    g_q, _ = mlp_backward(policy.mlp, fwd_cache, spec.inference_dg * dl_da)

    alpha = state.sched.alpha
    grads = [gq + alpha * gm for gq, gm in
             zip(g_q.tensors(), g_mfi.tensors())]
    total = l_q + alpha * l_mfi
    parts = {"loss_q": l_q, "loss_mfi": l_mfi,
             "bound_loss": bound_loss(a_pi)}
    return total, grads, parts


def train_step(state, batch):
    cfg = state.config
    closs, cgrads = critic_loss(state, batch)
    adam_step(state.critic_opt, state.critic.tensors(), cgrads, cfg.grad_clip)
    _, agrads, parts = actor_loss(state, batch)
    adam_step(state.actor_opt, state.policy.tensors(), agrads, cfg.grad_clip)
    polyak_update(state.target, state.critic, cfg.tau)
    adaptive_alpha_update(state.sched, parts["loss_q"])
    state.step += 1
    row = {
        "step": state.step,
        "loss_mfi": parts["loss_mfi"],
        "loss_q": parts["loss_q"],
        "loss_critic": closs,
        "alpha": state.sched.alpha,
        "bound_loss": parts["bound_loss"],
    }
    return state, row


def train(config, dataset, out_dir=None, eval_fn=None):
    """Run the full loop with uniform-with-replacement batches.

    eval_fn(state, step) -> dict of extra metric columns is invoked every
    eval_interval steps (and at the final step).  Writes metrics.csv and
    model.ckpt into out_dir when given; on a numeric failure the loop stops
    and the last good parameters are still written before the error is
    re-raised.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    state = init_train_state(config, dataset.state_dim, dataset.action_dim)
    rows = []
    try:
        for step in range(1, config.total_steps + 1):
            idx = state.rng.integers(0, len(dataset), config.batch)
            batch = (dataset.states[idx], dataset.actions[idx],
                     dataset.rewards[idx], dataset.next_states[idx],
                     dataset.dones[idx])
            state, row = train_step(state, batch)
            last = step == config.total_steps
            want_eval = eval_fn is not None and (
                step % config.eval_interval == 0 or last)
            if want_eval:
                row.update(eval_fn(state, step))
            if want_eval or step % config.log_interval == 0 or last:
                rows.append(row)
    except NumericError:
        _write_train_artifacts(state, rows, out_dir)
        raise
    _write_train_artifacts(state, rows, out_dir)
    return state, rows


def _write_train_artifacts(state, rows, out_dir):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), state.policy,
                    state.critic, state.target,
                    extras={"alpha": state.sched.alpha, "step": state.step})


# ---------------------------------------------------------------------------
# Evaluation rollouts.
# ---------------------------------------------------------------------------

def rollout_eval(policy, critic, env, episodes, k, rng):
    """Fraction of episodes that reach the goal under best-of-K control."""
    success, _ = rollout_stats(policy, critic, env, episodes, k, rng)
    return success


def rollout_stats(policy, critic, env, episodes, k, rng):
    """(success_rate, bound_loss of the raw selected actions)."""
    if episodes < 1:
        raise ConfigError("need episodes >= 1")
    s = np.tile(np.asarray(env.start, dtype=np.float64), (episodes, 1))
    alive = np.ones(episodes, dtype=bool)
    succeeded = np.zeros(episodes, dtype=bool)
    excess = 0.0
    n_entries = 0
    for _ in range(env.horizon):
        if not alive.any():
            break
        a = select_best_of_k(policy, critic, s, k, rng)
        live_a = a[alive]
        excess += float(np.sum(np.maximum(np.abs(live_a) - 1.0, 0.0)))
        n_entries += live_a.size
        s2, _, done = env_step(env, s, a)
        succeeded |= alive & done
        s = np.where(alive[:, None], s2, s)
        alive &= ~done
    bound = excess / n_entries if n_entries else 0.0
    return float(succeeded.mean()), bound


def make_rl_eval_fn(env, episodes, k, seed):
    """Periodic-eval hook: success rate from a train-independent RNG."""
    def eval_fn(state, step):
        rng = np.random.default_rng([seed, 9, step])
        return {"eval_success": rollout_eval(
            state.policy, state.critic, env, episodes, k, rng)}
    return eval_fn


# ---------------------------------------------------------------------------
# Unconditional toy training (MFI loss only, no critic).
# ---------------------------------------------------------------------------

TOY_CHECKPOINT_STEPS = (0, 10000, 20000, 30000)


def train_toy(variant, dist, steps, batch=256, lr=3e-4, seed=0,
              sampler=None, weighting=None, hidden=(256, 256, 256),
              grad_clip=1.0, eval_samples=512, log_interval=100,
              out_dir=None):
    """Train the one-step generative head on a 2-D toy density.

    The state input is a fixed zero vector.  Samples are dumped and W2
    against fresh ground truth is logged at steps {0, 10k, 20k, 30k} (close
    to the training budget) and at the final step.  Returns
    (policy, metrics rows, final W2).
    """
    sampler = sampler or TimeSampler("continuous")
    weighting = weighting or LossWeighting()
    policy = make_policy(variant, 1, 2, hidden, seed=[seed, 1])
    opt = adam_init(policy.tensors(), lr)
    rng = np.random.default_rng([seed, 2])
    marks = sorted({c for c in TOY_CHECKPOINT_STEPS if c <= steps} | {steps})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    w2 = None

    def evaluate(step):
        e = np.random.default_rng([seed, 5, step]).standard_normal(
            (eval_samples, 2))
        samples = policy_action(policy, np.zeros((eval_samples, 1)), e)
        truth = sample_toy(dist, eval_samples,
                           np.random.default_rng([seed, 6, step]))
        if out_dir is not None:
            dump = os.path.join(out_dir, f"samples_step{step}.csv")
            with open(dump, "w", encoding="utf-8") as f:
                for p in samples:
                    f.write(",".join("%.17g" % x for x in p) + "\n")
        return wasserstein2(samples, truth), bound_loss(samples)

    def add_row(row):
        if rows and rows[-1]["step"] == row["step"]:
            rows[-1].update(row)
        else:
            rows.append(row)

    for step in range(1, steps + 1):
        if step - 1 in marks:
            w2, bl = evaluate(step - 1)
            add_row({"step": step - 1, "eval_w2": w2, "bound_loss": bl})
        a = sample_toy(dist, batch, rng)
        e = rng.standard_normal((batch, 2))
        b, t = sample_times_batch(sampler, rng, batch)
        a_t, v = interpolate(a, e, t)
        g_pred, dgdt, cache = policy_jvp_cached(
            policy, np.zeros((batch, 1)), a_t, b, t, v)
        g_tgt = mfi_target(variant, a, e, a_t, v, b, t, dgdt)
        loss, dl = mfi_loss_grad(g_pred, g_tgt, weighting)
        grads, _ = mlp_backward(policy.mlp, cache, dl)
        adam_step(opt, policy.tensors(), grads.tensors(), grad_clip)
        if step % log_interval == 0:
            add_row({"step": step, "loss_mfi": loss})
    w2, bl = evaluate(steps)
    add_row({"step": steps, "eval_w2": w2, "bound_loss": bl})
    if out_dir is not None:
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), policy,
                        extras={"step": steps})
    return policy, rows, w2


# ---------------------------------------------------------------------------
# Metrics CSV.
# ---------------------------------------------------------------------------

def _fmt_cell(key, value):
    if value is None:
        return ""
    if key == "step":
        return str(int(value))
    return repr(float(value))


def write_metrics(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(c, row.get(c))
                             for c in METRICS_COLUMNS) + "\n")


def read_metrics(path):
    """Rows as dicts of strings keyed by column; empty cells stay ''."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != ",".join(METRICS_COLUMNS):
        raise DataFormatError(f"{path}: bad metrics header", line=1)
    rows = []
    for ln, text in enumerate(lines[1:], start=2):
        parts = text.split(",")
        if len(parts) != len(METRICS_COLUMNS):
            raise DataFormatError(f"{path}: wrong field count", line=ln)
        rows.append(dict(zip(METRICS_COLUMNS, parts)))
    return rows
