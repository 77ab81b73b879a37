"""Offline RL on the point-reach task with a one-step generative policy.

The storyline, end to end:

  1. generate an offline dataset from a 50/50 mixture of two noisy scripted
     experts that route around the obstacle on opposite sides -- so the
     action distribution is genuinely multimodal, the regime a unimodal
     (e.g. Gaussian) policy head handles badly;
  2. check the multimodality with a probe: at states just left of the
     obstacle, both lateral action signs must carry real mass;
  3. train the one-step policy with the combined objective
     -Q(s, a_pi) + alpha * L_identity  (critic: twin ensemble, Bellman
     targets from best-of-K candidates scored by a Polyak-averaged copy);
  4. evaluate with value-guided sampling: draw K candidate actions, act
     with the critic's argmax, and compare K=5 against K=1.

Desk-scale settings: ~3 minutes on one core.  The packaged `mfql train-rl`
command runs the same loop from a config file.
"""

import numpy as np

from mfql.data_env import PointReachEnv, gen_offline_dataset
from mfql.qlearning import (
    TrainConfig,
    make_rl_eval_fn,
    rollout_stats,
    train,
)

STEPS = 6000
env = PointReachEnv()

# --- 1. the dataset -------------------------------------------------------
ds = gen_offline_dataset(env, 400, np.random.default_rng(42))
print(f"dataset: {len(ds)} transitions from 400 episodes, "
      f"{int(ds.dones.sum())} reached the goal")

# --- 2. multimodality probe ------------------------------------------------
probe = (ds.states[:, 0] <= -0.3) & (np.abs(ds.states[:, 1]) <= 0.15)
lat = ds.actions[probe, 1]
print(f"probe ({probe.sum()} visits in front of the obstacle): "
      f"{np.mean(lat > 0):.0%} go up, {np.mean(lat < 0):.0%} go down")

# --- 3. train --------------------------------------------------------------
cfg = TrainConfig(variant="residual_at", alpha0=10.0, K=5, batch=128,
                  actor_hidden=(32, 32), critic_hidden=(64, 64),
                  actor_lr=3e-4, critic_lr=3e-4, total_steps=STEPS,
                  eval_interval=1000, eval_episodes=50, log_interval=100,
                  seed=0)
state, rows = train(cfg, ds, eval_fn=make_rl_eval_fn(env, 50, cfg.K,
                                                     cfg.seed))
print("\nstep   success  bound_loss  alpha")
for r in rows:
    if "eval_success" in r:
        print(f"{r['step']:>5}  {r['eval_success']:>7.2f}  "
              f"{r['bound_loss']:>10.4f}  {r['alpha']:>5.2f}")

# --- 4. value-guided sampling: K matters -----------------------------------
print("\nfinal policy, success rate by candidate count:")
for k in (1, 5):
    succ, bound = rollout_stats(state.policy, state.critic, env, 200, k,
                                np.random.default_rng([0, 99]))
    print(f"  K={k}: success {succ:.2f}  (bound_loss of raw outputs "
          f"{bound:.4f})")

print("""
Reading the numbers: the policy inherits both corridors from the data; the
critic breaks the tie toward whichever candidate scores higher, so larger K
squeezes extra success out of the same generative head.  bound_loss tracks
how far raw outputs stray outside the [-1,1] actuator box -- the residual
head keeps it near zero because its outputs start on the data manifold.
""")
