"""One-step MeanFlow generative policies with offline Q-learning."""

from .autodiff import (
    AdamState,
    Dual,
    MlpParams,
    MlpSpec,
    adam_init,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_jvp,
    sinusoidal_embed,
)
from .data_env import (
    OfflineDataset,
    PointReachEnv,
    ToyDistribution,
    Transition,
    env_step,
    expert_action,
    gen_offline_dataset,
    load_dataset,
    sample_toy,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    MfqlError,
    NumericError,
    ShapeError,
)
from .meanflow import (
    COMPLIANT_VARIANTS,
    PATHOLOGICAL_VARIANTS,
    VARIANTS,
    LossWeighting,
    TimeSampler,
    VariantSpec,
    flow_matching_loss,
    get_variant,
    interpolate,
    inv_softsign,
    make_policy,
    mfi_loss,
    mfi_target,
    naive_two_step_action,
    one_step_action,
    policy_action,
    sample_times,
    sample_times_batch,
    softsign,
)
from .metrics import curve_summary, wasserstein2
from .nets import (
    CriticEnsemble,
    PolicyNet,
    TargetCritic,
    critic_forward,
    load_checkpoint,
    make_critic,
    make_target,
    policy_forward,
    policy_jvp,
    polyak_update,
    save_checkpoint,
)
from .qlearning import (
    AlphaScheduler,
    TrainConfig,
    TrainState,
    adaptive_alpha_update,
    actor_loss,
    bound_loss,
    critic_loss,
    init_train_state,
    make_rl_eval_fn,
    read_metrics,
    rollout_eval,
    rollout_stats,
    select_best_of_k,
    train,
    train_step,
    train_toy,
    write_metrics,
)

__version__ = "0.1.0"
