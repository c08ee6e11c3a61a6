"""Maximum-likelihood inverse RL alignment on enumerable sequence models."""

from .seqcore import (
    Instance,
    PromptSet,
    RewardModel,
    ScoreTable,
    SequencePolicy,
    enumerate_completions,
    logprob,
    reward_score,
    sample,
)
from .objectives import (
    DemonstrationDataset,
    PreferenceDataset,
    bilevel_surrogate,
    btl_loss,
    dpo_loss,
    exact_likelihood,
    kl_rl_objective,
    optimal_policy,
    sft_loss,
    single_level_surrogate,
    stochastic_gradient,
    surrogate_gradient,
)
from .irl import IrlConfig, irl_align
from .baselines import SftConfig, SpinConfig, sft_train, spin_train
from .workbench import InstanceSpec, make_instance, sample_demonstrations

__version__ = "0.1.0"
