"""Tabular delayed-observation reinforcement learning with exact belief world models."""

from .actors import (
    ActorAgent,
    ActorSpec,
    Strategy,
    TrainConfig,
    agnostic_pipeline,
    evaluate_actor,
    exact_start_value,
    latent_act,
    solve_extended_optimal,
    solve_latent_optimal,
    solve_memoryless_optimal,
    train_actor_critic_imagination,
    train_for_delay,
)
from .bench import ExperimentConfig, ResultTable, make_env, normalize_return, run_experiment
from .core import (
    PolicyTable,
    TabularMdp,
    TabularPomdp,
    ValueFunction,
    brute_force_return,
    finite_horizon_value,
    policy_evaluation,
    value_iteration,
)
from .delay import (
    DUMMY,
    DelayedPomdp,
    DelayedTrajectory,
    DelayKind,
    DelaySchedule,
    Episode,
    ReplayBuffer,
    collect_buffer,
    delayed_expected_return,
    delayed_rollout,
    extend_mdp,
    shift_back,
)
from .envs import Fig2Params, MaskedObsConfig, fig2_closed_forms, fig2_mdp, masked_pomdp, random_instance, switching_track
from .errors import ConvergenceError, EnumerationLimitError, ModelMismatchError
from .worldmodel import (
    DelayedWorldModel,
    TabularWorldModel,
    WorldModelState,
    belief_update,
    congruence_check,
    fit_tabular_model,
    imagine_step,
    make_delayed,
    perturb_model,
)

__version__ = "0.1.0"
