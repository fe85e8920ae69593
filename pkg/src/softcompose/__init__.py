"""Exact tabular entropy-regularised RL and value-function composition."""

__version__ = "0.1.0"

from .compose import (  # noqa: E402
    AndBounds, and_value_gap, and_policy_gap, and_bounds, compose_and_average, compose_max,
    compose_or, compose_or_reward, desirability, desirability_residual, renyi_half,
)
from .mdp import (  # noqa: E402
    TabularMdp, TaskLibrary, build_composite_reward_mdp, is_proper, kl_divergence, validate,
)
from .solver import (  # noqa: E402
    SolveResult, SolverDivergenceError, bellman_policy_op, boltzmann_policy, policy_evaluation,
    q_from_v, soft_bellman_op, soft_policy_iteration, soft_q_learning, soft_value_iteration,
    standard_bellman_op, standard_value_iteration,
)
