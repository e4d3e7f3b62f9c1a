"""Cost-matching parameter learning for a centroidal-model locomotion MPC."""

from .bench import compare_controllers, recovery_metrics, value_matching_eval
from .config import RunConfig
from .constraints import ConstraintConfig, penalty, project_input, residuals
from .estimator import CostMatchingEstimator
from .exceptions import (ConfigError, CostMatchError, Diverged, EulerSingular, InsufficientData,
                         NonFinite, NumericalError, SolveFailed, WindowOutOfRange)
from .learner import LearnConfig, TrainDiagnostics, loss_gradient, matching_loss, sgd_step, train_round
from .model import DynParams, GaitSchedule, step
from .mpc import MPCController, SolverConfig, generate_references, solve
from .objective import CostParams, stage_cost, terminal_cost
from .plant import DisturbanceProfile, PlantConfig, Pulse, collect_rollout, load_trajectory, save_trajectory
from .valuation import Dataset, ParamVector, Segment, Trajectory, q_meas_all, q_mpc, q_mpc_gradient

__version__ = "0.1.0"
