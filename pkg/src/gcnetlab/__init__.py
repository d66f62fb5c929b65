"""Training and evaluation lab for neural guidance & control policies."""

__version__ = "0.1.0"

from .dynamics import (
    ControlCommand,
    ScenarioConfig,
    SpacecraftState,
    UnitScales,
    eom_inertial,
    eom_rotating,
    inertial_to_rotating,
    load_scenario,
    nondimensionalize,
    preset,
    redimensionalize,
    rotating_to_inertial,
)
from .propagation import (
    EventSpec,
    TrajectoryRecord,
    check_convergence,
    propagate,
)
from .network import MlpSpec, forward, backward, init_params, map_head
from .expert import Costate, ExtremalSolution, ExpertDataset, bgoe_generate, pmp_control, solve_nominal
from .lambert import LambertSolution, solve_lambert
from .bc import BcConfig, cosine_loss, fuel_loss, train_bc
from .rl import Episode, PpoConfig, reward_time, reward_fuel, rollout_episode, train_rl, truncate_and_redistribute
from .evaluation import ErrorModel, McReport, evaluate_nominal, run_mc
