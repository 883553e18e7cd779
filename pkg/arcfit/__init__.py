from ._version import version

from .errors import ArcfitError
from .kinetics import (
    CellProperties, Direction, StageKinetics, ReactionSystem, ThermalState, ThermalOde,
    AmbientModel, Adiabatic, Oven, TracedAmbient, Ramp, ADIABATIC,
)
from .esdirk import Integrator, Tolerances, Trajectory, integrate
from .trace import ArcTrace, Provenance
from .sensitivity import ParamVector, grad_loss, fd_gradient, gradient_check
from .linfit import StagePartition, StageOrders, initialize
from .trainer import TrainConfig, Trainer
from .simkit import HwsProtocol, simulate_exotherm, simulate_hws, simulate_oven, simulate_arc, synth_trace
from .radial import RadialModel, RadialSolver, simulate_radial
from .config import RunConfig, load_config
from .io import ingest_csv, export_csv, FitReport
