"""Distribution-grid optimal power flow toolkit.

Radial feeder models, a fixed-point power flow, linearized sensitivities,
central and distributed DOPF solvers and a deterministic co-simulation loop.
"""

from importlib.metadata import PackageNotFoundError, version

from .controls import ControlVector, control_bounds, nominal_controls
from .exceptions import DOPFError
from .grid_model import NetworkModel, build_admittance, build_incidence, load_network, parse_network
from .linearization import LinearPowerFlow, SensitivityModel, build_sensitivities, linearize_network, predict_state
from .power_flow import PFConfig, PowerFlowState, solve_controls, solve_fixed_point

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "ControlVector", "DOPFError", "LinearPowerFlow", "NetworkModel", "PFConfig", "PowerFlowState",
    "SensitivityModel", "build_admittance", "build_incidence", "build_sensitivities", "control_bounds",
    "linearize_network", "load_network", "nominal_controls", "parse_network", "predict_state", "solve_controls",
    "solve_fixed_point", "__version__",
]
