"""Adaptive IDA-PBC with an immersion-and-invariance power estimator for a
buck-boost converter feeding a constant power load: models, controller,
estimator, simulators, certificates and a command-line front end."""
from .control import (ControllerGains, GainSynthesisError, PiGains, gains_for, grad_hd, hd,
                      hessian_hd, ida_pbc_duty, k1_interval, k1_lower_bounds, k2_gain,
                      synthesize_gains)
from .estimator import EstimatorState, estimator_init
from .model import (ConverterParams, Equilibrium, ModelDomainError, PiecewiseConstant,
                    PowerSchedule, State, averaged_dynamics, equilibrium_current,
                    equilibrium_duty, switched_dynamics)
from .scenario import Scenario, ScenarioError, load, load_bundled
from .sim import (EventSchedule, ModelValidityError, SimConfig, Trajectory, simulate,
                  simulate_averaged, simulate_switched)

__version__ = "0.1.0"
