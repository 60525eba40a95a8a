"""Monte Carlo laboratory for the Allen-Cahn equation with mollified white-noise data."""
from .grid import (GridSpec, MollifierSpec, RngStream, ScalarField, convolve,
                   covariance_init, initial_condition, inner_product,
                   make_mollifier, sample_white_noise)
from .propagators import (HeatSymbol, StepScheme, Trajectory, cubic_flow,
                          heat_propagate, linearized_solve, mild_residual,
                          solve, strang_step)
from .rescaling import (SimParams, TestFunction, effective_coupling,
                        heat_of_initial, observable, picard_N, picard_X,
                        simulate_rescaled)
from .ensemble import EnsembleAccumulator, Estimate, Observable, ensemble_run

__version__ = "0.1.0"
