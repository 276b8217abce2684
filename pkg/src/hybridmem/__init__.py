"""hybridmem: compartmental hybrid simulation of excitable membranes.

Exact piecewise-deterministic simulation of membrane potential coupled to
stochastic channel populations, the deterministic fluid limit, martingale
and covariance estimators, a Langevin SPDE approximation, and a study CLI
for desk-scale convergence experiments.
"""

__version__ = "0.1.0"

from .errors import (AnalysisError, ConfigError, HybridmemError, InternalError,
                     KineticsError, NumericsError, ResolutionError,
                     SchemeError, ValidationError)
from .model import (ChannelConfiguration, CoordinateField, Partition,
                    SpatialGrid, build_partition_ladder, compartment_average,
                    coordinate_field, counts_from_fractions, jump_event_rates,
                    partition_from_lengths, uniform_partition)
from .kinetics import ChannelKinetics, RateFunction
from .pde import (EllipticOperator, FlowProblem, MembraneState, ReactionTerm,
                  SolverSettings, h1_seminorm, integrate_to, l2_norm, step_flow)
from .pdmp import (HybridPath, HybridState, PathStats, make_rng,
                   sample_jump_time, sample_post_jump, select_jump_event, simulate)
from .limit import (LimitProblem, LimitState, LimitTrajectory,
                    kinetics_vector_field, measure_divergence, solve_limit,
                    step_limit)
from .langevin import (LangevinProblem, LangevinState, NoiseKernel,
                       solve_langevin, step_langevin)
from .martingale import (IsometryReport, MartingalePath, QuadraticForm,
                         TestFunction, build_test_basis, compensator_drift,
                         compensator_drift_enumeration, condition_diagnostics,
                         covariance_matrices, empirical_Gn,
                         integrated_limit_G, ito_isometry_residual, limit_G,
                         martingale_path, replay_path, sine_mode,
                         constant_function, tracked_functions)
from .config import ModelBundle, build_model, config_hash, load_config, validate_config
from .benchmarks import benchmark_config, benchmark_model
from .report import MetricRow, StudyReport, emit_outputs
from .studies import (run_clt_study, run_diagnostics, run_langevin_compare,
                      run_lln_study, run_ito_study, run_study)
