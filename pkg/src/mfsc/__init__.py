"""Particle simulation of memory mean-field SDEs, reflected advanced BSDEs,
optimal stopping checks and singular-control optimality checks."""

from .grid import (AdvancedSegment, MemorySegment, NonCommensurate, OutOfRange, SingularControl,
                   TimeGrid, advanced_segment, control_eval, make_grid, memory_segment)
from .measures import (AtomicMeasure, FourierWeight, MeasureSegment, QuadratureUnderResolved,
                       law_distance_sq, measure_norm_sq, segment_norm_sq)
from .forward import CoefficientSpec, NonFinite, ParticleEnsemble, simulate
from .rbsde import (BarrierSpec, BarrierViolation, DriverSpec, NoConvergence, RbsdeSolution,
                    h_beta_norm, solution_invariants, solve_picard)
from .stopping import MarkovSpec, StoppingProblem, dp_oracle, stopping_report
from .control import (ControlProblem, MemoryFunctional, NotConcave, ReflectionPolicy,
                      check_necessary, check_sufficient, derivative_table, optimize_threshold,
                      solve_adjoints)

__version__ = "0.1.0"
