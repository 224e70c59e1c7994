"""Gaussian-RBF multistep exponential-integrator samplers for diffusion ODEs."""
from .basis import NodeSet, SingularKernelError, build_kernel_system, lagrange_basis, solve_interpolation_weights
from .coeffs import (
    CoefficientVector,
    Provenance,
    adams_coefficients,
    coefficient_magnitude_ratio,
    equal_coefficients,
    rbf_coefficients,
    unipc_coefficients,
)
from .harness import builtin_problems, convergence_study, reference_solve, run_invariant_suite
from .sampler import Method, ModelEvaluator, ShapeSchedule, SolverConfig, sample
from .schedule import CosineVP, LinearLogSNR, TabulatedSchedule, TimeGrid, build_time_grid
from .shapeopt import SearchSpec, TargetPair, generate_target_set, optimize_shape_parameters

__version__ = "0.1.0"
