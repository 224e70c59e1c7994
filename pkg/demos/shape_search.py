"""Fit per-step shape parameters on a small Gaussian-data problem.

The data distribution is Gaussian, so the ideal denoiser is known in closed
form and the optimized schedule can be compared with plain Adams.
"""
import numpy as np

from rbfsolver.harness import gaussian_data_problem
from rbfsolver.sampler import ShapeSchedule
from rbfsolver.schedule import LinearLogSNR, build_time_grid
from rbfsolver.shapeopt import SearchSpec, generate_target_set, schedule_mse, search_shape_parameters

prob = gaussian_data_problem()
sched = LinearLogSNR()
targets = generate_target_set(prob.evaluator(), sched, reference_nfe=200, n_pairs=64, seed=0)

for M in (5, 8, 10):
    grid = build_time_grid(sched, M)
    res = search_shape_parameters(prob.evaluator(), grid, SearchSpec(), targets)
    opt = schedule_mse(prob.evaluator(), grid, res.schedule, targets)
    adams = schedule_mse(prob.evaluator(), grid, ShapeSchedule.adams(M), targets)
    fmt = lambda a: " ".join("  A " if np.isinf(v) else (" -- " if np.isnan(v) else f"{v:+.2f}") for v in a)
    print(f"M={M:2d}  optimized MSE {opt:.3e}  Adams MSE {adams:.3e}")
    print(f"       log gamma pred: {fmt(res.schedule.log_gamma_pred)}")
    print(f"       log gamma corr: {fmt(res.schedule.log_gamma_corr)}")
