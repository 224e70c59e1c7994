"""Empirical order of the multistep predictor on a smooth analytic problem.

The Gaussian width is measured in step units, so a fixed log gamma does not
approach a polynomial basis as steps shrink. The RBF rows therefore show
roughly first-order behaviour, which comes from reproducing constants. Adams is
the large-gamma end of the same family and reaches its full order.
"""
from rbfsolver.harness import convergence_study, sin_problem

for method, p, kw in [("euler", 1, {}), ("adams", 2, {}), ("adams", 3, {}),
                      ("rbf", 3, {"log_gamma": 0.0}), ("rbf", 3, {"log_gamma": 0.0, "use_corrector": True})]:
    rep = convergence_study(sin_problem(), method, p, [10, 20, 40, 80, 160], **kw)
    tag = f"{method} p={p}" + (" +corrector" if kw.get("use_corrector") else "")
    errs = "  ".join(f"{e:.1e}" for _, _, e in rep.rows)
    print(f"{tag:22s} slope {rep.slope:5.2f}   errors {errs}")
