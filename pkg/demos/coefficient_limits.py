"""How the RBF coefficient vector moves between its two limits.

Sweeps the shape parameter on a three-node step and prints the distance to
the equal-weight vector (small gamma) and to Adams (large gamma).
"""
import numpy as np

from rbfsolver.basis import NodeSet
from rbfsolver.coeffs import adams_coefficients, equal_coefficients, rbf_coefficients

nodes = NodeSet([0.0, -0.1, -0.2], 0.1)
lo, hi = 0.0, 0.1
adams = adams_coefficients(nodes, lo, hi).values
equal = equal_coefficients(3, lo, hi).values

print(f"{'gamma':>8}  {'c_0':>10} {'c_1':>10} {'c_2':>10}  {'to equal':>9} {'to Adams':>9}")
for gamma in np.geomspace(1e-3, 1e2, 11):
    c = rbf_coefficients(nodes, lo, hi, gamma).values
    print(f"{gamma:8.3g}  {c[0]:10.6f} {c[1]:10.6f} {c[2]:10.6f}"
          f"  {np.abs(c - equal).max():9.2e} {np.abs(c - adams).max():9.2e}")
print("every row sums to", np.exp(hi) - np.exp(lo))
