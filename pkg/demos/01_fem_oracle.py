"""Nonlinear heat conduction with the built-in Newton solver.

The conductivity k = c (1 + 2 T^4) couples the temperature back into the
material, so the discrete system is nonlinear. The residual is the gradient
of the assembled loss, and the tangent comes from forward-over-reverse
differentiation of the same loss, so Newton should converge quadratically.

Run:  python demos/01_fem_oracle.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from ifol.cli import write_vtk
from ifol.fem import StationaryDiffusion, dirichlet_from_sets, element_work
from ifol.mesh import generate_grid
from ifol.oracle import newton_solve
from ifol.sampling import FourierSpec, fourier_field

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# One unit-square Quad4 at T = 0 is the plain Laplacian: 2/3 on the diagonal,
# -1/6 for edge neighbours, -1/3 across the diagonal.
unit = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
K = element_work(StationaryDiffusion(), unit, np.zeros(4), np.ones(4), want_hess=True).hess
print("unit-square stiffness:\n", np.round(K * 6, 12), "/ 6")

mesh = generate_grid(2, (41, 41))
problem = StationaryDiffusion()
bc = dirichlet_from_sets(mesh, [("left", 0, 1.0), ("right", 0, 0.0)])

# two-phase conductivity from the Fourier sampler
c = fourier_field(mesh, FourierSpec(sigmoid=True), seed=4)
res = newton_solve(problem, mesh, c, bc, full_output=True)
for it, r in enumerate(res.residual_norms):
    print(f"newton {it:2d}  |r| = {r:.3e}")

write_vtk(out / "fem_oracle.vtk", mesh, {"conductivity": c, "temperature": res.u})
print("wrote", out / "fem_oracle.vtk")
