"""Sensitivity of the mean temperature to the conductivity field.

The adjoint method needs one FEM solve plus one transposed linear solve. The
trained operator gives the same map by differentiating its prediction back
through the encoding steps to the conductivity. No extra solve is needed,
because the conductivity only enters through the PDE loss.

Needs diffusion.ifol from demos/02_operator_learning.py.
"""
import numpy as np

from ifol.cli import load_checkpoint
from ifol.fem import StationaryDiffusion, dirichlet_from_sets
from ifol.mesh import generate_grid
from ifol.oracle import adjoint_sensitivity, ifol_sensitivity, newton_solve
from ifol.sampling import FourierSpec, make_dataset

ck = load_checkpoint("diffusion.ifol")
mesh = generate_grid(2, (21, 21))
problem = StationaryDiffusion()
bcs = (("left", 0, 1.0), ("right", 0, 0.0))
bc = dirichlet_from_sets(mesh, bcs)

for s in make_dataset("fourier", 220, mesh, FourierSpec(sigmoid=True), seed=1000)[200:205]:
    u = newton_solve(problem, mesh, s.c, bc)
    adj = adjoint_sensitivity(problem, mesh, s.c, u, bc)
    net = ifol_sensitivity(s, ck.params, problem, mesh, ck.train, bcs)
    r = np.corrcoef(adj.map, net.map)[0, 1]
    print(f"sample {s.seed}: J_fem={adj.objective:.4f}  J_net={net.objective:.4f}  pearson={r:.3f}")
