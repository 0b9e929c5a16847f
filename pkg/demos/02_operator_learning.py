"""Learn the conductivity -> temperature operator without labels.

Every training sample is only a conductivity field. Its latent code is found
by three gradient steps on the discrete PDE loss, starting from zero, and the
network weights are trained on the loss reached after those steps. FEM
solutions are used only to score held-out samples afterwards, including on a
finer mesh the network never saw (zero-shot super-resolution).

The defaults are the desk-scale setting: 21x21 grid, 200 samples, 500
epochs (about 10 minutes on one core). Pass a smaller epoch count to try it
quickly:  python demos/02_operator_learning.py 50
"""
import sys
import time

import numpy as np

from ifol.cli import Checkpoint, save_checkpoint
from ifol.fem import StationaryDiffusion, dirichlet_from_sets
from ifol.field_net import FieldNetConfig
from ifol.learning import TrainConfig, infer, train
from ifol.mesh import generate_grid
from ifol.oracle import error_metrics, newton_solve
from ifol.sampling import FourierSpec, fourier_field, make_dataset

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 500

mesh = generate_grid(2, (21, 21))
problem = StationaryDiffusion()
bcs = (("left", 0, 1.0), ("right", 0, 0.0))
spec = FourierSpec(sigmoid=True)
data = make_dataset("fourier", 220, mesh, spec, seed=1000)
train_set, test_set = data[:200], data[200:]

cfg = TrainConfig(k_encode=3, alpha=1e-2, lr_start=1e-4, lr_end=1e-6, epochs=epochs, batch_size=10,
                  fast_trig=True, seed=0)
net = FieldNetConfig(hidden=(32, 32, 32), omega0=30.0, latent_dim=64)

t0 = time.perf_counter()
params, hist = train(train_set, problem, mesh, cfg, net=net, bcs=bcs,
                     log=lambda s: print(s) if s.split()[1].endswith("0") else None)
print(f"training took {time.perf_counter() - t0:.0f} s")
save_checkpoint("diffusion.ifol", Checkpoint(params, cfg, epochs - 1))

# score on the training resolution ...
bc = dirichlet_from_sets(mesh, bcs)
pred = infer(test_set, params, problem, mesh, cfg, bcs=bcs)
err = [error_metrics(p, newton_solve(problem, mesh, s.c, bc))["rel_l2"] for p, s in zip(pred, test_set)]
print(f"21x21 held-out rel L2: mean {np.mean(err):.4f}, max {np.max(err):.4f}")

# ... and decoded on a 41x41 grid. Encoding still happens on the 21x21 mesh;
# the oracle solves the same continuous conductivity on the fine grid.
fine = generate_grid(2, (41, 41))
bc_fine = dirichlet_from_sets(fine, bcs)
pred = infer(test_set, params, problem, mesh, cfg, mesh_eval=fine, bcs=bcs)
err_f = [error_metrics(p, newton_solve(problem, fine, fourier_field(fine, spec, s.seed), bc_fine))["rel_l2"]
         for p, s in zip(pred, test_set)]
print(f"41x41 held-out rel L2: mean {np.mean(err_f):.4f}")
