"""One-step Allen-Cahn operator rolled out in time.

Training pairs are just previous states drawn from a Gaussian random field.
The PDE loss of one implicit-Euler step supervises the prediction of the
next state. At inference each prediction is fed back as the next input, so
errors can build up over the steps, and the FEM rollout shows how fast.

Run:  python demos/04_allen_cahn_rollout.py [epochs]
"""
import sys

import numpy as np

from ifol.fem import AllenCahn
from ifol.field_net import FieldNetConfig
from ifol.learning import TrainConfig, rollout, train
from ifol.mesh import generate_grid
from ifol.oracle import error_metrics, fem_rollout
from ifol.sampling import GrfSpec, make_dataset

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 300
mesh = generate_grid(2, (21, 21))
# dt < eps^2 keeps every implicit step convex, so the oracle step is unique
problem = AllenCahn(eps=0.2, dt=0.01)
data = make_dataset("grf", 205, mesh, GrfSpec((0.1, 0.4)), seed=500)

cfg = TrainConfig(epochs=epochs, lr_start=1e-4, lr_end=1e-6, batch_size=10, fast_trig=True)
params, _ = train(data[:200], problem, mesh, cfg, net=FieldNetConfig(),
                  log=lambda s: print(s) if s.split()[1].endswith("0") else None)

for s in data[200:]:
    pred = rollout(s.u_prev, params, problem, mesh, 10, cfg).fields
    ref = fem_rollout(problem, mesh, s.u_prev, 10)
    print("rel L2 per step:", " ".join(f"{error_metrics(a, b)['rel_l2']:.3f}" for a, b in zip(pred, ref)))

flat = rollout(np.ones(mesh.n_nodes), params, problem, mesh, 10, cfg).fields[-1]
print(f"all +1 start, max deviation after 10 steps: {np.abs(flat - 1).max():.2e}")
