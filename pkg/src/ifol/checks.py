"""Finite-difference verification suites.

Each check returns a :class:`CheckResult`; ``run_all`` is what ``ifol
gradcheck`` prints. Errors are relative 2-norms ``|a - b| / |b|``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .fem import (AllenCahn, Hyperelastic, LinearElasticity, PdeProblem, StationaryDiffusion, TransientThermal,
                  assemble, dirichlet_from_sets)
from .field_net import FieldNetConfig, init_params
from .learning import Sample, TrainConfig, _latent_steps, make_loss
from .mesh import Mesh, generate_grid
from . import autodiff as ad
from .oracle import NewtonConfig, adjoint_sensitivity, integration_weights, newton_solve

__all__ = ["CheckResult", "rel_err", "default_problems", "random_inputs", "check_loss_gradient",
           "check_meta_gradient", "check_adjoint", "run_all"]


class CheckResult(NamedTuple):
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44s} err={self.error:.3e}  tol={self.tol:.0e}"


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (nb if nb > 0 else 1.0))


def default_problems() -> list[PdeProblem]:
    return [LinearElasticity(), Hyperelastic(), StationaryDiffusion(), TransientThermal(), AllenCahn()]


def random_inputs(problem: PdeProblem, mesh: Mesh, rng: np.random.Generator):
    """``(u, c, u_prev)`` in the regime where every energy is smooth."""
    n_dof = mesh.n_nodes * problem.n_components(mesh.dim)
    # small displacements keep det F well away from zero
    scale = 0.05 if problem.kind in ("linear_elasticity", "hyperelastic") else 0.5
    u = scale * rng.standard_normal(n_dof)
    c = rng.uniform(0.5, 1.5, mesh.n_nodes)
    up = 0.5 * rng.standard_normal(n_dof) if problem.transient else None
    return u, c, up


def check_loss_gradient(problem: PdeProblem, mesh: Mesh, seed: int, h: float = 1e-5):
    """Assembled gradient vs central FD of the loss, and tangent vs FD of the gradient."""
    u, c, up = random_inputs(problem, mesh, np.random.default_rng(seed))
    work = assemble(problem, mesh, u, c, up, want="tangent")
    n = u.size
    g_fd = np.empty(n)
    K_fd = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        lp = assemble(problem, mesh, u + e, c, up, want="loss").loss
        lm = assemble(problem, mesh, u - e, c, up, want="loss").loss
        g_fd[i] = (lp - lm) / (2 * h)
        gp = assemble(problem, mesh, u + e, c, up, want="grad").grad
        gm = assemble(problem, mesh, u - e, c, up, want="grad").grad
        K_fd[:, i] = (gp - gm) / (2 * h)
    return rel_err(work.grad, g_fd), rel_err(work.tangent.toarray(), K_fd)


def check_meta_gradient(k_encode: int, seed: int = 0, h: float = 1e-6) -> float:
    """Unrolled outer gradient vs FD of the whole encode-then-loss map.

    One Quad4 element, a width-4 network with a 2-entry latent code, stationary
    nonlinear diffusion with the left edge held at 1.
    """
    mesh = generate_grid(2, (2, 2))
    problem = StationaryDiffusion()
    net = FieldNetConfig(hidden=(4,), latent_dim=2)
    params = init_params(net, seed, mesh.bounds())
    rng = np.random.default_rng(seed)
    sample = Sample(rng.uniform(0.5, 1.5, mesh.n_nodes))
    bcs = (("left", 0, 1.0),)
    cfg = TrainConfig(k_encode=k_encode, alpha=0.1)
    loss = make_loss(params, problem, mesh, [sample], bcs)
    l0 = np.zeros((1, net.latent_dim))
    res = ad.unrolled_grad(loss, [params.flat], l0, cfg.k_encode, cfg.alpha)

    def composite(theta):
        lk = _latent_steps(loss, theta, l0, cfg.k_encode, cfg.alpha)
        return float(ad.primal(loss(theta, lk)))

    theta = params.flat
    fd = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        fd[i] = (composite(theta + e) - composite(theta - e)) / (2 * h)
    return rel_err(res.grads[0], fd)


def check_adjoint(problem: PdeProblem, seed: int = 0, h: float = 1e-6) -> float:
    """Adjoint ``dJ/dc`` vs FD re-solves on a 3x3-node grid (left = 1, right = 0)."""
    mesh = generate_grid(2, (3, 3))
    comp = problem.n_components(mesh.dim)
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.5, 1.5, mesh.n_nodes)
    up = 0.5 * rng.standard_normal(mesh.n_nodes * comp) if problem.transient else None
    spec = dirichlet_from_sets(mesh, [("left", i, 1.0 if i == 0 else 0.0) for i in range(comp)]
                               + [("right", i, 0.0) for i in range(comp)])
    ncfg = NewtonConfig(tol_residual=1e-12, max_iters=40)
    u = newton_solve(problem, mesh, c, spec, cfg=ncfg, u_prev=up)
    sens = adjoint_sensitivity(problem, mesh, c, u, spec, up)
    fd = np.empty(mesh.n_nodes)
    wts = integration_weights(mesh)
    for i in range(mesh.n_nodes):
        e = np.zeros(mesh.n_nodes)
        e[i] = h
        jp = wts @ newton_solve(problem, mesh, c + e, spec, u0=u, cfg=ncfg, u_prev=up)[0::comp]
        jm = wts @ newton_solve(problem, mesh, c - e, spec, u0=u, cfg=ncfg, u_prev=up)[0::comp]
        fd[i] = (jp - jm) / (2 * h)
    return rel_err(sens.map, fd)


def run_all(seeds: int = 20) -> list[CheckResult]:
    mesh = generate_grid(2, (3, 3))
    out = []
    for p in default_problems():
        errs = [check_loss_gradient(p, mesh, s) for s in range(seeds)]
        out.append(CheckResult(f"loss gradient [{p.kind}]", max(e[0] for e in errs), 1e-6))
        out.append(CheckResult(f"tangent [{p.kind}]", max(e[1] for e in errs), 1e-5))
    for k in (1, 2, 3):
        out.append(CheckResult(f"meta-gradient K={k}", check_meta_gradient(k), 1e-4))
    for p in (StationaryDiffusion(), StationaryDiffusion(detach_residual=True), TransientThermal(),
              LinearElasticity()):
        tag = p.kind + (" detached" if getattr(p, "detach_residual", False) else "")
        out.append(CheckResult(f"adjoint vs FD [{tag}]", check_adjoint(p), 1e-3))
    return out
