"""Reference FEM solutions, sensitivities and error metrics.

``newton_solve`` drives the assembled residual (the loss gradient) to zero;
``adjoint_sensitivity`` differentiates ``J = int u dOmega`` of that solution
with respect to the nodal control field; ``ifol_sensitivity`` differentiates
the same functional of a trained network's prediction through its encoding
steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad
from .fem import DirichletSpec, PdeProblem, apply_dirichlet, assemble, batch_loss, discretize
from .field_net import FieldNetParams
from .learning import Sample, TrainConfig, make_field, make_loss
from .mesh import Mesh

__all__ = ["NewtonConfig", "NewtonResult", "SensitivityResult", "ConvergenceError", "SingularMatrixError",
           "newton_solve", "linear_solve", "adjoint_sensitivity", "ifol_sensitivity", "error_metrics",
           "fem_rollout", "integration_weights"]


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NewtonConfig:
    tol_residual: float = 1e-10
    max_iters: int = 25
    line_search: bool = True

    def __post_init__(self):
        if not self.tol_residual > 0 or self.max_iters < 1:
            raise ValueError("need tol_residual > 0 and max_iters >= 1")


class NewtonResult(NamedTuple):
    u: np.ndarray
    iterations: int
    residual_norms: list


class SensitivityResult(NamedTuple):
    objective: float
    map: np.ndarray
    n_solves: int = 0


_PIVOT_TOL = 1e-14
_DENSE_MAX = 4000


def linear_solve(A, b, method: str = "lu") -> np.ndarray:
    """Solve ``A x = b``.

    ``"lu"``: LU with partial pivoting (dense up to a few thousand unknowns,
    sparse SuperLU above). A pivot smaller than 1e-14 times the largest one
    raises :class:`SingularMatrixError`. ``"cg"``: conjugate gradients for
    symmetric positive-definite systems.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"matrix shape {A.shape} does not match right-hand side of length {n}")
    if method == "cg":
        x, info = spla.cg(sp.csr_matrix(A), b, rtol=1e-13, atol=0.0, maxiter=10 * n)
        if info != 0:
            raise SingularMatrixError(f"conjugate gradients did not converge (info={info})")
        return x
    if method != "lu":
        raise ValueError(f"unknown method {method!r}")
    if sp.issparse(A) and n > _DENSE_MAX:
        try:
            lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        piv = np.abs(lu.U.diagonal())
        solve = lu.solve
    else:
        dense = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        lu_piv = sla.lu_factor(dense, check_finite=True)
        piv = np.abs(np.diag(lu_piv[0]))
        solve = lambda r: sla.lu_solve(lu_piv, r)  # noqa: E731
    if piv.size and piv.min() <= _PIVOT_TOL * max(piv.max(), np.finfo(float).tiny):
        raise SingularMatrixError(f"matrix is singular to working precision (pivot ratio {piv.min() / piv.max():.2e})")
    x = solve(b)
    r = b - A @ x
    if np.linalg.norm(r) > 1e-12 * np.linalg.norm(b):
        x = x + solve(r)  # one step of iterative refinement
    return x


def _residual_norm(problem, mesh, u, c, u_prev, dirichlet):
    return float(np.linalg.norm(assemble(problem, mesh, u, c, u_prev, dirichlet, want="grad").grad))


def newton_solve(problem: PdeProblem, mesh: Mesh, c, dirichlet: DirichletSpec | None = None, u0=None,
                 cfg: NewtonConfig = NewtonConfig(), u_prev=None, full_output: bool = False):
    """Newton iteration on the condensed residual.

    The initial guess is ``u0``, else ``u_prev`` for transient problems, else
    zeros; Dirichlet values are imposed on it first. With ``line_search`` each
    step is halved (at most 8 times) until the residual norm decreases.
    """
    comp = problem.n_components(mesh.dim)
    n_dof = mesh.n_nodes * comp
    dirichlet = DirichletSpec() if dirichlet is None else dirichlet
    if u0 is not None:
        u = np.asarray(u0, dtype=float).copy()
    elif problem.transient and u_prev is not None:
        u = np.asarray(u_prev, dtype=float).copy()
    else:
        u = np.zeros(n_dof)
    u = apply_dirichlet(u, dirichlet, comp)
    norms = []
    for it in range(cfg.max_iters + 1):
        work = assemble(problem, mesh, u, c, u_prev, dirichlet, want="tangent")
        norm = float(np.linalg.norm(work.residual))
        norms.append(norm)
        if not np.isfinite(norm):
            raise ConvergenceError(f"non-finite residual at iteration {it}", norm)
        if norm < cfg.tol_residual:
            return NewtonResult(u, it, norms) if full_output else u
        if it == cfg.max_iters:
            break
        du = linear_solve(work.tangent, -work.residual)
        step = 1.0
        if cfg.line_search:
            for _ in range(8):
                try:
                    trial = _residual_norm(problem, mesh, u + step * du, c, u_prev, dirichlet)
                except (FloatingPointError, ValueError):
                    trial = np.inf
                if trial < norm:
                    break
                step *= 0.5
        u = u + step * du
    raise ConvergenceError(f"Newton did not converge in {cfg.max_iters} iterations (|r| = {norms[-1]:.3e})",
                           norms[-1])


def integration_weights(mesh: Mesh) -> np.ndarray:
    """``w`` with ``w @ u = int u dOmega`` under the element quadrature."""
    return np.array(discretize(mesh).node_weights)


def _objective_weights(mesh, comp, component):
    w = np.zeros(mesh.n_nodes * comp)
    w[component::comp] = integration_weights(mesh)
    return w


def adjoint_sensitivity(problem: PdeProblem, mesh: Mesh, c, u_solved, dirichlet: DirichletSpec | None = None,
                        u_prev=None, component: int = 0) -> SensitivityResult:
    """``dJ/dc`` for ``J = int u_component dOmega`` with one transposed solve.

    ``(dr/du)^T lam = dJ/du`` and ``dJ/dc = -lam^T dr/dc``. The product
    ``lam^T dr/dc`` is a mixed second derivative of the assembled loss,
    obtained as one forward-over-reverse sweep.
    """
    comp = problem.n_components(mesh.dim)
    dirichlet = DirichletSpec() if dirichlet is None else dirichlet
    c = np.asarray(c, dtype=float)
    u = np.asarray(u_solved, dtype=float)
    w = _objective_weights(mesh, comp, component)
    J = float(w @ u)
    work = assemble(problem, mesh, u, c, u_prev, dirichlet, want="tangent")
    rhs = w.copy()
    rhs[dirichlet.dofs(comp)] = 0.0  # prescribed values do not depend on c
    lam = linear_solve(work.tangent.T.tocsr(), rhs)
    up = None if u_prev is None else np.asarray(u_prev, dtype=float)[None]
    # with a truncated residual the material law must stay constant in the
    # forward sweep too, otherwise the mixed derivative is taken the wrong way round
    f = lambda uu, cc: batch_loss(problem, mesh, uu, cc, up, freeze="both")  # noqa: E731
    _, _, hv = ad.grad_and_hvp(f, (u[None], c[None]), (lam[None], None))
    return SensitivityResult(J, -hv[1][0], 1)


def ifol_sensitivity(sample: Sample, params: FieldNetParams, problem: PdeProblem, mesh: Mesh, cfg: TrainConfig,
                     bcs=(), component: int = 0) -> SensitivityResult:
    """``dJ/dc`` of the network prediction, through the ``k_encode`` latent steps.

    ``c`` enters only through the PDE loss that drives encoding, so the
    derivative flows back along the latent trajectory; no FEM solve is made.
    """
    if getattr(problem, "detach_residual", False) and cfg.k_encode > 0:
        raise NotImplementedError("sensitivities through encoding need the full-derivative loss "
                                  "(detach_residual=False)")
    comp = problem.n_components(mesh.dim)
    w = _objective_weights(mesh, comp, component)
    loss = make_loss(params, problem, mesh, [sample], bcs)
    field_fn, _ = make_field(params, problem, mesh, [sample], bcs)
    theta = params.flat
    res = ad.unrolled_grad(
        lambda cc, lat: loss(theta, lat, cc),
        [sample.c[None]],
        np.zeros((1, params.config.latent_dim)),
        cfg.k_encode, cfg.alpha,
        outer=lambda cc, lat: ad.sum(field_fn(theta, lat) * w),
    )
    return SensitivityResult(res.value, res.grads[0][0], 0)


def fem_rollout(problem: PdeProblem, mesh: Mesh, u0, steps: int, c=None, dirichlet: DirichletSpec | None = None,
                cfg: NewtonConfig = NewtonConfig()) -> list[np.ndarray]:
    """Implicit-Euler reference trajectory (excluding ``u0``)."""
    if not problem.transient:
        raise ValueError("fem_rollout needs a transient problem")
    c = np.ones(mesh.n_nodes) if c is None else np.asarray(c, dtype=float)
    u = np.asarray(u0, dtype=float)
    out = []
    for _ in range(int(steps)):
        u = newton_solve(problem, mesh, c, dirichlet, cfg=cfg, u_prev=u)
        out.append(u)
    return out


def error_metrics(u_pred, u_ref) -> dict:
    """Relative L2 error (0 when both vectors vanish) and max pointwise error."""
    p = np.asarray(u_pred, dtype=float).ravel()
    r = np.asarray(u_ref, dtype=float).ravel()
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.size} vs {r.size}")
    diff = p - r
    nd, nr = float(np.linalg.norm(diff)), float(np.linalg.norm(r))
    if nr == 0.0:
        rel = 0.0 if nd == 0.0 else float("inf")
    else:
        rel = nd / nr
    return {"rel_l2": rel, "max_pointwise": float(np.abs(diff).max()) if diff.size else 0.0}
