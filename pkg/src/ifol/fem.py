"""Element energies for the five PDE classes, assembly and Dirichlet handling.

Every problem is expressed as an energy density evaluated at quadrature
points; element losses are ``sum_k w_k det(J) density_k``. The same code path
serves the FEM oracle (per-element gradients and Hessians) and network
training (batched nodal fields recorded on an autodiff tape).

Nodal unknowns of vector problems are interleaved per node:
``dof = node * n_components + component``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .mesh import ElementType, Mesh, geometry_map, quadrature, shape_eval

__all__ = [
    "LinearElasticity", "Hyperelastic", "StationaryDiffusion", "TransientThermal", "AllenCahn",
    "PdeProblem", "DirichletSpec", "ElementWork", "GlobalWork", "Discretization",
    "discretize", "element_work", "assemble", "apply_dirichlet", "dirichlet_from_sets",
    "batch_loss", "problem_from_dict", "problem_to_dict",
]


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------

def _positive(name, v):
    if not (np.isfinite(v) and v > 0):
        raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class LinearElasticity:
    """Small-strain elasticity; the control field multiplies the base tensor.

    Give either ``(E, nu)`` or both Lame constants ``(lam, mu)``. 2D is plane
    strain.
    """

    E: float = 1.0
    nu: float = 0.3
    lam: float | None = None
    mu: float | None = None
    plane_strain: bool = True
    neumann: tuple = ()

    kind = "linear_elasticity"
    transient = False

    def __post_init__(self):
        if (self.lam is None) != (self.mu is None):
            raise ValueError("give both lam and mu, or neither")
        if self.lam is None:
            _positive("E", self.E)
            if not -1.0 < self.nu < 0.5:
                raise ValueError(f"nu must lie in (-1, 1/2), got {self.nu}")
        else:
            _positive("mu", self.mu)
        if not self.plane_strain:
            raise ValueError("only plane strain is supported in 2D")

    def lame(self) -> tuple[float, float]:
        if self.lam is not None:
            return float(self.lam), float(self.mu)
        E, nu = self.E, self.nu
        return E * nu / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu))

    def n_components(self, dim: int) -> int:
        return dim


@dataclass(frozen=True)
class Hyperelastic:
    """Compressible Neo-Hookean solid; the control field scales ``mu`` and ``kappa``."""

    mu: float = 1.0
    kappa: float = 10.0
    neumann: tuple = ()

    kind = "hyperelastic"
    transient = False

    def __post_init__(self):
        _positive("mu", self.mu)
        _positive("kappa", self.kappa)

    def n_components(self, dim: int) -> int:
        return dim


@dataclass(frozen=True)
class StationaryDiffusion:
    """Nonlinear conductivity ``k = k0 (1 + 2 T^4)``; the control field is ``k0``.

    ``detach_residual`` freezes ``k(T)`` in the reverse pass, so the loss
    gradient is the weighted residual ``int B^T k(T) B T`` instead of the full
    derivative of the energy expression.
    """

    source: float = 0.0
    neumann: tuple = ()
    detach_residual: bool = False

    kind = "stationary_diffusion"
    transient = False

    def n_components(self, dim: int) -> int:
        return 1


@dataclass(frozen=True)
class TransientThermal:
    """One implicit-Euler step of ``rho c_p T_t = div(k0 (1 + alpha T) grad T) + Q``."""

    alpha: float = 1.0
    rho_cp: float = 1.0
    dt: float = 0.01
    source: float = 0.0
    neumann: tuple = ()
    detach_residual: bool = False

    kind = "transient_thermal"
    transient = True

    def __post_init__(self):
        _positive("rho_cp", self.rho_cp)
        _positive("dt", self.dt)
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def n_components(self, dim: int) -> int:
        return 1


@dataclass(frozen=True)
class AllenCahn:
    """One implicit-Euler step of Allen-Cahn with unit mobility; ignores the control field."""

    eps: float = 0.1
    dt: float = 0.01
    neumann: tuple = ()

    kind = "allen_cahn"
    transient = True

    def __post_init__(self):
        _positive("eps", self.eps)
        _positive("dt", self.dt)

    def n_components(self, dim: int) -> int:
        return 1


PdeProblem = Union[LinearElasticity, Hyperelastic, StationaryDiffusion, TransientThermal, AllenCahn]
_KINDS = {cls.kind: cls for cls in (LinearElasticity, Hyperelastic, StationaryDiffusion, TransientThermal, AllenCahn)}


def problem_to_dict(problem: PdeProblem) -> dict:
    d = {k: getattr(problem, k) for k in problem.__dataclass_fields__}
    d["neumann"] = [list(x) for x in problem.neumann]
    return {"type": problem.kind, **d}


def problem_from_dict(d: dict) -> PdeProblem:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown problem type {kind!r}; expected one of {sorted(_KINDS)}")
    if "neumann" in d:
        d["neumann"] = tuple(tuple(x) for x in d["neumann"])
    return _KINDS[kind](**d)


# ---------------------------------------------------------------------------
# Energy densities at quadrature points
# ---------------------------------------------------------------------------
# u[i]: values of component i, gu[i][j]: d u_i / d x_j, c: control field,
# up: previous-step values; all arrays share one shape (quadrature points).

def _grad_sq(g):
    out = g[0] * g[0]
    for gj in g[1:]:
        out = out + gj * gj
    return out


def _frozen(T, mode):
    # "reverse": frozen for adjoints, tangents pass (Jacobian of the truncated
    # residual). "both": a plain constant (needed for lam^T dr/dc).
    return ad.primal(T) if mode == "both" else ad.stop_gradient(T)


def _density(problem: PdeProblem, dim: int, u, gu, c, up, freeze: str = "reverse"):
    kind = problem.kind
    if kind == "stationary_diffusion":
        T = u[0]
        Tk = _frozen(T, freeze) if problem.detach_residual else T
        k = c * (1.0 + 2.0 * Tk ** 4)
        out = 0.5 * k * _grad_sq(gu[0])
        return out - problem.source * T if problem.source else out
    if kind == "transient_thermal":
        T, Tp = u[0], up[0]
        Tk = _frozen(T, freeze) if problem.detach_residual else T
        k = c * (1.0 + problem.alpha * Tk)
        out = 0.5 * k * _grad_sq(gu[0]) + (0.5 * problem.rho_cp / problem.dt) * (T - Tp) ** 2
        return out - problem.source * T if problem.source else out
    if kind == "allen_cahn":
        phi, php = u[0], up[0]
        well = (phi * phi - 1.0) ** 2
        return 0.5 * _grad_sq(gu[0]) + (0.5 / problem.dt) * (phi - php) ** 2 + (0.25 / problem.eps ** 2) * well
    if kind == "linear_elasticity":
        lam, mu = problem.lame()
        tr = gu[0][0]
        for i in range(1, dim):
            tr = tr + gu[i][i]
        eps_sq = 0.0
        for i in range(dim):
            eps_sq = eps_sq + gu[i][i] * gu[i][i]
            for j in range(i + 1, dim):
                e_ij = 0.5 * (gu[i][j] + gu[j][i])
                eps_sq = eps_sq + 2.0 * e_ij * e_ij
        return c * (0.5 * lam * tr * tr + mu * eps_sq)
    if kind == "hyperelastic":
        F = [[gu[i][j] + 1.0 if i == j else gu[i][j] for j in range(dim)] for i in range(dim)]
        if dim == 2:
            J = F[0][0] * F[1][1] - F[0][1] * F[1][0]
            trC = 1.0  # plane strain: F33 = 1
        else:
            J = (F[0][0] * (F[1][1] * F[2][2] - F[1][2] * F[2][1])
                 - F[0][1] * (F[1][0] * F[2][2] - F[1][2] * F[2][0])
                 + F[0][2] * (F[1][0] * F[2][1] - F[1][1] * F[2][0]))
            trC = 0.0
        for row in F:
            for f in row:
                trC = trC + f * f
        logJ = ad.log(J)
        I1bar = ad.exp((-2.0 / 3.0) * logJ) * trC
        return c * (0.5 * problem.mu * (I1bar - 3.0) + 0.25 * problem.kappa * (J * J - 2.0 * logJ - 1.0))
    raise TypeError(f"unsupported problem {problem!r}")


# ---------------------------------------------------------------------------
# Discretisation
# ---------------------------------------------------------------------------

class Discretization(NamedTuple):
    """Quadrature data of a mesh, shared by all problems on it."""

    mesh: Mesh
    N: np.ndarray         # (Q, n) shape values at quadrature points
    gradN: np.ndarray     # (E, Q, d, n) physical shape gradients
    wdet: np.ndarray      # (E, Q) quadrature weight times det J
    node_weights: np.ndarray  # (M,) consistent integral of each shape function
    interp: sp.csr_matrix     # (E*Q, M) nodal values -> quadrature-point values
    grads: tuple              # d matrices (E*Q, M): nodal values -> d/dx_j at quadrature points
    interp_t: sp.csr_matrix   # transposes, kept for reverse sweeps
    grads_t: tuple

    @property
    def volume(self) -> float:
        return float(self.wdet.sum())


def _build_discretization(mesh: Mesh) -> Discretization:
    et = mesh.elem_type
    rule = quadrature(et)
    shapes = [shape_eval(et, xi) for xi in rule.points]
    E, Q = mesh.n_elements, len(rule.weights)
    gradN = np.empty((E, Q, mesh.dim, et.n_nodes))
    wdet = np.empty((E, Q))
    for e, conn in enumerate(mesh.elements):
        xe = mesh.coords[conn]
        for q, se in enumerate(shapes):
            g = geometry_map(xe, se, et, elem=e)
            gradN[e, q] = g.gradN_x
            wdet[e, q] = rule.weights[q] * g.det_jac
    N = np.stack([se.N for se in shapes])
    nw = np.bincount(mesh.elements.ravel(), weights=(wdet @ N).ravel(), minlength=mesh.n_nodes)
    n = et.n_nodes
    rows = np.repeat(np.arange(E * Q), n)
    cols = np.repeat(mesh.elements, Q, axis=0).ravel()
    shape = (E * Q, mesh.n_nodes)
    interp = sp.csr_matrix((np.tile(N.ravel(), E), (rows, cols)), shape=shape)
    grads = tuple(sp.csr_matrix((gradN[:, :, j, :].ravel(), (rows, cols)), shape=shape) for j in range(mesh.dim))
    for a in (N, gradN, wdet, nw):
        a.setflags(write=False)
    return Discretization(mesh, N, gradN, wdet, nw, interp, grads,
                          interp.T.tocsr(), tuple(G.T.tocsr() for G in grads))


discretize = lru_cache(maxsize=64)(_build_discretization)
discretize.__doc__ = "Quadrature data of ``mesh``, cached per mesh object."


def _element_energies(problem, disc: Discretization, u_e, c_e, up_e):
    """Per-element loss, shape (E,).

    ``u_e``/``up_e`` are (E, n * comp) in interleaved element ordering and
    ``c_e`` is (E, n); any of them may be tape variables.
    """
    dim = disc.mesh.dim
    comp = np.shape(u_e.value if isinstance(u_e, ad.Var) else u_e)[1] // disc.N.shape[1]
    Nt = disc.N.T

    def split(x):
        return [x if comp == 1 else x[:, i::comp] for i in range(comp)]

    us = split(u_e)
    uq = [ad.matmul(ui, Nt) for ui in us]
    gq = [[ad.einsum("eqn,en->eq", disc.gradN[:, :, j, :], ui) for j in range(dim)] for ui in us]
    cq = ad.matmul(c_e, Nt)
    upq = None if up_e is None else [ad.matmul(ui, Nt) for ui in split(up_e)]
    dens = _density(problem, dim, uq, gq, cq, upq)
    return ad.sum(dens * disc.wdet, axis=-1)


def _neumann_vector(problem, mesh: Mesh, n_comp: int) -> np.ndarray | None:
    """Consistent nodal load of constant boundary fluxes/tractions."""
    if not problem.neumann:
        return None
    f = np.zeros(mesh.n_nodes * n_comp)
    et = mesh.elem_type
    facets = {ElementType.QUAD4: [(0, 1), (1, 2), (2, 3), (3, 0)],
              ElementType.TRI3: [(0, 1), (1, 2), (2, 0)],
              ElementType.TET4: [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]}[et]
    for name, comp, value in problem.neumann:
        members = set(mesh.node_sets[name].tolist())
        seen = set()
        for conn in mesh.elements:
            for loc in facets:
                nodes = tuple(sorted(int(conn[i]) for i in loc))
                if nodes in seen or not members.issuperset(nodes):
                    continue
                seen.add(nodes)
                x = mesh.coords[list(nodes)]
                if len(nodes) == 2:
                    size = np.linalg.norm(x[1] - x[0])
                else:
                    size = 0.5 * np.linalg.norm(np.cross(x[1] - x[0], x[2] - x[0]))
                for n in nodes:
                    f[n * n_comp + int(comp)] += float(value) * size / len(nodes)
    return f


# ---------------------------------------------------------------------------
# Dirichlet data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirichletSpec:
    """Prescribed (node, component, value) triples."""

    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    components: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = np.asarray(self.nodes, dtype=np.int64).ravel()
        c = np.asarray(self.components, dtype=np.int64).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if not len(n) == len(c) == len(v):
            raise ValueError("nodes, components and values must have equal length")
        pairs = set(zip(n.tolist(), c.tolist()))
        if len(pairs) != len(n):
            raise ValueError("duplicate (node, component) pair in Dirichlet data")
        object.__setattr__(self, "nodes", n)
        object.__setattr__(self, "components", c)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[int, int, float]]) -> "DirichletSpec":
        if not entries:
            return cls()
        n, c, v = zip(*entries)
        return cls(np.array(n), np.array(c), np.array(v, dtype=float))

    def __len__(self):
        return len(self.nodes)

    def dofs(self, n_comp: int = 1) -> np.ndarray:
        return self.nodes * n_comp + self.components

    def mask(self, n_dof: int, n_comp: int = 1) -> np.ndarray:
        """Boolean array, True at prescribed dofs."""
        m = np.zeros(n_dof, dtype=bool)
        m[self.dofs(n_comp)] = True
        return m

    def dense_values(self, n_dof: int, n_comp: int = 1) -> np.ndarray:
        v = np.zeros(n_dof)
        v[self.dofs(n_comp)] = self.values
        return v


def dirichlet_from_sets(mesh: Mesh, rules: Sequence[tuple[str, int, float]],
                        values: Sequence[float] | None = None) -> DirichletSpec:
    """Expand ``(node_set, component, value)`` rules to a :class:`DirichletSpec`.

    ``values`` (one per rule) overrides the rule values, which is how a
    sample-specific boundary vector is applied. Later rules win on shared nodes.
    """
    table: dict[tuple[int, int], float] = {}
    for i, (name, comp, value) in enumerate(rules):
        if name not in mesh.node_sets:
            raise KeyError(f"mesh has no node set {name!r}")
        v = float(values[i]) if values is not None else float(value)
        for node in mesh.node_sets[name]:
            table[(int(node), int(comp))] = v
    keys = sorted(table)
    return DirichletSpec.from_entries([(n, c, table[(n, c)]) for n, c in keys])


def apply_dirichlet(u, spec: DirichletSpec, n_comp: int = 1) -> np.ndarray:
    """Copy of ``u`` with prescribed entries overwritten."""
    out = np.array(u, dtype=float)
    if len(spec):
        out[..., spec.dofs(n_comp)] = spec.values
    return out


# ---------------------------------------------------------------------------
# Element and global work
# ---------------------------------------------------------------------------

class ElementWork(NamedTuple):
    loss: float
    grad: np.ndarray
    hess: np.ndarray | None


class GlobalWork(NamedTuple):
    loss: float
    grad: np.ndarray | None
    residual: np.ndarray | None
    tangent: sp.csr_matrix | None


def _check_inputs(problem, u_prev):
    if problem.transient and u_prev is None:
        raise ValueError(f"{problem.kind} needs the previous-step field u_prev")


def _element_derivatives(problem, disc, u_e, c_e, up_e, want_hess: bool):
    """Loss per element, element gradients and optionally element Hessians.

    ``u_e`` (E, ndof_e) in interleaved element ordering. Element losses are
    independent, so one reverse sweep of their sum yields every element
    gradient, and one forward-over-reverse sweep per local dof direction
    yields a column of every element Hessian at once.
    """
    E, ndof = u_e.shape

    def f(ue):
        return ad.sum(_element_energies(problem, disc, ue, c_e, up_e))

    losses = np.asarray(_element_energies(problem, disc, u_e, c_e, up_e))
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite element energy (check material values and state)")
    _, g = ad.grad(f, u_e)
    H = None
    if want_hess:
        H = np.empty((E, ndof, ndof))
        for i in range(ndof):
            t = np.zeros((E, ndof))
            t[:, i] = 1.0
            _, _, hv = ad.grad_and_hvp(f, (u_e,), (t,))
            H[:, :, i] = hv[0]
    return losses, g, H


def element_work(problem: PdeProblem, coords_e, u_e, c_e, u_prev_e=None, want_hess: bool = False) -> ElementWork:
    """Loss, gradient and (optionally) Hessian of one element."""
    _check_inputs(problem, u_prev_e)
    coords_e = np.asarray(coords_e, dtype=float)
    c_e = np.asarray(c_e, dtype=float)
    if not np.all(np.isfinite(c_e)):
        raise ValueError("non-finite material values")
    n, dim = coords_e.shape
    et = {(4, 2): ElementType.QUAD4, (3, 2): ElementType.TRI3, (4, 3): ElementType.TET4}[(n, dim)]
    mesh = Mesh(dim, coords_e, np.arange(n)[None], et)
    disc = _build_discretization(mesh)
    comp = problem.n_components(dim)
    u_e = np.asarray(u_e, dtype=float).reshape(1, n * comp)
    up = None if u_prev_e is None else np.asarray(u_prev_e, dtype=float).reshape(1, n * comp)
    losses, g, H = _element_derivatives(problem, disc, u_e, c_e.reshape(1, n), up, want_hess)
    return ElementWork(float(losses[0]), g[0], None if H is None else H[0])


def _element_dofs(mesh: Mesh, comp: int) -> np.ndarray:
    conn = mesh.elements
    return (conn[:, :, None] * comp + np.arange(comp)).reshape(len(conn), -1)


def assemble(problem: PdeProblem, mesh: Mesh, u, c, u_prev=None, dirichlet: DirichletSpec | None = None,
             want: str = "grad") -> GlobalWork:
    """Scatter-add element contributions.

    ``want`` is ``"loss"``, ``"grad"`` or ``"tangent"``. With ``"tangent"``
    the residual (loss gradient) and its Jacobian are returned with Dirichlet
    rows and columns condensed: zero row/column, unit diagonal, zero residual.
    """
    if want not in ("loss", "grad", "tangent"):
        raise ValueError(f"want must be loss/grad/tangent, got {want!r}")
    _check_inputs(problem, u_prev)
    comp = problem.n_components(mesh.dim)
    n_dof = mesh.n_nodes * comp
    u = np.asarray(u, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if u.shape != (n_dof,):
        raise ValueError(f"u must have {n_dof} entries, got {u.size}")
    if c.shape != (mesh.n_nodes,):
        raise ValueError(f"c must have {mesh.n_nodes} entries, got {c.size}")
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite material values")
    disc = discretize(mesh)
    edofs = _element_dofs(mesh, comp)
    u_e = u[edofs]
    c_e = c[mesh.elements]
    up_e = None if u_prev is None else np.asarray(u_prev, dtype=float).ravel()[edofs]
    fN = _neumann_vector(problem, mesh, comp)

    if want == "loss":
        losses = np.asarray(_element_energies(problem, disc, u_e, c_e, up_e))
        loss = float(losses.sum()) - (float(fN @ u) if fN is not None else 0.0)
        return GlobalWork(loss, None, None, None)

    losses, g_e, H_e = _element_derivatives(problem, disc, u_e, c_e, up_e, want == "tangent")
    g = np.bincount(edofs.ravel(), weights=g_e.ravel(), minlength=n_dof)
    loss = float(losses.sum())
    if fN is not None:
        loss -= float(fN @ u)
        g = g - fN
    mask = np.zeros(n_dof, dtype=bool) if dirichlet is None else dirichlet.mask(n_dof, comp)
    g[mask] = 0.0
    if want == "grad":
        return GlobalWork(loss, g, None, None)
    rows = np.repeat(edofs, edofs.shape[1], axis=1).ravel()
    cols = np.tile(edofs, (1, edofs.shape[1])).ravel()
    vals = H_e.reshape(len(edofs), -1).ravel()
    keep = ~(mask[rows] | mask[cols])
    fixed = np.flatnonzero(mask)
    K = sp.coo_matrix(
        (np.concatenate([vals[keep], np.ones(len(fixed))]),
         (np.concatenate([rows[keep], fixed]), np.concatenate([cols[keep], fixed]))),
        shape=(n_dof, n_dof)).tocsr()
    return GlobalWork(loss, g, g.copy(), K)


# ---------------------------------------------------------------------------
# Batched loss on the tape
# ---------------------------------------------------------------------------

def batch_loss(problem: PdeProblem, mesh: Mesh, u, c, u_prev=None, freeze: str = "reverse"):
    """Sum over a batch of assembled losses.

    ``u`` is (B, n_dof) and may be a tape variable; ``c`` is (B, M) and
    ``u_prev`` (B, n_dof) or None. Dirichlet values are expected to be
    already imposed on ``u``. Quadrature-point fields come from sparse
    interpolation/gradient operators applied to whole nodal vectors.
    """
    disc = discretize(mesh)
    comp = problem.n_components(mesh.dim)
    if problem.transient and u_prev is None:
        raise ValueError(f"{problem.kind} needs the previous-step field u_prev")

    def split(x):
        return [x if comp == 1 else x[:, i::comp] for i in range(comp)]

    Nq = lambda x: ad.linear(disc.interp, x, disc.interp_t)  # noqa: E731
    us = split(u)
    uq = [Nq(ui) for ui in us]
    gq = [[ad.linear(G, ui, Gt) for G, Gt in zip(disc.grads, disc.grads_t)] for ui in us]
    cq = Nq(c)
    upq = None if u_prev is None else [Nq(ui) for ui in split(np.asarray(u_prev))]
    dens = _density(problem, mesh.dim, uq, gq, cq, upq, freeze)
    total = ad.sum(dens * disc.wdet.ravel())
    fN = _neumann_vector(problem, mesh, comp)
    if fN is not None:
        total = total - ad.sum(u * fN)
    return total
