"""Linear isoparametric elements, quadrature and structured grids."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from itertools import product
from typing import Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ElementType", "QuadratureRule", "ShapeEval", "GeomEval", "Mesh",
    "DomainError", "InvertedElementError",
    "shape_eval", "quadrature", "geometry_map", "generate_grid",
    "mesh_to_dict", "mesh_from_dict", "save_mesh", "load_mesh",
]

_TOL = 1e-12


class DomainError(ValueError):
    """Parent coordinate outside the reference element."""


class InvertedElementError(ValueError):
    """Element with non-positive Jacobian determinant."""


class ElementType(enum.Enum):
    QUAD4 = "Quad4"
    TRI3 = "Tri3"
    TET4 = "Tet4"

    @property
    def n_nodes(self) -> int:
        return {"Quad4": 4, "Tri3": 3, "Tet4": 4}[self.value]

    @property
    def dim(self) -> int:
        return 3 if self is ElementType.TET4 else 2

    @property
    def parent_measure(self) -> float:
        return {"Quad4": 4.0, "Tri3": 0.5, "Tet4": 1.0 / 6.0}[self.value]

    @property
    def vtk_cell_type(self) -> int:
        return {"Quad4": 9, "Tri3": 5, "Tet4": 10}[self.value]

    @property
    def parent_nodes(self) -> np.ndarray:
        if self is ElementType.QUAD4:
            return np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        if self is ElementType.TRI3:
            return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        return np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


class QuadratureRule(NamedTuple):
    points: np.ndarray   # (n_int, dim) parent coordinates
    weights: np.ndarray  # (n_int,)


class ShapeEval(NamedTuple):
    N: np.ndarray       # (n_nodes,)
    dN_dxi: np.ndarray  # (dim, n_nodes)


class GeomEval(NamedTuple):
    jac: np.ndarray      # (dim, dim), rows are parent directions
    det_jac: float
    gradN_x: np.ndarray  # (dim, n_nodes)


def shape_eval(elem_type: ElementType, xi) -> ShapeEval:
    """Shape values and parent-space gradients at one parent point."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (elem_type.dim,):
        raise DomainError(f"{elem_type.value} expects a {elem_type.dim}-vector, got shape {xi.shape}")
    if elem_type is ElementType.QUAD4:
        if np.any(np.abs(xi) > 1.0 + _TOL):
            raise DomainError(f"xi={xi} outside [-1, 1]^2")
        s, t = xi
        sn, tn = elem_type.parent_nodes.T
        N = 0.25 * (1 + s * sn) * (1 + t * tn)
        dN = np.stack([0.25 * sn * (1 + t * tn), 0.25 * tn * (1 + s * sn)])
        return ShapeEval(N, dN)
    if np.any(xi < -_TOL) or xi.sum() > 1.0 + _TOL:
        raise DomainError(f"xi={xi} outside the unit simplex")
    d = elem_type.dim
    N = np.concatenate([[1.0 - xi.sum()], xi])
    dN = np.hstack([-np.ones((d, 1)), np.eye(d)])
    return ShapeEval(N, dN)


def quadrature(elem_type: ElementType) -> QuadratureRule:
    """Gauss rules: 2x2 on Quad4, centroid on Tri3, 4-point on Tet4."""
    if elem_type is ElementType.QUAD4:
        g = 1.0 / np.sqrt(3.0)
        pts = np.array([[-g, -g], [g, -g], [g, g], [-g, g]])
        return QuadratureRule(pts, np.ones(4))
    if elem_type is ElementType.TRI3:
        return QuadratureRule(np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]))
    a = (5.0 - np.sqrt(5.0)) / 20.0
    b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
    pts = np.array([[a, a, a], [b, a, a], [a, b, a], [a, a, b]])
    return QuadratureRule(pts, np.full(4, 1.0 / 24.0))


def _check_element(elem_type: ElementType, coords_e: np.ndarray, elem: int | None):
    # bilinear Quad4 determinant is positive everywhere iff positive at the corners
    probe = elem_type.parent_nodes if elem_type is ElementType.QUAD4 else elem_type.parent_nodes[:1]
    for xi in probe:
        det = np.linalg.det(shape_eval(elem_type, xi).dN_dxi @ coords_e)
        if not det > 1e-14 * max(1.0, np.abs(coords_e).max()) ** elem_type.dim:
            name = "element" if elem is None else f"element {elem}"
            raise InvertedElementError(f"{name} is inverted or degenerate (det J = {det:.3e})")


def geometry_map(coords_e, se: ShapeEval, elem_type: ElementType | None = None,
                 elem: int | None = None) -> GeomEval:
    """Jacobian ``J = dX/dxi`` and physical shape gradients ``J^-1 dN/dxi``.

    ``elem`` only labels the error message.
    """
    coords_e = np.asarray(coords_e, dtype=float)
    n, d = se.dN_dxi.shape[1], se.dN_dxi.shape[0]
    if coords_e.shape != (n, d):
        raise ValueError(f"expected {n} nodes in {d}D, got coords of shape {coords_e.shape}")
    if elem_type is None:
        elem_type = {(4, 2): ElementType.QUAD4, (3, 2): ElementType.TRI3, (4, 3): ElementType.TET4}[(n, d)]
    _check_element(elem_type, coords_e, elem)
    jac = se.dN_dxi @ coords_e
    det = float(np.linalg.det(jac))
    if not det > 0.0:
        name = "element" if elem is None else f"element {elem}"
        raise InvertedElementError(f"{name} has det J = {det:.3e}")
    return GeomEval(jac, det, np.linalg.solve(jac, se.dN_dxi))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Nodes, connectivity and named boundary node sets.

    Instances hash by identity so discretisation operators can be cached per
    mesh object.
    """

    dim: int
    coords: np.ndarray
    elements: np.ndarray
    elem_type: ElementType
    node_sets: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        elements = np.asarray(self.elements, dtype=np.int64)
        if self.dim not in (2, 3) or coords.ndim != 2 or coords.shape[1] != self.dim:
            raise ValueError(f"coords must be (M, {self.dim}), got {coords.shape}")
        if self.elem_type.dim != self.dim:
            raise ValueError(f"{self.elem_type.value} elements need dim={self.elem_type.dim}")
        if elements.ndim != 2 or elements.shape[1] != self.elem_type.n_nodes:
            raise ValueError(f"elements must be (E, {self.elem_type.n_nodes}), got {elements.shape}")
        if elements.size and (elements.min() < 0 or elements.max() >= len(coords)):
            raise ValueError("connectivity index out of range")
        sets = {}
        for name, idx in dict(self.node_sets).items():
            idx = np.asarray(idx, dtype=np.int64)
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"node set {name!r} has duplicate entries")
            if idx.size and (idx.min() < 0 or idx.max() >= len(coords)):
                raise ValueError(f"node set {name!r} index out of range")
            sets[name] = _frozen(idx)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "elements", _frozen(elements))
        object.__setattr__(self, "node_sets", sets)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def bounds(self) -> np.ndarray:
        return np.stack([self.coords.min(axis=0), self.coords.max(axis=0)], axis=1)

    def digest(self) -> str:
        """Content hash used to tie datasets and checkpoints to a mesh."""
        blob = json.dumps(mesh_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _tets_of_hex(v: Sequence[int]) -> list[list[int]]:
    # Kuhn split along the 0-6 diagonal; v follows the usual hex numbering
    paths = [(1, 2), (2, 3), (3, 7), (7, 4), (4, 5), (5, 1)]
    return [[v[0], v[a], v[b], v[6]] for a, b in paths]


def generate_grid(dim: int, counts: Sequence[int], bounds: Sequence[Sequence[float]] | None = None) -> Mesh:
    """Structured box mesh: Quad4 in 2D, six Tet4 per hex cell in 3D.

    Node sets: ``left/right`` (x), ``bottom/top`` (y) and ``back/front`` (z).
    """
    counts = [int(c) for c in counts]
    if dim not in (2, 3) or len(counts) != dim:
        raise ValueError(f"need {dim} node counts for dim={dim}, got {counts}")
    if min(counts) < 2:
        raise ValueError(f"at least 2 nodes per axis required, got {counts}")
    bounds = [(0.0, 1.0)] * dim if bounds is None else [tuple(map(float, b)) for b in bounds]
    if len(bounds) != dim or any(hi <= lo for lo, hi in bounds):
        raise ValueError(f"invalid bounds {bounds}")
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, counts)]
    grids = np.meshgrid(*axes, indexing="ij")
    # x varies fastest in the node numbering
    coords = np.stack([g.transpose(tuple(range(dim))[::-1]).ravel() for g in grids], axis=1)

    def nid(*ijk):
        i = ijk[0] + counts[0] * ijk[1]
        return i + counts[0] * counts[1] * ijk[2] if dim == 3 else i

    elems = []
    if dim == 2:
        nx, ny = counts
        for j in range(ny - 1):
            for i in range(nx - 1):
                elems.append([nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)])
        elem_type = ElementType.QUAD4
    else:
        nx, ny, nz = counts
        for k, j, i in product(range(nz - 1), range(ny - 1), range(nx - 1)):
            v = [nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k), nid(i, j + 1, k),
                 nid(i, j, k + 1), nid(i + 1, j, k + 1), nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1)]
            for tet in _tets_of_hex(v):
                x = coords[tet]
                if np.linalg.det((x[1:] - x[0]).T) < 0:
                    tet[1], tet[2] = tet[2], tet[1]
                elems.append(tet)
        elem_type = ElementType.TET4
    names = [("left", "right"), ("bottom", "top"), ("back", "front")]
    sets = {}
    for ax in range(dim):
        lo, hi = bounds[ax]
        sets[names[ax][0]] = np.flatnonzero(np.isclose(coords[:, ax], lo))
        sets[names[ax][1]] = np.flatnonzero(np.isclose(coords[:, ax], hi))
    return Mesh(dim, coords, np.array(elems), elem_type, sets)


def mesh_to_dict(mesh: Mesh) -> dict:
    return {
        "dim": mesh.dim,
        "elem_type": mesh.elem_type.value,
        "coords": mesh.coords.tolist(),
        "elements": mesh.elements.tolist(),
        "node_sets": {k: v.tolist() for k, v in sorted(mesh.node_sets.items())},
    }


def mesh_from_dict(d: Mapping) -> Mesh:
    missing = {"dim", "elem_type", "coords", "elements"} - set(d)
    if missing:
        raise ValueError(f"mesh file missing keys: {sorted(missing)}")
    return Mesh(int(d["dim"]), np.asarray(d["coords"], dtype=float), np.asarray(d["elements"], dtype=np.int64),
                ElementType(d["elem_type"]), {k: np.asarray(v, dtype=np.int64) for k, v in d.get("node_sets", {}).items()})


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        json.dump(mesh_to_dict(mesh), fh)


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        return mesh_from_dict(json.load(fh))
