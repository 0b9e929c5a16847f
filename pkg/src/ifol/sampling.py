"""Random control fields: Fourier conductivities, Gaussian random fields, boundary vectors.

All samplers are pure functions of ``(mesh, spec, seed)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .learning import Sample
from .mesh import Mesh

__all__ = ["FourierSpec", "GrfSpec", "fourier_field", "sigmoid_project", "grf_field", "grf_covariance",
           "random_bc_vector", "make_dataset", "save_dataset", "load_dataset"]


@dataclass(frozen=True)
class FourierSpec:
    """Cosine-product field ``sum a_ijk cos(pi f_i x) cos(pi f_j y) cos(pi f_k z)``.

    Coordinates are first mapped onto the unit box. Coefficients are drawn
    from ``Uniform(coeff_range)`` and the field is rescaled to ``out_range``.
    ``sigmoid`` applies :func:`sigmoid_project` after rescaling.

    The rescaling constants come from a fixed lattice on the unit box
    (``lattice`` points per axis), not from the mesh nodes, so one seed gives
    the same continuous field on every mesh.
    """

    freq_x: tuple[int, ...] = (1, 2, 3)
    freq_y: tuple[int, ...] = (1, 2, 3)
    freq_z: tuple[int, ...] = (0,)
    coeff_range: tuple[float, float] = (-1.0, 1.0)
    out_range: tuple[float, float] = (0.0, 1.0)
    sigmoid: bool = False
    lattice: int = 201

    def __post_init__(self):
        if self.lattice < 2:
            raise ValueError("lattice needs at least 2 points per axis")
        for name in ("freq_x", "freq_y", "freq_z", "coeff_range", "out_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.freq_x and self.freq_y and self.freq_z):
            raise ValueError("frequency lists must be nonempty")
        if not self.out_range[0] < self.out_range[1]:
            raise ValueError(f"out_range must be increasing, got {self.out_range}")
        if not self.coeff_range[0] <= self.coeff_range[1]:
            raise ValueError(f"coeff_range must be ordered, got {self.coeff_range}")


@dataclass(frozen=True)
class GrfSpec:
    """Zero-mean field with covariance ``exp(-|x_i - x_j|^2 / (2 l^2))``.

    ``lengthscale`` may be a ``(lo, hi)`` range, in which case each draw picks
    its length scale uniformly from it.
    """

    lengthscale: float | tuple[float, float] = 0.2
    variance: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        ls = self.lengthscale
        ls = tuple(float(v) for v in ls) if isinstance(ls, (tuple, list)) else float(ls)
        object.__setattr__(self, "lengthscale", ls)
        vals = ls if isinstance(ls, tuple) else (ls,)
        if min(vals) <= 0:
            raise ValueError("lengthscale must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def _unit_coords(mesh: Mesh) -> np.ndarray:
    b = mesh.bounds()
    return (mesh.coords - b[:, 0]) / (b[:, 1] - b[:, 0])


def _cosine_sum(x, coeffs, combos):
    raw = np.zeros(len(x))
    for a, fs in zip(coeffs, combos):
        term = np.full(len(x), a)
        for d, f in enumerate(fs):
            term *= np.cos(np.pi * f * x[:, d])
        raw += term
    return raw


def fourier_field(mesh: Mesh, spec: FourierSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    freqs = [spec.freq_x, spec.freq_y] + ([spec.freq_z] if mesh.dim == 3 else [])
    combos = list(product(*freqs))
    coeffs = rng.uniform(*spec.coeff_range, size=len(combos))
    raw = _cosine_sum(_unit_coords(mesh), coeffs, combos)
    axis = np.linspace(0.0, 1.0, spec.lattice)
    ref = _cosine_sum(np.stack(np.meshgrid(*[axis] * mesh.dim, indexing="ij"), -1).reshape(-1, mesh.dim),
                      coeffs, combos)
    lo, hi = ref.min(), ref.max()
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        raise ValueError("Fourier field has no dynamic range; cannot rescale")
    out = spec.out_range[0] + (raw - lo) * (spec.out_range[1] - spec.out_range[0]) / (hi - lo)
    out = np.clip(out, *spec.out_range)  # nodes between lattice points may overshoot slightly
    return sigmoid_project(out) if spec.sigmoid else out


def sigmoid_project(field, sharpness: float = 20.0, floor: float = 0.05, scale: float = 0.95) -> np.ndarray:
    """``scale * sigmoid(sharpness * (field - 0.5)) + floor``, a two-phase projection."""
    return scale * expit(sharpness * (np.asarray(field, dtype=float) - 0.5)) + floor


def grf_covariance(mesh: Mesh, lengthscale: float, variance: float = 1.0) -> np.ndarray:
    x = mesh.coords
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    return variance * np.exp(-d2 / (2.0 * lengthscale ** 2))


@lru_cache(maxsize=16)
def _grf_factor(mesh: Mesh, lengthscale: float, variance: float, jitter: float) -> np.ndarray:
    K = grf_covariance(mesh, lengthscale, variance)
    eye = np.eye(len(K))
    j = jitter
    while True:
        try:
            return np.linalg.cholesky(K + j * eye)
        except np.linalg.LinAlgError:
            j = max(j * 10.0, 1e-12)
            if j > 1e-4 * (1 + 1e-9):
                raise np.linalg.LinAlgError(
                    f"GRF covariance not positive definite even with jitter 1e-4 (lengthscale {lengthscale})")


def grf_field(mesh: Mesh, spec: GrfSpec, seed: int) -> np.ndarray:
    """One draw; the Cholesky jitter escalates x10 from ``spec.jitter`` up to 1e-4."""
    rng = np.random.default_rng(seed)
    ls = spec.lengthscale
    if isinstance(ls, tuple):
        ls = float(rng.uniform(*ls))
    L = _grf_factor(mesh, ls, float(spec.variance), float(spec.jitter))
    return L @ rng.standard_normal(mesh.n_nodes)


def random_bc_vector(seed: int, magnitude: float, size: int = 3) -> np.ndarray:
    if not magnitude > 0:
        raise ValueError("magnitude must be positive")
    return magnitude * np.random.default_rng(seed).standard_normal(size)


def make_dataset(kind: str, n: int, mesh: Mesh, spec, seed: int, path: str | Path | None = None,
                 bc_size: int = 3) -> list[Sample]:
    """``n`` samples with seeds ``seed + i``.

    ``kind``: ``"fourier"`` (control field), ``"grf"`` (previous state with
    unit control), or ``"bc"`` (boundary vector of ``bc_size`` entries drawn with
    magnitude ``spec``). Written as JSON lines when ``path`` is given.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ones = np.ones(mesh.n_nodes)
    out = []
    for i in range(n):
        s = seed + i
        if kind == "fourier":
            out.append(Sample(fourier_field(mesh, spec, s), seed=s))
        elif kind == "grf":
            out.append(Sample(ones, u_prev=grf_field(mesh, spec, s), seed=s))
        elif kind == "bc":
            out.append(Sample(ones, bc_values=random_bc_vector(s, float(spec), bc_size), seed=s))
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
    if path is not None:
        save_dataset(path, out, mesh, kind)
    return out


def _list(x):
    return None if x is None else [float(v) for v in x]


def save_dataset(path: str | Path, samples: Sequence[Sample], mesh: Mesh, kind: str = "") -> None:
    digest = mesh.digest()
    with open(path, "w") as f:
        for s in samples:
            rec = {"seed": s.seed, "kind": kind, "mesh": digest, "c": _list(s.c),
                   "u_prev": _list(s.u_prev), "bc_values": _list(s.bc_values)}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path, mesh: Mesh | None = None) -> list[Sample]:
    """Read a JSON-lines dataset; with ``mesh`` given the mesh digest must match."""
    out = []
    digest = None if mesh is None else mesh.digest()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if digest is not None and rec.get("mesh") != digest:
                raise ValueError(f"{path}:{lineno}: dataset mesh {rec.get('mesh')} does not match run mesh {digest}")
            out.append(Sample(rec["c"], rec.get("u_prev"), rec.get("bc_values"), rec.get("seed")))
    return out
