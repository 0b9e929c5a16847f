"""Shift-modulated SIREN conditioned on a latent code.

Each hidden layer computes ``sin(omega0 * (W_i eta + b_i + phi_i))`` with the
shift ``phi_i = V_i l + m_i``; the head is affine. All weights live in one
flat vector so the whole network is a single leaf on the autodiff tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .fem import DirichletSpec
from .mesh import Mesh

__all__ = ["FieldNetConfig", "FieldNetParams", "LatentCode", "init_params", "decode", "nodal_field",
           "normalize_coords", "hidden_weight_bound"]


@dataclass(frozen=True)
class FieldNetConfig:
    in_dim: int = 2
    out_dim: int = 1
    hidden: tuple[int, ...] = (32, 32, 32)
    omega0: float = 30.0
    latent_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min(self.in_dim, self.out_dim, self.latent_dim) < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"all network dimensions must be >= 1: {self}")
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be positive, got {self.omega0}")

    def layout(self) -> "Layout":
        return Layout.build(self)


class _Block(NamedTuple):
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Layout(NamedTuple):
    """Offsets of each weight block inside the flat parameter vector."""

    blocks: tuple[_Block, ...]
    size: int

    @staticmethod
    def build(cfg: FieldNetConfig) -> "Layout":
        widths = (cfg.in_dim, *cfg.hidden)
        blocks, pos = [], 0
        shapes = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"W{i}", (b, a)), (f"b{i}", (b,)), (f"V{i}", (b, cfg.latent_dim)), (f"m{i}", (b,))]
        L = len(cfg.hidden)
        shapes += [(f"W{L}", (cfg.out_dim, widths[-1])), (f"b{L}", (cfg.out_dim,))]
        for name, shape in shapes:
            blk = _Block(name, pos, shape)
            blocks.append(blk)
            pos += blk.size
        return Layout(tuple(blocks), pos)

    def views(self, flat) -> dict:
        """Per-block views of ``flat`` (tape-aware)."""
        out = {}
        for blk in self.blocks:
            piece = flat[blk.start: blk.start + blk.size]
            out[blk.name] = ad.reshape(piece, blk.shape) if isinstance(piece, ad.Var) else piece.reshape(blk.shape)
        return out


@dataclass(frozen=True, eq=False)
class FieldNetParams:
    """Synthesizer ``(W_i, b_i)`` and modulator ``(V_i, m_i)`` weights plus the coordinate map.

    ``m_i`` is the modulation bias. ``coord_lo``/``coord_hi`` define the affine
    map of physical coordinates onto ``[-1, 1]^d``.
    """

    config: FieldNetConfig
    flat: np.ndarray
    coord_lo: np.ndarray
    coord_hi: np.ndarray

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float)
        if flat.shape != (self.config.layout().size,):
            raise ValueError(f"expected {self.config.layout().size} parameters, got {flat.shape}")
        lo = np.array(self.coord_lo, dtype=float).reshape(self.config.in_dim)
        hi = np.array(self.coord_hi, dtype=float).reshape(self.config.in_dim)
        if np.any(hi <= lo):
            raise ValueError("coordinate box must have positive extent")
        for a in (flat, lo, hi):
            a.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "coord_lo", lo)
        object.__setattr__(self, "coord_hi", hi)

    def replace(self, flat) -> "FieldNetParams":
        return FieldNetParams(self.config, flat, self.coord_lo, self.coord_hi)

    def block(self, name: str) -> np.ndarray:
        return self.config.layout().views(self.flat)[name]

    @property
    def synthesizer(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.config.layout().views(self.flat)
        return [(v[f"W{i}"], v[f"b{i}"]) for i in range(len(self.config.hidden) + 1)]

    @property
    def modulator(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.config.layout().views(self.flat)
        return [(v[f"V{i}"], v[f"m{i}"]) for i in range(len(self.config.hidden))]


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("latent code has non-finite entries")
        object.__setattr__(self, "values", v)


def hidden_weight_bound(fan_in: int, omega0: float) -> float:
    return float(np.sqrt(6.0 / fan_in) / omega0)


def init_params(config: FieldNetConfig, seed: int, bounds: Sequence[Sequence[float]] | None = None) -> FieldNetParams:
    """SIREN initialisation; ``bounds`` is the physical box mapped to ``[-1, 1]^d``."""
    rng = np.random.default_rng(seed)
    lay = config.layout()
    flat = np.zeros(lay.size)
    for blk in lay.blocks:
        kind, i = blk.name[0], int(blk.name[1:])
        if kind == "W":
            fan_in = blk.shape[1]
            bound = 1.0 / fan_in if i == 0 else hidden_weight_bound(fan_in, config.omega0)
        elif kind == "V":
            bound = hidden_weight_bound(config.latent_dim, config.omega0)
        else:
            continue
        flat[blk.start: blk.start + blk.size] = rng.uniform(-bound, bound, blk.size)
    if bounds is None:
        bounds = [(0.0, 1.0)] * config.in_dim
    b = np.asarray(bounds, dtype=float).reshape(config.in_dim, 2)
    return FieldNetParams(config, flat, b[:, 0], b[:, 1])


def normalize_coords(params: FieldNetParams, coords) -> np.ndarray:
    x = np.asarray(coords, dtype=float)
    return 2.0 * (x - params.coord_lo) / (params.coord_hi - params.coord_lo) - 1.0


def forward(config: FieldNetConfig, flat, latent, eta, fast: bool = False):
    """Network output for normalised points ``eta`` (P, d).

    ``latent`` is (latent_dim,) or (B, latent_dim); the result is (P, out) or
    (B, P, out). ``flat`` and ``latent`` may be tape variables. ``fast``
    selects single-precision trigonometry (see :func:`autodiff.sine_layer`).
    """
    v = config.layout().views(flat)
    batched = np.ndim(latent.value if isinstance(latent, ad.Var) else latent) == 2
    h = eta
    for i in range(len(config.hidden)):
        shift = ad.matmul(latent, ad.transpose(v[f"V{i}"])) + v[f"m{i}"] + v[f"b{i}"]
        if batched:
            shift = ad.reshape(shift, (_shape(shift)[0], 1, _shape(shift)[1]))
        h = ad.sine_layer(h, v[f"W{i}"], shift, config.omega0, fast)
    L = len(config.hidden)
    return ad.matmul(h, ad.transpose(v[f"W{L}"])) + v[f"b{L}"]


def _shape(x):
    return x.shape if isinstance(x, ad.Var) else np.shape(x)


def _pointwise(config: FieldNetConfig, flat, latent, eta):
    # each point is reduced on its own (no BLAS blocking), so the value at a
    # coordinate does not depend on which other points are evaluated with it
    v = config.layout().views(flat)
    h = eta[None] if latent.ndim == 2 else eta
    for i in range(len(config.hidden)):
        shift = latent @ v[f"V{i}"].T + v[f"m{i}"] + v[f"b{i}"]
        if latent.ndim == 2:
            shift = shift[:, None, :]
        z = (h[..., None, :] * v[f"W{i}"]).sum(-1) + shift
        h = np.sin(config.omega0 * z)
    L = len(config.hidden)
    return (h[..., None, :] * v[f"W{L}"]).sum(-1) + v[f"b{L}"]


def decode(points, latent, params: FieldNetParams, chunk: int = 512) -> np.ndarray:
    """Evaluate the field at physical ``points`` (P, d) for one latent or a batch.

    Returns (P, out) for a single latent and (B, P, out) for a batch. Values
    at a coordinate are bit-identical whatever other points are evaluated.
    """
    lat = latent.values if isinstance(latent, LatentCode) else np.asarray(latent, dtype=float)
    if lat.shape[-1] != params.config.latent_dim or lat.ndim > 2:
        raise ValueError(f"latent must have trailing size {params.config.latent_dim}, got {lat.shape}")
    pts = np.asarray(points, dtype=float).reshape(-1, params.config.in_dim)
    eta = normalize_coords(params, pts)
    parts = [_pointwise(params.config, params.flat, lat, eta[i:i + chunk]) for i in range(0, len(eta), chunk)]
    return np.concatenate(parts, axis=-2)


def nodal_field(mesh: Mesh, latent, params: FieldNetParams, dirichlet: DirichletSpec | None = None) -> np.ndarray:
    """Decoded nodal vector (interleaved components) with hard Dirichlet values."""
    if mesh.dim != params.config.in_dim:
        raise ValueError(f"mesh dim {mesh.dim} != network in_dim {params.config.in_dim}")
    out = decode(mesh.coords, latent, params)
    u = out.reshape(*out.shape[:-2], -1)
    if dirichlet is not None and len(dirichlet):
        u = u.copy()
        u[..., dirichlet.dofs(params.config.out_dim)] = dirichlet.values
    return u
