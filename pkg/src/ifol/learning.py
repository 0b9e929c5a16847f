"""Latent encoding, meta-training, inference and transient rollout.

A sample is encoded by ``k_encode`` plain gradient steps on the discrete PDE
loss with respect to its latent code, starting from zero. Network weights
are trained on the loss reached after encoding, differentiating through the
inner steps (second order unless ``first_order`` is set).

Mini-batches are split into fixed-size chunks. Each chunk is one tape; chunk
results are reduced in chunk order, so thread count never changes a result.
"""
from __future__ import annotations

import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .fem import PdeProblem, batch_loss, dirichlet_from_sets
from .field_net import FieldNetConfig, FieldNetParams, LatentCode, forward, init_params, nodal_field, normalize_coords
from .mesh import Mesh

__all__ = [
    "TrainConfig", "AdamState", "Sample", "TrainHistory", "RolloutResult", "EncodeDivergenceError",
    "TrainingError", "named_rng", "encode", "outer_step", "train", "infer", "rollout", "make_loss", "make_field",
    "meta_gradient", "TrainState",
]


class EncodeDivergenceError(FloatingPointError):
    """The PDE loss became non-finite during latent encoding."""


class TrainingError(FloatingPointError):
    """A non-finite meta-gradient or loss was produced."""


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``init``, ``shuffle``, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class TrainConfig:
    k_encode: int = 3
    alpha: float = 1e-2
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    lr_decay: str = "exponential"
    batch_size: int = 10
    epochs: int = 100
    grad_norm: bool = True
    first_order: bool = False
    seed: int = 0
    chunk_size: int = 10
    threads: int = 1
    fast_trig: bool = False

    def __post_init__(self):
        if self.k_encode < 0:
            raise ValueError("k_encode must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.lr_decay not in ("exponential", "constant"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if min(self.batch_size, self.chunk_size, self.threads) < 1 or self.epochs < 0:
            raise ValueError("batch_size, chunk_size and threads must be >= 1, epochs >= 0")

    def learning_rate(self, epoch: int) -> float:
        """Exponential interpolation from ``lr_start`` (first epoch) to ``lr_end`` (last)."""
        if self.lr_decay == "constant" or self.epochs <= 1:
            return self.lr_start
        t = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return float(self.lr_start * (self.lr_end / self.lr_start) ** t)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def update(self, grad: np.ndarray, lr: float) -> tuple[np.ndarray, "AdamState"]:
        """Return the parameter increment and the advanced state."""
        t = self.step + 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps), replace(self, m=m, v=v, step=t)


@dataclass(frozen=True, eq=False)
class Sample:
    """Control field ``c`` (nodal), optional previous state and boundary values.

    ``bc_values`` holds one value per boundary rule and overrides the rule
    values for this sample.
    """

    c: np.ndarray
    u_prev: np.ndarray | None = None
    bc_values: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        for name in ("u_prev", "bc_values"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def copy(self) -> "TrainHistory":
        return TrainHistory(*(list(getattr(self, f)) for f in self.__dataclass_fields__))

    def to_csv(self) -> str:
        # wall time is left out so that reruns give byte-identical files
        rows = ["epoch,loss,grad_norm,lr"]
        rows += [f"{e},{l!r},{g!r},{r!r}" for e, l, g, r in zip(self.epoch, self.loss, self.grad_norm, self.lr)]
        return "\n".join(rows) + "\n"


class TrainState(NamedTuple):
    """Everything needed to continue training after ``epoch``."""

    epoch: int
    params: FieldNetParams
    opt: AdamState
    history: TrainHistory
    rng_state: dict


# ---------------------------------------------------------------------------
# Loss construction
# ---------------------------------------------------------------------------

class _Batch(NamedTuple):
    C: np.ndarray
    U_prev: np.ndarray | None
    mask: np.ndarray
    bc: np.ndarray


def _stack(samples: Sequence[Sample], problem: PdeProblem, mesh: Mesh, bcs) -> _Batch:
    comp = problem.n_components(mesh.dim)
    n_dof = mesh.n_nodes * comp
    C = np.stack([s.c for s in samples])
    if C.shape[1] != mesh.n_nodes:
        raise ValueError(f"sample control fields have {C.shape[1]} entries, mesh has {mesh.n_nodes} nodes")
    U = None
    if problem.transient:
        if any(s.u_prev is None for s in samples):
            raise ValueError(f"{problem.kind} samples need u_prev")
        U = np.stack([s.u_prev for s in samples])
    bc = np.zeros((len(samples), n_dof))
    mask = np.zeros(n_dof, dtype=bool)
    if bcs:
        for b, s in enumerate(samples):
            spec = dirichlet_from_sets(mesh, bcs, s.bc_values)
            dofs = spec.dofs(comp)
            bc[b, dofs] = spec.values
            mask[dofs] = True
    return _Batch(C, U, mask, bc)


def make_field(params: FieldNetParams, problem: PdeProblem, mesh: Mesh, samples: Sequence[Sample], bcs=(),
               fast: bool = False):
    """Batched nodal field ``field(theta, latents)`` -> (B, n_dof) with hard Dirichlet values."""
    cfg = params.config
    if mesh.dim != cfg.in_dim or problem.n_components(mesh.dim) != cfg.out_dim:
        raise ValueError("network dimensions do not match the mesh/problem")
    eta = normalize_coords(params, mesh.coords)
    data = _stack(samples, problem, mesh, bcs)
    B, n_dof = data.bc.shape

    def field_fn(theta, lat):
        u = ad.reshape(forward(cfg, theta, lat, eta, fast), (B, n_dof))
        return ad.where(data.mask, data.bc, u) if data.mask.any() else u

    return field_fn, data


def make_loss(params: FieldNetParams, problem: PdeProblem, mesh: Mesh, samples: Sequence[Sample], bcs=(),
              fast: bool = False):
    """Batched PDE loss ``loss(theta, latents, c=None)`` on the tape.

    ``latents`` is (B, latent_dim). The loss is the sum over the batch; the
    per-sample losses are independent, so latent gradients are per sample.
    ``c`` defaults to the stacked sample controls and may be a tape variable.
    """
    field_fn, data = make_field(params, problem, mesh, samples, bcs, fast)

    def loss(theta, lat, c=None):
        return batch_loss(problem, mesh, field_fn(theta, lat), data.C if c is None else c, data.U_prev)

    return loss


def _latent_steps(loss, theta, l0, steps, alpha):
    l = l0
    for j in range(steps):
        try:
            _, g = ad.grad(lambda x: loss(theta, x), l)
        except FloatingPointError as exc:
            raise EncodeDivergenceError(f"non-finite PDE loss at encode step {j}: {exc}") from exc
        l = l - alpha * g
    return l


def encode(sample, params: FieldNetParams, problem: PdeProblem, mesh: Mesh, cfg: TrainConfig, bcs=()):
    """Latent code(s) after ``cfg.k_encode`` gradient steps from zero.

    ``sample`` may be one :class:`Sample` (returns a :class:`LatentCode`) or a
    list (returns a (B, latent_dim) array).
    """
    single = isinstance(sample, Sample)
    samples = [sample] if single else list(sample)
    loss = make_loss(params, problem, mesh, samples, bcs)
    l0 = np.zeros((len(samples), params.config.latent_dim))
    l = _latent_steps(loss, params.flat, l0, cfg.k_encode, cfg.alpha)
    return LatentCode(l[0]) if single else l


# ---------------------------------------------------------------------------
# Meta-training
# ---------------------------------------------------------------------------

def _chunk_grad(chunk, params, problem, mesh, cfg, bcs):
    if getattr(problem, "detach_residual", False) and not cfg.first_order and cfg.k_encode > 0:
        # the inner map then follows a non-symmetric Jacobian; its exact
        # transpose would need reverse-over-reverse differentiation
        raise NotImplementedError("second-order meta-gradients need detach_residual=False; "
                                  "set first_order=True")
    loss = make_loss(params, problem, mesh, chunk, bcs, cfg.fast_trig)
    l0 = np.zeros((len(chunk), params.config.latent_dim))
    try:
        res = ad.unrolled_grad(loss, [params.flat], l0, cfg.k_encode, cfg.alpha, first_order=cfg.first_order)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite value during meta-gradient: {exc}") from exc
    return res.value, res.grads[0]


def meta_gradient(batch: Sequence[Sample], params: FieldNetParams, problem: PdeProblem, mesh: Mesh,
                  cfg: TrainConfig, bcs=(), executor: ThreadPoolExecutor | None = None) -> tuple[float, np.ndarray]:
    """Mean post-encoding loss over ``batch`` and its gradient w.r.t. the weights."""
    if not batch:
        raise ValueError("empty batch")
    chunks = [batch[i:i + cfg.chunk_size] for i in range(0, len(batch), cfg.chunk_size)]
    work = lambda ch: _chunk_grad(ch, params, problem, mesh, cfg, bcs)  # noqa: E731
    results = list(executor.map(work, chunks)) if executor is not None else [work(ch) for ch in chunks]
    total, g = 0.0, np.zeros_like(params.flat)
    for value, grad in results:
        total += value
        g += grad
    n = len(batch)
    return total / n, g / n


def outer_step(batch: Sequence[Sample], params: FieldNetParams, opt: AdamState, problem: PdeProblem,
               mesh: Mesh, cfg: TrainConfig, lr: float | None = None, bcs=(),
               executor: ThreadPoolExecutor | None = None):
    """One Adam update on the averaged meta-gradient.

    Returns ``(params', opt', mean_loss, raw_grad_norm)``.
    """
    loss, g = meta_gradient(batch, params, problem, mesh, cfg, bcs, executor)
    norm = float(np.linalg.norm(g))
    if not (np.isfinite(loss) and np.isfinite(norm)):
        raise TrainingError(f"non-finite meta-gradient (loss={loss}, |g|={norm})")
    if cfg.grad_norm and norm > 0:
        g = g / norm
    step, opt = opt.update(g, cfg.lr_start if lr is None else lr)
    return params.replace(params.flat + step), opt, loss, norm


def train(dataset: Sequence[Sample], problem: PdeProblem, mesh: Mesh, cfg: TrainConfig,
          net: FieldNetConfig | None = None, bcs=(), params: FieldNetParams | None = None,
          callback: Callable[[TrainState], None] | None = None,
          log: Callable[[str], None] | None = None, resume: TrainState | None = None):
    """Mini-batch meta-training; returns ``(params, history)``.

    Initial weights and the per-epoch shuffles come from named streams of
    ``cfg.seed``. ``callback`` receives a :class:`TrainState` after every
    epoch; passing one back as ``resume`` continues bit-identically.
    """
    if not dataset:
        raise ValueError("empty dataset")
    shuffle = named_rng(cfg.seed, "shuffle")
    if resume is not None:
        params, opt, start = resume.params, resume.opt, resume.epoch + 1
        hist = resume.history.copy()
        shuffle.bit_generator.state = resume.rng_state
    else:
        if params is None:
            if net is None:
                raise ValueError("either net or params is required")
            params = init_params(net, int(named_rng(cfg.seed, "init").integers(2 ** 63)), mesh.bounds())
        opt, start, hist = AdamState.zeros(params.flat.size), 0, TrainHistory()
    executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(start, cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.learning_rate(epoch)
            order = shuffle.permutation(len(dataset))
            losses, norms, sizes = [], [], []
            for i in range(0, len(order), cfg.batch_size):
                batch = [dataset[j] for j in order[i:i + cfg.batch_size]]
                params, opt, loss, norm = outer_step(batch, params, opt, problem, mesh, cfg, lr, bcs, executor)
                losses.append(loss)
                norms.append(norm)
                sizes.append(len(batch))
            w = np.asarray(sizes, dtype=float)
            hist.epoch.append(epoch)
            hist.loss.append(float(np.dot(w, losses) / w.sum()))
            hist.grad_norm.append(float(np.mean(norms)))
            hist.lr.append(lr)
            hist.wall_time.append(time.perf_counter() - t0)
            if log is not None:
                log(f"epoch {epoch:5d}  loss {hist.loss[-1]:.6e}  |g| {hist.grad_norm[-1]:.3e}  lr {lr:.2e}")
            if callback is not None:
                callback(TrainState(epoch, params, opt, hist.copy(), shuffle.bit_generator.state))
    finally:
        if executor is not None:
            executor.shutdown()
    return params, hist


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer(sample, params: FieldNetParams, problem: PdeProblem, mesh: Mesh, cfg: TrainConfig,
          mesh_eval: Mesh | None = None, bcs=()) -> np.ndarray:
    """Encode on ``mesh`` then decode nodal values on ``mesh_eval`` (default ``mesh``).

    Accepts one sample (returns a vector) or a list (returns (B, n_dof)).
    Boundary rules are re-applied on the evaluation mesh.
    """
    single = isinstance(sample, Sample)
    samples = [sample] if single else list(sample)
    lat = encode(samples, params, problem, mesh, cfg, bcs)
    target = mesh if mesh_eval is None else mesh_eval
    out = []
    for s, l in zip(samples, lat):
        spec = dirichlet_from_sets(target, bcs, s.bc_values) if bcs else None
        out.append(nodal_field(target, l, params, spec))
    return out[0] if single else np.stack(out)


class RolloutResult(NamedTuple):
    fields: list
    diverged: bool


def rollout(u0, params: FieldNetParams, problem: PdeProblem, mesh: Mesh, steps: int, cfg: TrainConfig,
            c=None, bcs=()) -> RolloutResult:
    """Feed each prediction back as the next ``u_prev``.

    Stops early with ``diverged=True`` when a field becomes non-finite.
    """
    if not problem.transient:
        raise ValueError("rollout needs a transient problem")
    c = np.ones(mesh.n_nodes) if c is None else np.asarray(c, dtype=float)
    u = np.asarray(u0, dtype=float)
    fields = []
    for _ in range(int(steps)):
        try:
            u = infer(Sample(c, u_prev=u), params, problem, mesh, cfg, bcs=bcs)
        except FloatingPointError:
            return RolloutResult(fields, True)
        if not np.all(np.isfinite(u)):
            return RolloutResult(fields, True)
        fields.append(u)
    return RolloutResult(fields, False)
