"""Command-line entry points, run configuration and file formats.

    ifol <sample|train|infer|rollout|fem|sensitivity|gradcheck> --config run.json [options]

A run config is one JSON object with the blocks ``problem``, ``mesh``,
``dirichlet``, ``net``, ``train``, ``sampling``, ``eval`` and ``paths`` plus
a top-level ``seed``. Relative paths are taken from the working directory;
``dataset`` and ``checkpoint`` default to files inside the output directory.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .fem import PdeProblem, dirichlet_from_sets, problem_from_dict, problem_to_dict
from .field_net import FieldNetConfig, FieldNetParams
from .learning import AdamState, Sample, TrainConfig, TrainState, infer, named_rng, rollout, train
from .mesh import Mesh, generate_grid, load_mesh
from .oracle import ConvergenceError, adjoint_sensitivity, error_metrics, fem_rollout, ifol_sensitivity, newton_solve
from .sampling import FourierSpec, GrfSpec, fourier_field, load_dataset, make_dataset

__all__ = ["ConfigError", "RunConfig", "MeshBlock", "SamplingBlock", "EvalBlock", "PathsBlock", "Checkpoint",
           "parse_config", "config_to_dict", "load_config", "save_checkpoint", "load_checkpoint", "write_vtk",
           "write_field_csv", "main"]

log = logging.getLogger("ifol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending field path."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshBlock:
    """Either a generated box grid (``dim``, node ``counts``, ``bounds``) or a mesh ``file``."""

    dim: int = 2
    counts: tuple[int, ...] = (21, 21)
    bounds: tuple[tuple[float, float], ...] | None = None
    file: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple(tuple(float(v) for v in b) for b in self.bounds))

    def build(self) -> Mesh:
        return load_mesh(self.file) if self.file else generate_grid(self.dim, self.counts, self.bounds)


@dataclass(frozen=True)
class SamplingBlock:
    """``n`` samples of ``kind``; the last ``n_test`` are held out of training.

    ``spec`` holds :class:`FourierSpec` or :class:`GrfSpec` fields, or
    ``{"magnitude": m, "size": k}`` for boundary vectors.
    """

    kind: str = "fourier"
    n: int = 220
    n_test: int = 20
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("fourier", "grf", "bc"):
            raise ValueError(f"kind must be fourier, grf or bc, got {self.kind!r}")
        if not 0 <= self.n_test < self.n:
            raise ValueError(f"need 0 <= n_test < n, got n={self.n}, n_test={self.n_test}")
        object.__setattr__(self, "spec", dict(self.spec))
        self.make_spec()

    def make_spec(self):
        if self.kind == "fourier":
            return FourierSpec(**self.spec)
        if self.kind == "grf":
            return GrfSpec(**self.spec)
        extra = set(self.spec) - {"magnitude", "size"}
        if extra:
            raise ValueError(f"unknown bc spec keys {sorted(extra)}")
        return float(self.spec.get("magnitude", 1.0))

    @property
    def n_train(self) -> int:
        return self.n - self.n_test


@dataclass(frozen=True)
class EvalBlock:
    """Which dataset entries the evaluation commands use (default: the held-out ones)."""

    samples: tuple[int, ...] | None = None
    component: int = 0
    rollout_sample: int = 0
    steps: int = 10
    oracle: bool = True

    def __post_init__(self):
        if self.samples is not None:
            object.__setattr__(self, "samples", tuple(int(i) for i in self.samples))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class PathsBlock:
    out: str = "out"
    dataset: str | None = None
    checkpoint: str | None = None
    checkpoint_every: int = 0

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / "dataset.jsonl"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.ifol"


@dataclass(frozen=True)
class RunConfig:
    problem: PdeProblem
    mesh: MeshBlock = MeshBlock()
    dirichlet: tuple[tuple[str, int, float], ...] = ()
    net: FieldNetConfig = FieldNetConfig()
    train: TrainConfig = TrainConfig()
    sampling: SamplingBlock = SamplingBlock()
    eval: EvalBlock = EvalBlock()
    paths: PathsBlock = PathsBlock()
    seed: int = 0

    def dataset_seed(self) -> int:
        return int(named_rng(self.seed, "sampling").integers(2 ** 31))


def _build(path: str, cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(d: dict) -> RunConfig:
    """Validate a config dictionary, including cross-block consistency."""
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(d) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"config: unknown blocks {unknown}")
    if "problem" not in d:
        raise ConfigError("problem: block is required")
    try:
        problem = problem_from_dict(d["problem"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from exc
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")
    train_d = dict(d.get("train", {}))
    if "seed" in train_d:
        raise ConfigError("train.seed: set the top-level seed instead")
    train_d["seed"] = seed
    try:
        rules = tuple((str(s), int(c), float(v)) for s, c, v in d.get("dirichlet", []))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dirichlet: entries must be [node_set, component, value]: {exc}") from exc
    cfg = RunConfig(
        problem=problem,
        mesh=_build("mesh", MeshBlock, d.get("mesh", {})),
        dirichlet=rules,
        net=_build("net", FieldNetConfig, d.get("net", {})),
        train=_build("train", TrainConfig, train_d),
        sampling=_build("sampling", SamplingBlock, d.get("sampling", {})),
        eval=_build("eval", EvalBlock, d.get("eval", {})),
        paths=_build("paths", PathsBlock, d.get("paths", {})),
        seed=seed,
    )
    dim = cfg.mesh.dim if not cfg.mesh.file else None
    if dim is not None and cfg.net.in_dim != dim:
        raise ConfigError(f"net.in_dim: {cfg.net.in_dim} does not match mesh.dim {dim}")
    if dim is not None and cfg.net.out_dim != problem.n_components(dim):
        raise ConfigError(f"net.out_dim: {problem.kind} in {dim}D has {problem.n_components(dim)} components, "
                          f"got {cfg.net.out_dim}")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical dictionary form; ``parse_config`` inverts it."""
    train_d = asdict(cfg.train)
    train_d.pop("seed")
    mesh_d = asdict(cfg.mesh)
    mesh_d["counts"] = list(mesh_d["counts"])
    if mesh_d["bounds"] is not None:
        mesh_d["bounds"] = [list(b) for b in mesh_d["bounds"]]
    net_d = asdict(cfg.net)
    net_d["hidden"] = list(net_d["hidden"])
    ev = asdict(cfg.eval)
    if ev["samples"] is not None:
        ev["samples"] = list(ev["samples"])
    return {
        "seed": cfg.seed,
        "problem": problem_to_dict(cfg.problem),
        "mesh": mesh_d,
        "dirichlet": [list(r) for r in cfg.dirichlet],
        "net": net_d,
        "train": train_d,
        "sampling": json.loads(json.dumps(asdict(cfg.sampling))),
        "eval": ev,
        "paths": asdict(cfg.paths),
    }


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"IFOL"
CKPT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: FieldNetParams
    train: TrainConfig
    epoch: int = -1
    rng_state: dict | None = None
    opt: AdamState | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """``IFOL`` magic, uint32 version, uint64 header length, JSON header, then
    little-endian float64 arrays in header order. Written atomically."""
    arrays = [("flat", ckpt.params.flat), ("coord_lo", ckpt.params.coord_lo), ("coord_hi", ckpt.params.coord_hi)]
    adam = None
    if ckpt.opt is not None:
        arrays += [("adam_m", ckpt.opt.m), ("adam_v", ckpt.opt.v)]
        adam = {"step": ckpt.opt.step, "beta1": ckpt.opt.beta1, "beta2": ckpt.opt.beta2, "eps": ckpt.opt.eps}
    net_d = asdict(ckpt.params.config)
    header = {
        "net": net_d, "train": asdict(ckpt.train), "epoch": int(ckpt.epoch), "rng_state": ckpt.rng_state,
        "adam": adam, "arrays": [[name, int(np.size(a))] for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an ifol checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    pos = 16 + hlen
    arrs = {}
    for name, n in header["arrays"]:
        arrs[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(float)
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    net = FieldNetConfig(**header["net"])
    params = FieldNetParams(net, arrs["flat"], arrs["coord_lo"], arrs["coord_hi"])
    opt = None
    if header["adam"] is not None:
        opt = AdamState(arrs["adam_m"], arrs["adam_v"], **header["adam"])
    return Checkpoint(params, TrainConfig(**header["train"]), header["epoch"], header["rng_state"], opt)


# ---------------------------------------------------------------------------
# Field export
# ---------------------------------------------------------------------------

def _columns(mesh: Mesh, fields_: dict) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, v in fields_.items():
        a = np.asarray(v, dtype=float)
        if a.size % mesh.n_nodes:
            raise ValueError(f"field {name!r} has {a.size} entries for {mesh.n_nodes} nodes")
        out.append((name, a.reshape(mesh.n_nodes, -1)))
    return out


def write_vtk(path: str | Path, mesh: Mesh, fields_: dict, title: str = "ifol field", timestamp: bool = False) -> None:
    """Legacy ASCII unstructured grid. Fields with 2 or 3 components are written as vectors."""
    lines = ["# vtk DataFile Version 3.0"]
    if timestamp:
        import datetime
        title = f"{title} {datetime.datetime.now().isoformat(timespec='seconds')}"
    lines += [title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    xyz = np.zeros((mesh.n_nodes, 3))
    xyz[:, :mesh.dim] = mesh.coords
    lines += [" ".join(repr(float(v)) for v in p) for p in xyz]
    npe = mesh.elements.shape[1]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (npe + 1)}")
    lines += [f"{npe} " + " ".join(str(int(i)) for i in e) for e in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(mesh.elem_type.vtk_cell_type)] * mesh.n_elements
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    for name, a in _columns(mesh, fields_):
        if a.shape[1] == 1:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in a[:, 0]]
        elif a.shape[1] <= 3:
            vec = np.zeros((mesh.n_nodes, 3))
            vec[:, :a.shape[1]] = a
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(repr(float(v)) for v in p) for p in vec]
        else:
            raise ValueError(f"field {name!r} has {a.shape[1]} components; at most 3 supported")
    Path(path).write_text("\n".join(lines) + "\n")


def write_field_csv(path: str | Path, mesh: Mesh, fields_: dict) -> None:
    cols = _columns(mesh, fields_)
    head = ["node"] + ["xyz"[d] for d in range(mesh.dim)]
    for name, a in cols:
        head += [name] if a.shape[1] == 1 else [f"{name}_{k}" for k in range(a.shape[1])]
    rows = [",".join(head)]
    for n in range(mesh.n_nodes):
        vals = [str(n)] + [repr(float(v)) for v in mesh.coords[n]]
        for _, a in cols:
            vals += [repr(float(v)) for v in a[n]]
        rows.append(",".join(vals))
    Path(path).write_text("\n".join(rows) + "\n")


def _write_table(path: Path, header: Sequence[str], rows) -> None:
    text = [",".join(header)] + [",".join(v if isinstance(v, str) else repr(v) for v in r) for r in rows]
    path.write_text("\n".join(text) + "\n")


def _export(out: Path, stem: str, mesh: Mesh, fields_: dict) -> None:
    write_vtk(out / f"{stem}.vtk", mesh, fields_)
    write_field_csv(out / f"{stem}.csv", mesh, fields_)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@dataclass
class _Run:
    cfg: RunConfig
    out: Path
    checkpoint: Path
    eval_mesh: str | None = None
    steps: int | None = None

    def __post_init__(self):
        self.mesh = self.cfg.mesh.build()
        if self.mesh.dim != self.cfg.net.in_dim:
            raise ConfigError(f"net.in_dim: {self.cfg.net.in_dim} does not match mesh dimension {self.mesh.dim}")
        for name, _, _ in self.cfg.dirichlet:
            if name not in self.mesh.node_sets:
                raise ConfigError(f"dirichlet: mesh has no node set {name!r}")
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def comp(self) -> int:
        return self.cfg.problem.n_components(self.mesh.dim)

    def dataset(self) -> list[Sample]:
        return load_dataset(self.cfg.paths.dataset_path(), self.mesh)

    def eval_ids(self, n_data: int) -> list[int]:
        ids = self.cfg.eval.samples
        if ids is None:
            ids = range(self.cfg.sampling.n_train, n_data)
        ids = list(ids)
        bad = [i for i in ids if not 0 <= i < n_data]
        if bad:
            raise ConfigError(f"eval.samples: indices {bad} outside the dataset of {n_data}")
        return ids

    def dirichlet(self, mesh: Mesh, sample: Sample):
        return dirichlet_from_sets(mesh, self.cfg.dirichlet, sample.bc_values)

    def checkpoint_params(self) -> FieldNetParams:
        ck = load_checkpoint(self.checkpoint)
        if ck.params.config != self.cfg.net:
            raise ConfigError("net: checkpoint network differs from the config")
        return ck.params


def cmd_sample(run: _Run) -> int:
    s = run.cfg.sampling
    path = run.cfg.paths.dataset_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    make_dataset(s.kind, s.n, run.mesh, s.make_spec(), run.cfg.dataset_seed(), path,
                 bc_size=int(s.spec.get("size", len(run.cfg.dirichlet) or 3)))
    log.info("wrote %d samples to %s", s.n, path)
    return EXIT_OK


def cmd_train(run: _Run) -> int:
    cfg = run.cfg
    data = run.dataset()[:cfg.sampling.n_train]
    every = cfg.paths.checkpoint_every

    def save(state: TrainState):
        last = state.epoch == cfg.train.epochs - 1
        if last or (every and (state.epoch + 1) % every == 0):
            save_checkpoint(run.checkpoint, Checkpoint(state.params, cfg.train, state.epoch, state.rng_state,
                                                       state.opt))

    params, hist = train(data, cfg.problem, run.mesh, cfg.train, net=cfg.net, bcs=cfg.dirichlet, callback=save,
                         log=log.info)
    if cfg.train.epochs == 0:
        save_checkpoint(run.checkpoint, Checkpoint(params, cfg.train))
    (run.out / "history.csv").write_text(hist.to_csv())
    log.info("checkpoint %s, %d epochs, final loss %s", run.checkpoint, len(hist),
             hist.loss[-1] if len(hist) else "n/a")
    return EXIT_OK


def _oracle_inputs(run: _Run, mesh: Mesh, sample: Sample):
    """Control and previous state on ``mesh``, or None when they cannot be carried over."""
    if mesh is run.mesh:
        return sample.c, sample.u_prev
    kind = run.cfg.sampling.kind
    if run.cfg.problem.transient:
        return None
    if kind == "fourier" and sample.seed is not None:
        return fourier_field(mesh, run.cfg.sampling.make_spec(), sample.seed), None
    if kind == "bc":
        return np.ones(mesh.n_nodes), None
    return None


def cmd_infer(run: _Run) -> int:
    cfg = run.cfg
    params = run.checkpoint_params()
    data = run.dataset()
    target = load_mesh(run.eval_mesh) if run.eval_mesh else run.mesh
    rows = []
    for i in run.eval_ids(len(data)):
        s = data[i]
        pred = infer(s, params, cfg.problem, run.mesh, cfg.train, target, cfg.dirichlet)
        fields_ = {"prediction": pred}
        inputs = _oracle_inputs(run, target, s) if cfg.eval.oracle else None
        if inputs is not None:
            ref = newton_solve(cfg.problem, target, inputs[0], run.dirichlet(target, s), u_prev=inputs[1])
            m = error_metrics(pred, ref)
            rows.append((str(i), m["rel_l2"], m["max_pointwise"]))
            fields_["reference"] = ref
        _export(run.out, f"infer_{i}", target, {k: v.reshape(target.n_nodes, -1) for k, v in fields_.items()})
    if rows:
        _write_table(run.out / "metrics.csv", ("sample", "rel_l2", "max_pointwise"), rows)
        log.info("mean rel_l2 %.4e over %d samples", float(np.mean([r[1] for r in rows])), len(rows))
    return EXIT_OK


def cmd_rollout(run: _Run) -> int:
    cfg = run.cfg
    params = run.checkpoint_params()
    data = run.dataset()
    idx = cfg.eval.rollout_sample
    if not 0 <= idx < len(data):
        raise ConfigError(f"eval.rollout_sample: {idx} outside the dataset of {len(data)}")
    s = data[idx]
    if s.u_prev is None:
        raise ConfigError("sampling.kind: rollout needs samples with an initial state (kind 'grf')")
    steps = cfg.eval.steps if run.steps is None else run.steps
    res = rollout(s.u_prev, params, cfg.problem, run.mesh, steps, cfg.train, s.c, cfg.dirichlet)
    for k, u in enumerate(res.fields, 1):
        _export(run.out, f"rollout_{k:04d}", run.mesh, {"u": u.reshape(run.mesh.n_nodes, -1)})
    if res.diverged:
        log.error("rollout diverged after %d steps", len(res.fields))
    if cfg.eval.oracle:
        ref = fem_rollout(cfg.problem, run.mesh, s.u_prev, steps, s.c, run.dirichlet(run.mesh, s))
        rows = []
        for k, r in enumerate(ref, 1):
            m = error_metrics(res.fields[k - 1], r) if k <= len(res.fields) else {"rel_l2": float("nan"),
                                                                                   "max_pointwise": float("nan")}
            rows.append((str(k), m["rel_l2"], m["max_pointwise"]))
        _write_table(run.out / "rollout_errors.csv", ("step", "rel_l2", "max_pointwise"), rows)
    return EXIT_NUMERIC if res.diverged else EXIT_OK


def cmd_fem(run: _Run) -> int:
    cfg = run.cfg
    data = run.dataset()
    rows = []
    for i in run.eval_ids(len(data)):
        s = data[i]
        res = newton_solve(cfg.problem, run.mesh, s.c, run.dirichlet(run.mesh, s), u_prev=s.u_prev,
                           full_output=True)
        rows.append((str(i), str(res.iterations), res.residual_norms[-1]))
        _export(run.out, f"fem_{i}", run.mesh, {"u": res.u.reshape(run.mesh.n_nodes, -1)})
    _write_table(run.out / "fem.csv", ("sample", "iterations", "residual"), rows)
    return EXIT_OK


def cmd_sensitivity(run: _Run) -> int:
    cfg = run.cfg
    params = run.checkpoint_params()
    data = run.dataset()
    comp = cfg.eval.component
    rows = []
    for i in run.eval_ids(len(data)):
        s = data[i]
        spec = run.dirichlet(run.mesh, s)
        u = newton_solve(cfg.problem, run.mesh, s.c, spec, u_prev=s.u_prev)
        adj = adjoint_sensitivity(cfg.problem, run.mesh, s.c, u, spec, s.u_prev, comp).map
        ad_map = ifol_sensitivity(s, params, cfg.problem, run.mesh, cfg.train, cfg.dirichlet, comp).map
        r = float(np.corrcoef(ad_map, adj)[0, 1])
        rows.append((str(i), r))
        _export(run.out, f"sensitivity_{i}", run.mesh, {"ifol": ad_map, "adjoint": adj})
    _write_table(run.out / "sensitivity.csv", ("sample", "pearson"), rows)
    log.info("mean Pearson correlation %.4f", float(np.mean([r[1] for r in rows])))
    return EXIT_OK


def cmd_gradcheck(run: _Run) -> int:
    from .checks import run_all
    results = run_all()
    for r in results:
        print(r.line())
    _write_table(run.out / "gradcheck.csv", ("check", "error", "tol", "passed"),
                 [(r.name, r.error, r.tol, str(r.passed)) for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {"sample": cmd_sample, "train": cmd_train, "infer": cmd_infer, "rollout": cmd_rollout,
            "fem": cmd_fem, "sensitivity": cmd_sensitivity, "gradcheck": cmd_gradcheck}


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("IFOL_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"IFOL_THREADS: expected an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifol", description="Implicit finite operator learning")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--checkpoint", help="checkpoint file (default: paths.checkpoint)")
    p.add_argument("--eval-mesh", help="mesh JSON to decode on (infer)")
    p.add_argument("--steps", type=int, help="rollout steps (default: eval.steps)")
    p.add_argument("--out", help="output directory (default: paths.out)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="worker threads (fallback: IFOL_THREADS)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _prepare(args) -> _Run:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    threads = _threads(args.threads)
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads: must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, threads=threads))
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.checkpoint_path()
    return _Run(cfg, Path(cfg.paths.out), ckpt, args.eval_mesh, args.steps)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        run = _prepare(args)
        return COMMANDS[args.command](run)
    except (ConfigError, KeyError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError, ConvergenceError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        # digest mismatches and malformed files surface here
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
