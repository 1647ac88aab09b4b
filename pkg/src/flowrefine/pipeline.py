"""Training and sampling loops for the refiner and the pure-noise generator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geom3d import kabsch_align, kabsch_rmsd_many
from .interpolant import Schedule, ScheduleKind, interpolate, target_velocity
from .model import (
    GraphBatch,
    MolecularGraph,
    OptimizerState,
    VelocityModel,
    forward_batch,
    loss_and_grad_batch,
    optimizer_step,
)

log = logging.getLogger(__name__)

# field(x, t) -> velocity, on padded (B, n, 3) arrays with t of shape (B,)
Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


class TrainingDivergedError(FloatingPointError):
    pass


class RefinementError(FloatingPointError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 1.0
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    align_base: bool = True
    time_margin: float = 1e-3
    # cosine decay of the learning rate towards this value; None keeps it constant
    lr_final: float | None = None
    # draw noise and times once and reuse them every epoch (memorisation checks)
    freeze_noise: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or (self.lr_final is not None and self.lr_final < 0):
            raise ValueError("learning rates must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 20
    times: tuple[float, ...] | None = None
    capture_trajectory: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.times is not None:
            times = tuple(float(t) for t in self.times)
            if len(times) != self.n_steps + 1:
                raise ValueError("times must hold n_steps + 1 entries")
            if times[0] != 0.0 or times[-1] != 1.0:
                raise ValueError("time schedule must start at 0 and end at 1")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("time schedule must be strictly increasing")
            object.__setattr__(self, "times", times)

    def schedule(self) -> np.ndarray:
        if self.times is not None:
            return np.array(self.times)
        return np.linspace(0.0, 1.0, self.n_steps + 1)


@dataclass
class TrajectoryPoint:
    t: float
    state: np.ndarray
    velocity: np.ndarray | None
    mean_speed: float


@dataclass
class Trajectory:
    """States visited by the Euler sampler; the last point is the final state at t=1."""

    points: list[TrajectoryPoint]

    @property
    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.points])

    @property
    def centroid_drift(self) -> float:
        first, last = self.points[0].state, self.points[-1].state
        return float(np.linalg.norm(last.mean(axis=0) - first.mean(axis=0)))

    def __len__(self) -> int:
        return len(self.points)


def model_field(model: VelocityModel, batch: GraphBatch) -> Field:
    return lambda x, t: forward_batch(model, batch, x, t)


def _training_pairs(dataset) -> list[tuple[int, int]]:
    return [(m, r) for m, rec in enumerate(dataset) for r in range(len(rec.references))]


def _make_item(x1: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    n = x1.shape[0]
    eps = rng.standard_normal((n, 3))
    if cfg.schedule.kind is ScheduleKind.GENERATOR_GAUSSIAN:
        eps = eps - eps.mean(axis=0)
        x0 = cfg.sigma * eps
    else:
        x0 = x1 + cfg.sigma * eps
    if cfg.align_base and n >= 3:
        x0 = kabsch_align(x0, x1).aligned
    t = float(cfg.schedule.sample_time(rng, margin=cfg.time_margin))
    z = rng.standard_normal((n, 3)) if cfg.schedule.stochastic else None
    xt = interpolate(x0, x1, t, cfg.schedule, z)
    ut = target_velocity(x0, x1, t, cfg.schedule, z)
    return xt, t, ut


def train_flow(dataset, model: VelocityModel, cfg: TrainConfig, rng: np.random.Generator | None = None, state: OptimizerState | None = None):
    """Regress the model onto interpolant velocities.

    The base is ``x1 + sigma*eps`` for the refiner schedule and ``sigma*eps``
    (centred) for the generator schedule; it is Kabsch-aligned onto ``x1``
    when ``cfg.align_base``. One epoch visits every reference conformer once
    in shuffled order. Returns ``(model, per-epoch mean losses, state)``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = state or OptimizerState.create(model, lr=cfg.lr)
    pairs = _training_pairs(dataset)
    frozen = [_make_item(dataset[m].references[r], cfg, rng) for m, r in pairs] if cfg.freeze_noise else None
    history = []
    for epoch in range(cfg.epochs):
        state = replace(state, lr=cfg.lr_at(epoch))
        order = rng.permutation(len(pairs))
        losses, weights = [], []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [pairs[k] for k in order[start : start + cfg.batch_size]]
            graphs = [dataset[m].graph for m, _ in chosen]
            if frozen is not None:
                items = [frozen[k] for k in order[start : start + cfg.batch_size]]
            else:
                items = [_make_item(dataset[m].references[r], cfg, rng) for m, r in chosen]
            batch = GraphBatch(graphs)
            xt = batch.pack([it[0] for it in items])
            ut = batch.pack([it[2] for it in items])
            loss, grads = loss_and_grad_batch(model, batch, xt, [it[1] for it in items], ut)
            if not np.isfinite(loss):
                ids = ",".join(dataset[m].id for m, _ in chosen)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}, molecules {ids}")
            model, state = optimizer_step(model, grads, state)
            losses.append(loss)
            weights.append(len(chosen))
        history.append(float(np.average(losses, weights=weights)))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return model, history, state


def train_refiner(dataset, model: VelocityModel, cfg: TrainConfig, rng: np.random.Generator | None = None):
    if cfg.schedule.kind is not ScheduleKind.REFINER_LINEAR:
        raise ValueError("train_refiner needs a refiner_linear schedule")
    model, history, _ = train_flow(dataset, model, cfg, rng)
    return model, history


def train_generator(dataset, model: VelocityModel, cfg: TrainConfig, rng: np.random.Generator | None = None):
    if cfg.schedule.kind is not ScheduleKind.GENERATOR_GAUSSIAN:
        raise ValueError("train_generator needs a generator_gaussian schedule")
    model, history, _ = train_flow(dataset, model, cfg, rng)
    return model, history


def euler_integrate(field_fn: Field, x0: np.ndarray, times: np.ndarray, capture: bool = False, atom_mask=None):
    """Forward Euler on a padded batch ``(B, n, 3)``.

    Returns the final state and, if ``capture``, a list of per-step
    ``(t, state, velocity)`` tuples followed by ``(1.0, final, None)``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    record = []
    for k in range(len(times) - 1):
        t = float(times[k])
        v = field_fn(x, np.full(x.shape[0], t))
        if capture:
            record.append((t, x.copy(), v.copy()))
        x = x + (times[k + 1] - times[k]) * v
        bad = ~np.isfinite(x)
        if atom_mask is not None:
            bad &= atom_mask[..., None]
        if bad.any():
            raise RefinementError(f"non-finite state after step {k}", step=k)
    if capture:
        record.append((float(times[-1]), x.copy(), None))
    return x, record


def _trajectories(record, batch: GraphBatch) -> list[Trajectory]:
    out = []
    for item, n in enumerate(batch.sizes):
        points = []
        for t, x, v in record:
            state = x[item, :n].copy()
            if v is None:
                points.append(TrajectoryPoint(t, state, None, float("nan")))
            else:
                vel = v[item, :n].copy()
                points.append(TrajectoryPoint(t, state, vel, float(np.linalg.norm(vel, axis=1).mean())))
        out.append(Trajectory(points))
    return out


def refine_many(model, starts: Sequence[np.ndarray], graphs: Sequence[MolecularGraph], cfg: SampleConfig):
    """Euler-integrate many conformers at once from t=0 to t=1.

    ``model`` is a :class:`VelocityModel` or a field ``f(x, t)`` acting on
    padded arrays. Returns ``(refined list, trajectories or None)``.
    """
    if len(starts) == 0:
        return [], ([] if cfg.capture_trajectory else None)
    batch = GraphBatch(graphs)
    x0 = batch.pack(starts)
    field_fn = model if callable(model) else model_field(model, batch)
    x, record = euler_integrate(field_fn, x0, cfg.schedule(), cfg.capture_trajectory, batch.atom_mask)
    refined = batch.unpack(x)
    return refined, (_trajectories(record, batch) if cfg.capture_trajectory else None)


def refine(model, x_hat, graph: MolecularGraph, cfg: SampleConfig):
    """Refine one upstream conformer by Euler integration of the learned flow."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.shape != (graph.n_atoms, 3):
        raise ValueError(f"conformer {x_hat.shape} does not match graph with {graph.n_atoms} atoms")
    refined, trajs = refine_many(model, [x_hat], [graph], cfg)
    return refined[0], (trajs[0] if trajs is not None else None)


def noise_draws(graphs: Sequence[MolecularGraph], sigma: float, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for g in graphs:
        eps = rng.standard_normal((g.n_atoms, 3))
        out.append(sigma * (eps - eps.mean(axis=0)))
    return out


def generate_many(model_gen, graphs: Sequence[MolecularGraph], cfg: SampleConfig, sigma: float, rng: np.random.Generator):
    """Sample conformers from centred Gaussian noise ``sigma * eps`` by Euler integration."""
    starts = noise_draws(graphs, sigma, rng)
    return refine_many(model_gen, starts, graphs, cfg)


def generate_from_noise(model_gen, graph: MolecularGraph, cfg: SampleConfig, sigma: float = 1.0, rng: np.random.Generator | None = None):
    rng = rng if rng is not None else np.random.default_rng(0)
    out, trajs = generate_many(model_gen, [graph], cfg, sigma, rng)
    return out[0], (trajs[0] if trajs is not None else None)


@dataclass
class RefinedEnsemble:
    molecule_id: str
    before: list[np.ndarray]
    after: list[np.ndarray]
    indices: list[int]
    trajectories: list[Trajectory] | None = None


def pipeline_refine_ensemble(upstream, graphs: Sequence[MolecularGraph], model, cfg: SampleConfig, molecule_ids=None) -> list[RefinedEnsemble]:
    """Refine every upstream conformer, keeping order so pairs stay one-to-one.

    ``upstream`` holds one list of conformers per molecule (or objects with
    ``conformers``/``indices``/``molecule_id`` attributes).
    """
    if len(upstream) != len(graphs):
        raise ValueError("one graph per upstream ensemble required")
    flat_x, flat_g, owner = [], [], []
    metas = []
    for m, (ens, g) in enumerate(zip(upstream, graphs)):
        confs = list(getattr(ens, "conformers", ens))
        indices = list(getattr(ens, "indices", range(len(confs))))
        mol_id = getattr(ens, "molecule_id", None) or (molecule_ids[m] if molecule_ids is not None else str(m))
        metas.append((mol_id, confs, indices))
        for c, x in enumerate(confs):
            x = np.asarray(x, dtype=np.float64)
            if x.shape != (g.n_atoms, 3):
                raise ValueError(f"molecule {mol_id}, conformer {indices[c]}: shape {x.shape} does not match graph")
            flat_x.append(x)
            flat_g.append(g)
            owner.append(m)
    try:
        refined, trajs = refine_many(model, flat_x, flat_g, cfg)
    except RefinementError as exc:
        raise RefinementError(f"{exc} while refining molecules {sorted({metas[o][0] for o in owner})}", exc.step) from exc
    out, pos = [], 0
    for mol_id, confs, indices in metas:
        k = len(confs)
        out.append(
            RefinedEnsemble(
                mol_id,
                [np.asarray(c, dtype=np.float64) for c in confs],
                refined[pos : pos + k],
                indices,
                trajs[pos : pos + k] if trajs is not None else None,
            )
        )
        pos += k
    return out


def budget_label(generator_steps: int, refiner_steps: int = 0) -> str:
    """Step budget label as ``gen+refine`` (or just ``gen`` without refinement)."""
    if refiner_steps:
        return f"{generator_steps}+{refiner_steps}"
    return str(generator_steps)


def total_steps(generator_steps: int, refiner_steps: int = 0) -> int:
    return generator_steps + refiner_steps


def write_trajectory_dump(path, ensembles: Sequence[RefinedEnsemble], references: dict[str, Sequence[np.ndarray]] | None = None) -> None:
    """Tab-separated ``molecule, conformer, t, mean_speed, rmsd`` rows."""
    lines = ["molecule\tconformer\tt\tmean_speed\trmsd"]
    for ens in ensembles:
        if ens.trajectories is None:
            continue
        refs = None
        if references is not None and ens.molecule_id in references:
            refs = np.stack(references[ens.molecule_id])
        for idx, traj in zip(ens.indices, ens.trajectories):
            for p in traj.points:
                rmsd = "nan"
                if refs is not None:
                    rmsd = f"{kabsch_rmsd_many(p.state[None], refs).min():.6f}"
                speed = "nan" if np.isnan(p.mean_speed) else f"{p.mean_speed:.6f}"
                lines.append(f"{ens.molecule_id}\t{idx}\t{p.t:.6f}\t{speed}\t{rmsd}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
