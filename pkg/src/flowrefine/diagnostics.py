"""Probes of the sampling dynamics: neighbour degrees, pair perturbations,
speed histograms and RMSD traces. Every statistic is built from rigid-motion
invariants (distances, speeds, aligned RMSD)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom3d import kabsch_rmsd_many
from .model import GraphBatch, MolecularGraph, VelocityModel, forward_batch
from .pipeline import Trajectory


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    mean: float
    median: float
    p05: float
    p95: float

    @classmethod
    def from_values(cls, values, edges=None, bins: int = 40) -> "Histogram":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValueError("no values to histogram")
        if edges is None:
            hi = float(v.max())
            lo = float(min(v.min(), 0.0))
            if hi <= lo:
                hi = lo + 1e-12
            edges = np.linspace(lo, hi * (1 + 1e-9) + 1e-15, bins + 1)
        edges = np.asarray(edges, dtype=np.float64)
        if np.any(np.diff(edges) <= 0):
            raise ValueError("histogram edges must be strictly increasing")
        clipped = np.clip(v, edges[0], edges[-1])
        counts, _ = np.histogram(clipped, bins=edges)
        p05, med, p95 = np.percentile(v, [5, 50, 95])
        return cls(edges, counts, int(v.size), float(v.mean()), float(med), float(p05), float(p95))


def neighbour_degrees(states: Sequence[np.ndarray], radius: float, mask=None) -> np.ndarray:
    """Per atom and state, the number of other atoms within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    out = []
    for x in states:
        x = np.asarray(x, dtype=np.float64)
        if mask is not None:
            x = x[np.asarray(mask, dtype=bool)]
        d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
        within = d <= radius
        np.fill_diagonal(within, False)
        out.append(within.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def neighbor_degree_hist(states: Sequence[np.ndarray], radius: float, mask=None) -> Histogram:
    deg = neighbour_degrees(states, radius, mask)
    top = int(deg.max()) if deg.size else 0
    return Histogram.from_values(deg, edges=np.arange(-0.5, top + 1.5, 1.0))


def noisy_states(x1, noise: float, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    return x1[None] + noise * rng.standard_normal((n_samples,) + x1.shape)


def degree_vs_time(conformers: Sequence[np.ndarray], sigma: float, radius: float, rng: np.random.Generator,
                   times: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0), n_samples: int = 200) -> list[tuple[float, float, Histogram]]:
    """Neighbour degrees of refiner training states ``x1 + (1 - t) sigma eps`` on a time grid.

    Returns ``(t, noise scale, histogram)`` per grid point.
    """
    rows = []
    for t in times:
        noise = (1.0 - t) * sigma
        states = [s for x1 in conformers for s in noisy_states(x1, noise, n_samples, rng)]
        rows.append((float(t), float(noise), neighbor_degree_hist(states, radius)))
    return rows


def pair_perturbation_stats(x1, sigma: float, n_samples: int, rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
    """Empirical per-coordinate std of ``r_ij(noisy) - r_ij(clean)`` for every pair ``i < j``.

    Both endpoints receive independent isotropic noise of scale ``sigma``.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    ref = x1[ju] - x1[iu]
    total = np.zeros(len(iu))
    sq = np.zeros(len(iu))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        noisy = noisy_states(x1, sigma, m, rng)
        delta = (noisy[:, ju] - noisy[:, iu]) - ref
        total += delta.sum(axis=(0, 2))
        sq += (delta * delta).sum(axis=(0, 2))
        done += m
    count = 3.0 * n_samples
    mean = total / count
    var = sq / count - mean * mean
    return np.sqrt(np.maximum(var, 0.0) * count / (count - 1.0))


def trajectory_speeds(trajectories: Sequence[Trajectory], t_max: float | None = None) -> np.ndarray:
    """Per-atom speeds recorded along the trajectories (optionally only for ``t <= t_max``)."""
    speeds = [
        np.linalg.norm(p.velocity, axis=1)
        for tr in trajectories
        for p in tr.points
        if p.velocity is not None and (t_max is None or p.t <= t_max)
    ]
    if not speeds:
        raise ValueError("trajectories carry no velocities")
    return np.concatenate(speeds)


def randomized_time_speeds(trajectories: Sequence[Trajectory], graphs: Sequence[MolecularGraph], model: VelocityModel,
                           rng: np.random.Generator) -> np.ndarray:
    """Re-evaluate the model on the visited states at uniform-random times."""
    states, owners = [], []
    for tr, g in zip(trajectories, graphs):
        for p in tr.points:
            if p.velocity is not None:
                states.append(p.state)
                owners.append(g)
    if not states:
        raise ValueError("trajectories carry no states")
    batch = GraphBatch(owners)
    v = forward_batch(model, batch, batch.pack(states), rng.uniform(0.0, 1.0, size=len(states)))
    return np.concatenate([np.linalg.norm(vi, axis=1) for vi in batch.unpack(v)])


def velocity_histogram(trajectories: Sequence[Trajectory], mode: str = "correct_t", model: VelocityModel | None = None,
                       graphs: Sequence[MolecularGraph] | None = None, rng: np.random.Generator | None = None,
                       edges=None, bins: int = 40) -> Histogram:
    if len(trajectories) == 0:
        raise ValueError("no trajectories")
    if mode == "correct_t":
        speeds = trajectory_speeds(trajectories)
    elif mode == "randomized_t":
        if model is None or graphs is None:
            raise ValueError("randomized_t mode needs the model and the graphs")
        speeds = randomized_time_speeds(trajectories, graphs, model, rng if rng is not None else np.random.default_rng(0))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Histogram.from_values(speeds, edges=edges, bins=bins)


def rmsd_trace(trajectory: Trajectory, references: Sequence[np.ndarray]) -> list[tuple[float, float]]:
    """Minimum aligned RMSD to the reference set at every recorded time."""
    refs = np.stack([np.asarray(r, dtype=np.float64) for r in references])
    return [(p.t, float(kabsch_rmsd_many(p.state[None], refs).min())) for p in trajectory.points]


def write_histogram_tsv(path, hist: Histogram, label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["# label", label, "total", hist.total, "mean", f"{hist.mean:.6f}", "median", f"{hist.median:.6f}",
                    "p05", f"{hist.p05:.6f}", "p95", f"{hist.p95:.6f}"])
        w.writerow(["lower", "upper", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])


def write_trace_tsv(path, traces: Sequence[tuple[str, int, list[tuple[float, float]]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["molecule", "conformer", "t", "rmsd"])
        for mol_id, idx, trace in traces:
            for t, r in trace:
                w.writerow([mol_id, idx, f"{t:.6f}", f"{r:.6f}"])
