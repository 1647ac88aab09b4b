"""Ensemble metrics: coverage and average minimum RMSD, plus paired IR/DR rates.

Matrices are laid out ``(L, K)``: rows are reference conformers, columns are
generated conformers. Recall reduces over columns (per reference), precision
over rows (per generated conformer).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom3d import kabsch_rmsd_many


def rmsd_matrix(generated: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> np.ndarray:
    """Kabsch-aligned RMSD between every reference (rows) and generated conformer (columns)."""
    if len(generated) == 0 or len(references) == 0:
        raise ValueError("empty ensemble")
    gen = np.stack([np.asarray(g, dtype=np.float64) for g in generated])
    ref = np.stack([np.asarray(r, dtype=np.float64) for r in references])
    if gen.shape[1:] != ref.shape[1:]:
        raise ValueError(f"atom-count mismatch: generated {gen.shape[1]} vs reference {ref.shape[1]}")
    return kabsch_rmsd_many(gen[None, :], ref[:, None])


def _check(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("empty ensemble")
    return m


def coverage_recall(matrix, delta: float) -> float:
    """Percent of references whose closest generated conformer is strictly below ``delta``."""
    m = _check(matrix)
    hits = int(np.count_nonzero(m.min(axis=1) < delta))
    return 100.0 * hits / m.shape[0]


def amr_recall(matrix) -> float:
    return float(_check(matrix).min(axis=1).mean())


def coverage_precision(matrix, delta: float) -> float:
    return coverage_recall(_check(matrix).T, delta)


def amr_precision(matrix) -> float:
    return amr_recall(_check(matrix).T)


def precision_rmsd(conformers: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> np.ndarray:
    """Per-conformer minimum RMSD over the reference set."""
    return rmsd_matrix(conformers, references).min(axis=0)


@dataclass
class Summary:
    mean: float
    median: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(np.median(v)))


@dataclass
class MoleculeRow:
    molecule_id: str
    n_references: int
    n_generated: int
    cov_r: float
    amr_r: float
    cov_p: float
    amr_p: float


@dataclass
class EnsembleReport:
    delta: float
    cov_r: Summary
    amr_r: Summary
    cov_p: Summary
    amr_p: Summary
    per_molecule: list[MoleculeRow]
    label: str = ""
    # externally computed chemical-property errors, merged verbatim
    external: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def molecule_row(mol_id: str, matrix, delta: float) -> MoleculeRow:
    m = _check(matrix)
    return MoleculeRow(
        mol_id, m.shape[0], m.shape[1],
        coverage_recall(m, delta), amr_recall(m),
        coverage_precision(m, delta), amr_precision(m),
    )


def ensemble_report(matrices: dict[str, np.ndarray], delta: float, label: str = "") -> EnsembleReport:
    """Aggregate per-molecule metrics (mean and median across molecules)."""
    if not matrices:
        raise ValueError("empty ensemble")
    rows = [molecule_row(mid, m, delta) for mid, m in matrices.items()]
    return EnsembleReport(
        delta,
        Summary.of([r.cov_r for r in rows]),
        Summary.of([r.amr_r for r in rows]),
        Summary.of([r.cov_p for r in rows]),
        Summary.of([r.amr_p for r in rows]),
        rows,
        label,
    )


@dataclass
class IrDrRow:
    tau: float
    improvement_rate: float
    downgrade_rate: float
    n_pairs: int


def improvement_downgrade(before, after, taus: Sequence[float]) -> list[IrDrRow]:
    """Percent of pairs improving (``before - after > tau``) or degrading (``after - before > tau``)."""
    b = np.asarray(before, dtype=np.float64)
    a = np.asarray(after, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError(f"paired lists differ in length: {b.shape} vs {a.shape}")
    n = b.size
    rows = []
    for tau in taus:
        if n == 0:
            rows.append(IrDrRow(float(tau), 0.0, 0.0, 0))
            continue
        ir = 100.0 * np.count_nonzero(b - a > tau) / n
        dr = 100.0 * np.count_nonzero(a - b > tau) / n
        rows.append(IrDrRow(float(tau), float(ir), float(dr), n))
    return rows


# --- emitters --------------------------------------------------------------------

REPORT_COLUMNS = ["label", "delta", "cov_r_mean", "cov_r_median", "amr_r_mean", "amr_r_median",
                  "cov_p_mean", "cov_p_median", "amr_p_mean", "amr_p_median"]


def _report_row(rep: EnsembleReport) -> list[str]:
    vals = [rep.cov_r.mean, rep.cov_r.median, rep.amr_r.mean, rep.amr_r.median,
            rep.cov_p.mean, rep.cov_p.median, rep.amr_p.mean, rep.amr_p.median]
    return [rep.label, f"{rep.delta:g}"] + [f"{v:.4f}" for v in vals]


def write_report_tsv(path, reports: Sequence[EnsembleReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            w.writerow(_report_row(rep))


def write_per_molecule_tsv(path, report: EnsembleReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["molecule", "n_references", "n_generated", "cov_r", "amr_r", "cov_p", "amr_p"])
        for r in report.per_molecule:
            w.writerow([r.molecule_id, r.n_references, r.n_generated,
                        f"{r.cov_r:.4f}", f"{r.amr_r:.6f}", f"{r.cov_p:.4f}", f"{r.amr_p:.6f}"])


def write_irdr_tsv(path, rows: Sequence[IrDrRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["tau", "improvement_rate", "downgrade_rate", "n_pairs"])
        for r in rows:
            w.writerow([f"{r.tau:g}", f"{r.improvement_rate:.2f}", f"{r.downgrade_rate:.2f}", r.n_pairs])


def write_json(path, payload) -> None:
    def convert(obj):
        if isinstance(obj, (EnsembleReport, IrDrRow, Summary, MoleculeRow)):
            return asdict(obj)
        if isinstance(obj, np.generic):
            return obj.item()
        raise TypeError(f"cannot serialise {type(obj)}")

    Path(path).write_text(json.dumps(payload, default=convert, indent=2, sort_keys=True) + "\n")
