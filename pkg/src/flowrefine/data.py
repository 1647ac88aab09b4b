"""Toy conformer datasets and the file formats around them.

Toy molecules are unbranched chains with fixed bond lengths and angles. A few
torsions are rotatable and take one of the preferred angles of a torsion
profile; the rest sit on double bonds locked at 180 degrees. Every molecule
lists one reference conformer per torsion basin, so reference ensembles are
complete and precision metrics measure geometry rather than basin sampling.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .geom3d import as_points, dihedral, kabsch_rmsd_many
from .model import MolecularGraph

ELEMENTS = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
GRAPH_HEADER = "flowrefine-graph 1"
MANIFEST_HEADER = "flowrefine-manifest 1"


def kind_of(symbol: str) -> int:
    try:
        return ELEMENTS.index(symbol)
    except ValueError:
        raise ValueError(f"unsupported element {symbol!r}") from None


def symbol_of(kind: int) -> str:
    return ELEMENTS[kind]


@dataclass
class MoleculeRecord:
    id: str
    graph: MolecularGraph
    references: list[np.ndarray]
    basin_labels: list[int] | None = None

    def __post_init__(self):
        if len(self.references) < 1:
            raise ValueError(f"molecule {self.id}: needs at least one reference conformer")
        self.references = [as_points(r, f"{self.id} reference") for r in self.references]
        for r in self.references:
            if r.shape[0] != self.graph.n_atoms:
                raise ValueError(f"molecule {self.id}: reference has {r.shape[0]} atoms, graph has {self.graph.n_atoms}")
        if self.basin_labels is not None and len(self.basin_labels) != len(self.references):
            raise ValueError(f"molecule {self.id}: one basin label per reference required")


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_molecules: int = 200
    min_length: int = 4
    max_length: int = 8
    torsion_profile: tuple[float, ...] = (-60.0, 60.0, 180.0)
    bond_length: float = 1.5
    bond_angle: float = 112.0
    jitter: float = 0.05
    seed: int = 0
    max_rotatable: int = 2
    locked_torsion: float = 180.0
    element: str = "C"
    id_prefix: str = "mol"

    def __post_init__(self):
        if self.min_length < 4 or self.max_length < self.min_length:
            raise ValueError("chain lengths must satisfy 4 <= min_length <= max_length")
        if not 0.0 < self.bond_angle < 180.0:
            raise ValueError("bond angle must lie in (0, 180) degrees")
        if len(self.torsion_profile) < 1:
            raise ValueError("torsion profile is empty")
        if self.max_rotatable < 1:
            raise ValueError("max_rotatable must be >= 1")
        if self.jitter < 0 or self.bond_length <= 0:
            raise ValueError("jitter must be >= 0 and bond length > 0")
        object.__setattr__(self, "torsion_profile", tuple(float(a) for a in self.torsion_profile))


def _place_atom(a, b, c, length, angle_deg, torsion_deg):
    """Position d with |cd| = length, angle bcd and dihedral abcd as given."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    theta = np.radians(angle_deg)
    phi = np.radians(torsion_deg)
    local = np.array([-length * np.cos(theta), length * np.sin(theta) * np.cos(phi), length * np.sin(theta) * np.sin(phi)])
    return c + local[0] * bc + local[1] * m + local[2] * n


def build_chain(torsions: Sequence[float], bond_length: float, bond_angle: float) -> np.ndarray:
    """Chain coordinates for ``len(torsions) + 3`` atoms from internal coordinates."""
    n = len(torsions) + 3
    x = np.zeros((n, 3))
    x[1] = [bond_length, 0.0, 0.0]
    theta = np.radians(bond_angle)
    x[2] = x[1] + bond_length * np.array([-np.cos(theta), np.sin(theta), 0.0])
    for k in range(3, n):
        x[k] = _place_atom(x[k - 3], x[k - 2], x[k - 1], bond_length, bond_angle, torsions[k - 3])
    return x - x.mean(axis=0)


def torsion_quads(graph: MolecularGraph) -> list[tuple[int, int, int, int]]:
    """One dihedral per bond whose both ends carry another neighbour."""
    order = graph.bond_order
    quads = []
    for i, j, _ in sorted((min(a, b), max(a, b), o) for a, b, o in graph.bonds):
        left = [a for a in np.flatnonzero(order[i]) if a != j]
        right = [d for d in np.flatnonzero(order[j]) if d != i]
        if left and right:
            quads.append((int(min(left)), i, j, int(min(right))))
    return quads


def assign_basin(coords, graph: MolecularGraph, profile: Sequence[float]) -> tuple[int, ...]:
    """Index of the nearest profile angle for every torsion of the conformer."""
    x = np.asarray(coords, dtype=np.float64)
    prof = np.asarray(profile, dtype=np.float64)
    label = []
    for a, b, c, d in torsion_quads(graph):
        phi = dihedral(x[a], x[b], x[c], x[d])
        gap = np.abs((prof - phi + 180.0) % 360.0 - 180.0)
        label.append(int(np.argmin(gap)))
    return tuple(label)


def _chain_graph(n: int, locked: set[int], element: str) -> MolecularGraph:
    bonds = []
    for k in range(n - 1):
        # torsion k (atoms k..k+3) turns about bond (k+1, k+2)
        order = 2 if (k - 1) in locked else 1
        bonds.append((k, k + 1, order))
    return MolecularGraph([kind_of(element)] * n, bonds)


def synth_molecule(spec: ToyDatasetSpec, rng: np.random.Generator, mol_id: str) -> MoleculeRecord:
    n = int(rng.integers(spec.min_length, spec.max_length + 1))
    n_torsions = n - 3
    n_rot = int(rng.integers(1, min(spec.max_rotatable, n_torsions) + 1))
    rotatable = sorted(int(k) for k in rng.choice(n_torsions, size=n_rot, replace=False))
    locked = set(range(n_torsions)) - set(rotatable)
    graph = _chain_graph(n, locked, spec.element)
    references, labels = [], []
    assignments = itertools.product(range(len(spec.torsion_profile)), repeat=n_rot)
    for label, choice in enumerate(assignments):
        torsions = [spec.locked_torsion] * n_torsions
        for k, c in zip(rotatable, choice):
            torsions[k] = spec.torsion_profile[c]
        x = build_chain(torsions, spec.bond_length, spec.bond_angle)
        if spec.jitter > 0:
            x = x + spec.jitter * rng.standard_normal(x.shape)
            x = x - x.mean(axis=0)
        references.append(x)
        labels.append(label)
    return MoleculeRecord(mol_id, graph, references, labels)


def synth_dataset(spec: ToyDatasetSpec, rng: np.random.Generator | None = None) -> list[MoleculeRecord]:
    """Deterministic toy dataset; each molecule draws from its own child seed."""
    if rng is not None:
        root = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    else:
        root = np.random.SeedSequence(spec.seed)
    children = root.spawn(spec.n_molecules)
    width = max(4, len(str(spec.n_molecules - 1)))
    return [
        synth_molecule(spec, np.random.default_rng(child), f"{spec.id_prefix}{k:0{width}d}")
        for k, child in enumerate(children)
    ]


def dataset_digest(records: Sequence[MoleculeRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.id.encode())
        h.update(np.asarray(rec.graph.atom_kinds, dtype=np.int64).tobytes())
        h.update(np.asarray(rec.graph.bonds, dtype=np.int64).tobytes())
        for r in rec.references:
            h.update(np.ascontiguousarray(r).tobytes())
    return h.hexdigest()


def min_interbasin_rmsd(record: MoleculeRecord) -> float:
    refs = np.stack(record.references)
    mat = kabsch_rmsd_many(refs[:, None], refs[None, :])
    labels = np.asarray(record.basin_labels if record.basin_labels is not None else range(len(refs)))
    differ = labels[:, None] != labels[None, :]
    return float(mat[differ].min()) if differ.any() else float("inf")


# --- XYZ -----------------------------------------------------------------------


class XYZParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class XYZFrames(NamedTuple):
    frames: list[np.ndarray]
    symbols: list[str]
    comments: list[str]


def format_coord(value: float) -> str:
    """Ten significant digits in positional notation."""
    return np.format_float_positional(float(value) + 0.0, precision=10, unique=False, fractional=False, trim="k")


def write_xyz(path, frames: Sequence[np.ndarray], symbols: Sequence[str], comments: Sequence[str] | None = None) -> None:
    lines = []
    for k, frame in enumerate(frames):
        frame = as_points(frame, "frame")
        if frame.shape[0] != len(symbols):
            raise ValueError(f"frame {k} has {frame.shape[0]} atoms, {len(symbols)} symbols given")
        lines.append(str(frame.shape[0]))
        comment = comments[k] if comments is not None else f"frame {k}"
        lines.append(comment.replace("\n", " "))
        for sym, row in zip(symbols, frame):
            lines.append(f"{sym} {format_coord(row[0])} {format_coord(row[1])} {format_coord(row[2])}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_xyz(path) -> XYZFrames:
    """Parse a multi-frame XYZ file; all frames must share the element list."""
    text = Path(path).read_text().splitlines()
    frames, comments = [], []
    symbols: list[str] | None = None
    pos = 0
    while pos < len(text):
        if not text[pos].strip():
            pos += 1
            continue
        try:
            count = int(text[pos].strip())
        except ValueError:
            raise XYZParseError(path, pos + 1, f"expected atom count, got {text[pos]!r}") from None
        if count < 1:
            raise XYZParseError(path, pos + 1, f"atom count must be positive, got {count}")
        if pos + 1 >= len(text):
            raise XYZParseError(path, pos + 2, "missing comment line")
        comments.append(text[pos + 1])
        syms, rows = [], []
        for k in range(count):
            lineno = pos + 2 + k
            if lineno >= len(text) or not text[lineno].strip():
                raise XYZParseError(path, lineno + 1, f"frame truncated: expected {count} atoms, found {k}")
            parts = text[lineno].split()
            if len(parts) < 4:
                raise XYZParseError(path, lineno + 1, "expected element and three coordinates")
            try:
                rows.append([float(v) for v in parts[1:4]])
            except ValueError:
                raise XYZParseError(path, lineno + 1, f"non-numeric coordinate in {text[lineno]!r}") from None
            syms.append(parts[0])
        if symbols is None:
            symbols = syms
        elif syms != symbols:
            raise XYZParseError(path, pos + 1, "element list differs from the first frame")
        frame = np.array(rows, dtype=np.float64)
        if not np.all(np.isfinite(frame)):
            raise XYZParseError(path, pos + 1, "non-finite coordinate")
        frames.append(frame)
        pos += 2 + count
    return XYZFrames(frames, symbols or [], comments)


# --- graph and manifest files ----------------------------------------------------


def write_graph(path, graph: MolecularGraph) -> None:
    lines = [GRAPH_HEADER, "atoms " + " ".join(symbol_of(k) for k in graph.atom_kinds)]
    lines += [f"bond {i} {j} {o}" for i, j, o in graph.bonds]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> MolecularGraph:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    if not lines or lines[0] != GRAPH_HEADER:
        raise ValueError(f"{path}:1: expected header {GRAPH_HEADER!r}")
    kinds, bonds = None, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "atoms":
            kinds = [kind_of(s) for s in rest]
        elif key == "bond":
            if len(rest) != 3:
                raise ValueError(f"{path}:{lineno}: bond needs 'i j order'")
            bonds.append(tuple(int(v) for v in rest))
        else:
            raise ValueError(f"{path}:{lineno}: unknown record {key!r}")
    if kinds is None:
        raise ValueError(f"{path}: missing atoms record")
    return MolecularGraph(kinds, bonds)


@dataclass
class UpstreamEnsemble:
    """Generated conformers for one molecule; ``indices`` pair them one-to-one after refinement."""

    molecule_id: str
    conformers: list[np.ndarray]
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.indices:
            self.indices = list(range(len(self.conformers)))


def write_dataset(root, records: Sequence[MoleculeRecord], generated: dict[str, Sequence[np.ndarray]] | None = None) -> Path:
    """Write graphs, reference XYZ files and a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for rec in records:
        symbols = [symbol_of(k) for k in rec.graph.atom_kinds]
        write_graph(root / f"{rec.id}.graph", rec.graph)
        comments = None
        if rec.basin_labels is not None:
            comments = [f"basin {b}" for b in rec.basin_labels]
        write_xyz(root / f"{rec.id}.ref.xyz", rec.references, symbols, comments)
        gen_name = "-"
        if generated is not None and rec.id in generated:
            gen_name = f"{rec.id}.gen.xyz"
            write_xyz(root / gen_name, generated[rec.id], symbols)
        lines.append(f"molecule {rec.id} {rec.id}.graph {rec.id}.ref.xyz {gen_name}")
    path = root / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _basin_from_comment(comment: str):
    parts = comment.split()
    if len(parts) == 2 and parts[0] == "basin":
        try:
            return int(parts[1])
        except ValueError:
            return None
    return None


def read_ensemble_manifest(path) -> tuple[list[MoleculeRecord], list[UpstreamEnsemble]]:
    """Load references and (optional) upstream ensembles listed in a manifest.

    Each line reads ``molecule <id> <graph> <references.xyz> <generated.xyz|->``
    with paths relative to the manifest. Atom counts are cross-checked
    against the graph.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    lines = path.read_text().splitlines()
    if not any(ln.strip() for ln in lines):
        return [], []
    if lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{path}:1: expected header {MANIFEST_HEADER!r}")
    records, ensembles, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] != "molecule":
            raise ValueError(f"{path}:{lineno}: expected 'molecule <id> <graph> <refs> <generated>'")
        _, mol_id, graph_file, ref_file, gen_file = parts
        if mol_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate molecule id {mol_id!r}")
        seen.add(mol_id)
        for f in (graph_file, ref_file) + ((gen_file,) if gen_file != "-" else ()):
            if not (base / f).exists():
                raise FileNotFoundError(f"molecule {mol_id}: missing file {base / f}")
        graph = read_graph(base / graph_file)
        refs = read_xyz(base / ref_file)
        _check_symbols(mol_id, graph, refs.symbols, "reference")
        labels = [_basin_from_comment(c) for c in refs.comments]
        records.append(MoleculeRecord(mol_id, graph, refs.frames, labels if None not in labels else None))
        gen_frames: list[np.ndarray] = []
        if gen_file != "-":
            gen = read_xyz(base / gen_file)
            _check_symbols(mol_id, graph, gen.symbols, "generated")
            gen_frames = gen.frames
        ensembles.append(UpstreamEnsemble(mol_id, gen_frames))
    return records, ensembles


def _check_symbols(mol_id: str, graph: MolecularGraph, symbols: list[str], what: str) -> None:
    if len(symbols) != graph.n_atoms:
        raise ValueError(f"molecule {mol_id}: {what} conformers have {len(symbols)} atoms, graph has {graph.n_atoms}")
    if [kind_of(s) for s in symbols] != graph.atom_kinds:
        raise ValueError(f"molecule {mol_id}: {what} element list does not match graph")
