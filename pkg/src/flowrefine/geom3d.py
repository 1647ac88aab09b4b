"""Rigid-body geometry on (N, 3) coordinate arrays.

Point sets are plain float64 numpy arrays of shape ``(N, 3)`` in Angstrom.
Everything here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by the geometry routines."""

    orthonormal: float = 1e-10
    # singular value ratio below which the cross-covariance counts as rank deficient
    degenerate_ratio: float = 1e-9
    degenerate_abs: float = 1e-12


TOL = Tolerances()


def as_points(p, name: str = "points") -> np.ndarray:
    """Validate and convert ``p`` to a float64 ``(N, 3)`` array."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def _check_same_size(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > TOL.orthonormal:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > TOL.orthonormal:
            raise ValueError("rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Return ``self o first``, i.e. apply ``first`` then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


class Alignment(NamedTuple):
    aligned: np.ndarray
    transform: RigidTransform
    rmsd: float
    degenerate: bool


def center(p) -> np.ndarray:
    """Translate ``p`` so its centroid sits at the origin."""
    p = as_points(p)
    return p - p.mean(axis=0)


def apply(xf: RigidTransform, p) -> np.ndarray:
    p = as_points(p)
    return p @ xf.rotation.T + xf.translation


def rmsd(a, b) -> float:
    """Root-mean-square deviation without any alignment."""
    a = as_points(a, "a")
    b = as_points(b, "b")
    _check_same_size(a, b)
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff) / a.shape[0]))


def _proper_rotation(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal proper rotations from cross-covariances ``sum_i p_i q_i^T``.

    Works on a single (3, 3) matrix or a stack (..., 3, 3). Returns the
    rotations and the singular values (sign-corrected for reflections).
    """
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.swapaxes(-1, -2) @ u.swapaxes(-1, -2)))
    d = np.where(d == 0, 1.0, d)
    vt = vt.copy()
    vt[..., 2, :] *= d[..., None]
    s = s.copy()
    s[..., 2] *= d
    rot = vt.swapaxes(-1, -2) @ u.swapaxes(-1, -2)
    return rot, s


def kabsch_align(mobile, reference) -> Alignment:
    """Superpose ``mobile`` onto ``reference`` with the optimal proper motion.

    Returns the aligned copy of ``mobile``, the transform, the resulting RMSD
    and a ``degenerate`` flag. The flag is set when the cross-covariance has
    rank below two (collinear or coincident points); the rotation is then
    one of several optimal ones.
    """
    p = as_points(mobile, "mobile")
    q = as_points(reference, "reference")
    _check_same_size(p, q)
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    pc = p - p_mean
    qc = q - q_mean
    cov = pc.T @ qc
    rot, s = _proper_rotation(cov)
    raw = np.abs(s)
    scale = max(raw[0], TOL.degenerate_abs)
    degenerate = bool(raw[0] <= TOL.degenerate_abs or raw[1] <= TOL.degenerate_ratio * scale)
    xf = RigidTransform(rot, q_mean - rot @ p_mean)
    aligned = pc @ rot.T + q_mean
    return Alignment(aligned, xf, rmsd(aligned, q), degenerate)


def kabsch_rmsd_many(mobile: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Aligned RMSD for stacks of pairs, shapes ``(..., N, 3)`` broadcastable.

    Same objective as :func:`kabsch_align`, vectorised. The residual is
    formed explicitly after rotating; the singular-value shortcut loses all
    precision near zero RMSD.
    """
    p = np.asarray(mobile, dtype=np.float64)
    q = np.asarray(reference, dtype=np.float64)
    n = p.shape[-2]
    if q.shape[-2] != n:
        raise ValueError("atom counts differ")
    pc = p - p.mean(axis=-2, keepdims=True)
    qc = q - q.mean(axis=-2, keepdims=True)
    cov = pc.swapaxes(-1, -2) @ qc
    rot, _ = _proper_rotation(cov)
    diff = pc @ rot.swapaxes(-1, -2) - qc
    return np.sqrt(np.sum(diff * diff, axis=(-1, -2)) / n)


def align_many(mobile: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Batched counterpart of ``kabsch_align(...).aligned`` for ``(B, N, 3)`` stacks."""
    p = np.asarray(mobile, dtype=np.float64)
    q = np.asarray(reference, dtype=np.float64)
    p_mean = p.mean(axis=-2, keepdims=True)
    q_mean = q.mean(axis=-2, keepdims=True)
    cov = (p - p_mean).swapaxes(-1, -2) @ (q - q_mean)
    rot, _ = _proper_rotation(cov)
    return (p - p_mean) @ rot.swapaxes(-1, -2) + q_mean


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) (unit quaternion method)."""
    w, x, y, z = rng.normal(size=4)
    norm = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def dihedral(a, b, c, d) -> float:
    """Signed dihedral angle a-b-c-d in degrees, range (-180, 180]."""
    b0 = np.asarray(a) - np.asarray(b)
    b1 = np.asarray(c) - np.asarray(b)
    b2 = np.asarray(d) - np.asarray(c)
    b1n = b1 / np.linalg.norm(b1)
    v = b0 - np.dot(b0, b1n) * b1n
    w = b2 - np.dot(b2, b1n) * b1n
    x = np.dot(v, w)
    y = np.dot(np.cross(b1n, v), w)
    return float(np.degrees(np.arctan2(y, x)))
