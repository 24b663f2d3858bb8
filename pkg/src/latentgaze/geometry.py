"""Gaze geometry: angle/vector conversions, 2D rotation, angular error.

Conventions
-----------
Angles are in radians everywhere inside the package; degrees appear only at
CLI and report boundaries.  Pitch is the vertical angle (positive = up),
yaw the horizontal angle (positive = clockwise seen from above).  The 3D
frame is x = rightward, y = upward, z = forward from the subject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Tolerance below which a 3D vector counts as unit-norm without renormalization.
UNIT_NORM_TOL = 1e-6


class GeometryError(ValueError):
    """Raised when a geometric contract is violated (non-finite or non-unit input)."""


@dataclass(frozen=True)
class GazeAngles:
    """A (pitch, yaw) gaze label in radians.

    pitch must lie in (-pi/2, pi/2), yaw in (-pi, pi].
    """

    pitch: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise GeometryError(f"non-finite gaze angles ({self.pitch}, {self.yaw})")
        if not -math.pi / 2 < self.pitch < math.pi / 2:
            raise GeometryError(f"pitch {self.pitch} outside (-pi/2, pi/2)")
        if not -math.pi < self.yaw <= math.pi:
            raise GeometryError(f"yaw {self.yaw} outside (-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class GazeVector3:
    """A unit 3D gaze direction."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or abs(n - 1.0) > UNIT_NORM_TOL:
            raise GeometryError(f"gaze vector norm {n} deviates from 1 by more than {UNIT_NORM_TOL}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def angles_to_vector(angles) -> np.ndarray:
    """Convert (pitch, yaw) angles to unit 3D gaze vectors.

    Args:
        angles: GazeAngles, or array-like of shape (..., 2) in radians.

    Returns:
        Array of shape (..., 3) with rows (cos p * sin y, sin p, cos p * cos y).
    """
    if isinstance(angles, GazeAngles):
        angles = angles.as_array()
    a = np.asarray(angles, dtype=np.float64)
    if a.shape[-1] != 2:
        raise GeometryError(f"expected (..., 2) angles, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("non-finite gaze angles")
    pitch, yaw = a[..., 0], a[..., 1]
    out = np.empty(a.shape[:-1] + (3,), dtype=np.float64)
    out[..., 0] = np.cos(pitch) * np.sin(yaw)
    out[..., 1] = np.sin(pitch)
    out[..., 2] = np.cos(pitch) * np.cos(yaw)
    return out


def vector_to_angles(vectors) -> np.ndarray:
    """Convert unit 3D gaze vectors back to (pitch, yaw) angles.

    Inverse of :func:`angles_to_vector`: pitch = asin(y), yaw = atan2(x, z).

    Args:
        vectors: GazeVector3, or array-like of shape (..., 3), unit norm
            within ``UNIT_NORM_TOL``.

    Returns:
        Array of shape (..., 2) in radians.
    """
    if isinstance(vectors, GazeVector3):
        vectors = vectors.as_array()
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[-1] != 3:
        raise GeometryError(f"expected (..., 3) vectors, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=-1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise GeometryError("gaze vectors must be unit norm within 1e-6")
    out = np.empty(v.shape[:-1] + (2,), dtype=np.float64)
    out[..., 0] = np.arcsin(np.clip(v[..., 1], -1.0, 1.0))
    out[..., 1] = np.arctan2(v[..., 0], v[..., 2])
    return out


def _renormalize(v: np.ndarray) -> np.ndarray:
    # Stored vectors may carry norm drift; renormalize only when it exceeds
    # the contract tolerance so exact inputs pass through untouched.
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= 0) or not np.all(np.isfinite(norms)):
        raise GeometryError("cannot renormalize zero or non-finite vector")
    drift = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(drift):
        v = np.where(drift, v / norms, v)
    return v


def angular_error(v, v_hat) -> np.ndarray:
    """Arc angle in degrees between ground-truth and predicted gaze directions.

    Both inputs are renormalized if their norm deviates from 1 by more than
    ``UNIT_NORM_TOL``; the dot product is clamped to [-1, 1] before acos so
    near-identical vectors cannot produce NaN.

    Args:
        v: array-like of shape (..., 3), ground-truth directions.
        v_hat: array-like of shape (..., 3), predicted directions.

    Returns:
        Array of shape (...) with errors in [0, 180] degrees.
    """
    if isinstance(v, GazeVector3):
        v = v.as_array()
    if isinstance(v_hat, GazeVector3):
        v_hat = v_hat.as_array()
    a = _renormalize(np.asarray(v, dtype=np.float64))
    b = _renormalize(np.asarray(v_hat, dtype=np.float64))
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise GeometryError("angular_error expects (..., 3) vectors")
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def rotation_matrix(theta: float) -> np.ndarray:
    """The 2D rotation matrix [[cos, -sin], [sin, cos]] for angle theta (radians)."""
    if not math.isfinite(theta):
        raise GeometryError(f"non-finite rotation angle {theta}")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rotate2d(g, theta: float) -> np.ndarray:
    """Rotate 2-vectors (treated as Euclidean points) by theta radians.

    Args:
        g: array-like of shape (..., 2).
        theta: rotation angle in radians.

    Returns:
        Array of shape (..., 2) equal to R(theta) @ g.
    """
    arr = np.asarray(g, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise GeometryError(f"expected (..., 2) vectors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite input to rotate2d")
    return arr @ rotation_matrix(theta).T
