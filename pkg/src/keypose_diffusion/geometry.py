"""Rotations in the 6D (two-column) form, pinhole cameras and rigid transforms.

The 6D layout is column-major: the first three numbers are the first
column of the rotation matrix, the next three the second column.
All functions accept leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegeneracyError, DomainError, ValidationError

DEGENERATE_NORM = 1e-8
ORTHOGONALITY_TOL = 1e-6


def six_d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt the two stored columns into a proper rotation matrix."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ValueError(f"6D rotation must have trailing extent 6, got {r6.shape}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_NORM):
        raise DegeneracyError("first 6D column is (near) zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    # relative test: a2 parallel to a1 leaves only rounding residue
    if np.any(n2 <= DEGENERATE_NORM * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegeneracyError("second 6D column is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def check_rotation(R, tol: float = ORTHOGONALITY_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got {R.shape}")
    resid = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if resid > tol:
        raise ValidationError(f"matrix is not orthogonal (residual {resid:.3g})")
    if np.any(np.linalg.det(R) <= 0):
        raise ValidationError("matrix is a reflection, not a rotation")


def matrix_to_six_d(R, validate: bool = True) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if validate:
        check_rotation(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def orthonormalize_six_d(r6) -> np.ndarray:
    return matrix_to_six_d(six_d_to_matrix(r6), validate=False)


def geodesic_distance(R1, R2) -> np.ndarray:
    """Rotation angle of ``R1^T R2`` in radians."""
    rel = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    """Rodrigues' formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([np.stack([zero, -z, y], -1),
                  np.stack([z, zero, -x], -1),
                  np.stack([-y, x, zero], -1)], -2)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_log(R) -> np.ndarray:
    """Rotation vector (axis times angle) of a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    angle = float(geodesic_distance(np.eye(3), R))
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(M)))
        axis = M[:, col] / np.sqrt(M[col, col])
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(angle)) * angle


def rotation_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3)
    return axis_angle_to_matrix(w / angle, angle)


def geodesic_interpolate(R0, R1, s: float) -> np.ndarray:
    """Point at fraction ``s`` along the shortest rotation path from R0 to R1."""
    R0 = np.asarray(R0, dtype=np.float64)
    rel = R0.T @ np.asarray(R1, dtype=np.float64)
    return R0 @ rotation_exp(s * rotation_log(rel))


# -- rigid transforms --------------------------------------------------------
def make_transform(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def compose(A, B) -> np.ndarray:
    """``A @ B``: apply B first, then A."""
    return np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64)


def invert(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    check_rotation(T[..., :3, :3])
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out = np.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -(Rt @ T[..., :3, 3:4])[..., 0]
    out[..., 3, 3] = 1.0
    return out


def apply_transform(T, points) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


# -- camera ---------------------------------------------------------------------
@dataclass
class CameraModel:
    """Pinhole camera; ``extrinsic`` maps camera coordinates to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.extrinsic.shape != (4, 4):
            raise ValidationError(f"extrinsic must be 4x4, got {self.extrinsic.shape}")
        check_rotation(self.extrinsic[:3, :3])

    def with_extrinsic(self, extrinsic) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, extrinsic)


def unproject(pixel, depth, cam: CameraModel) -> np.ndarray:
    """Pixel ``(x, y)`` (column, row) at optical-axis depth ``d`` -> world point."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DomainError("depth must be positive")
    x, y = pixel[..., 0], pixel[..., 1]
    p_cam = np.stack([(x - cam.cx) * depth / cam.fx, (y - cam.cy) * depth / cam.fy, depth], axis=-1)
    return apply_transform(cam.extrinsic, p_cam)


def project(points, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (pixel ``(x, y)``, depth)."""
    p_cam = apply_transform(invert(cam.extrinsic), points)
    d = p_cam[..., 2]
    if np.any(d <= 0):
        raise DomainError("point lies behind the camera")
    px = np.stack([cam.fx * p_cam[..., 0] / d + cam.cx, cam.fy * p_cam[..., 1] / d + cam.cy], axis=-1)
    return px, d
