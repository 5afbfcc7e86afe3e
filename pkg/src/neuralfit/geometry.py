"""Rotations, rigid transforms, cameras and similarity alignment.

Everything here is float64 and broadcasts over leading axes unless noted.
Rotations use the continuous 6D encoding: two 3-vectors that become the first
two columns of the rotation matrix after Gram-Schmidt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateInput

EPS_NORM = 1e-12
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[..., :3, :3], M[..., :3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.zeros(self.R.shape[:-2] + (4, 4))
        out[..., :3, :3] = self.R
        out[..., :3, 3] = self.t
        out[..., 3, 3] = 1.0
        return out

    def block(self) -> np.ndarray:
        """The 3x4 block [R | t]."""
        return np.concatenate([self.R, self.t[..., None]], axis=-1)

    def inverse(self) -> "RigidTransform":
        Rt = np.swapaxes(self.R, -1, -2)
        return RigidTransform(Rt, -np.einsum("...ij,...j->...i", Rt, self.t))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ np.swapaxes(self.R, -1, -2) + self.t[..., None, :]

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.R
        eye = np.eye(3)
        return bool(
            np.all(np.abs(np.swapaxes(R, -1, -2) @ R - eye) <= tol)
            and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol)
        )


@dataclass(frozen=True)
class WeakPerspective:
    """Orthographic projection with isotropic scale and a pixel offset."""
    s: float
    t: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.s > 0:
            raise DegenerateInput(f"weak-perspective scale must be > 0, got {self.s}")


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 512.0
    fy: float = 512.0
    cx: float = 256.0
    cy: float = 256.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# --------------------------------------------------------------------------
# 6D rotations


def rot6d_to_matrix(r6) -> np.ndarray:
    """Decode (..., 6) into (..., 3, 3) rotation matrices."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < EPS_NORM):
        raise DegenerateInput("6D rotation has a (near) zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < EPS_NORM * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise DegenerateInput("6D rotation columns are zero or parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_vjp(r6, grad_R) -> np.ndarray:
    """Pull a gradient on the decoded matrix back to the 6D parameters.

    ``grad_R`` may carry extra leading axes relative to ``r6``; they broadcast.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    d12 = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - d12 * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2

    gb1 = grad_R[..., :, 0]
    gb2 = grad_R[..., :, 1]
    gb3 = grad_R[..., :, 2]
    gb1 = gb1 + np.cross(b2, gb3)
    gb2 = gb2 + np.cross(gb3, b1)
    gu2 = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / n2
    b1_gu2 = np.sum(b1 * gu2, axis=-1, keepdims=True)
    ga2 = gu2 - b1 * b1_gu2
    gb1 = gb1 - d12 * gu2 - a2 * b1_gu2
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula, broadcasting over leading axes."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1)[..., None, None]
    safe = np.where(angle > 1e-15, angle, 1.0)
    k = aa / safe[..., 0]
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return np.where(angle > 1e-15, R, eye)


# --------------------------------------------------------------------------
# Transforms


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: (R_a R_b, R_a t_b + t_a)."""
    return RigidTransform(a.R @ b.R, np.einsum("...ij,...j->...i", a.R, b.t) + a.t)


def se3_distance(a: RigidTransform, b: RigidTransform, translation_weight: float = 1.0):
    """Frobenius norm of the difference of the [R | t] blocks."""
    dR = a.R - b.R
    dt = translation_weight * (a.t - b.t)
    return np.sqrt(np.sum(dR**2, axis=(-2, -1)) + np.sum(dt**2, axis=-1))


# --------------------------------------------------------------------------
# Cameras


def weak_perspective_project(P, cam: WeakPerspective) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return cam.s * P[..., :2] + np.asarray(cam.t, dtype=np.float64)


def perspective_project(P, K: Intrinsics) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    z = P[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera(f"{int(np.sum(z <= MIN_DEPTH))} point(s) at or behind the camera")
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


def perspective_jacobian(P, K: Intrinsics) -> np.ndarray:
    """d(projection)/dP with shape (..., 2, 3)."""
    P = np.asarray(P, dtype=np.float64)
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    out = np.zeros(P.shape[:-1] + (2, 3))
    out[..., 0, 0] = K.fx / z
    out[..., 0, 2] = -K.fx * x / z**2
    out[..., 1, 1] = K.fy / z
    out[..., 1, 2] = -K.fy * y / z**2
    return out


# --------------------------------------------------------------------------
# Alignment


def procrustes_align(X, Y, weights=None):
    """Similarity (s, R, t) minimising sum w_i ||s R X_i + t - Y_i||^2 (unit weights by default).

    Returns ``(s, R, t, aligned_X)``. Reflections are removed by flipping the
    smallest singular direction.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3 or X.shape[0] < 3:
        raise DegenerateInput(f"need matching (n>=3, 3) point sets, got {X.shape}, {Y.shape}")
    if weights is None:
        w = np.full(len(X), 1.0 / len(X))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(X),) or np.any(w < 0) or w.sum() <= 0:
            raise DegenerateInput("weights must be non-negative with a positive sum")
        w = w / w.sum()
    mx, my = w @ X, w @ Y
    Xc, Yc = X - mx, Y - my
    var_x = float(w @ np.sum(Xc**2, axis=1))
    if var_x < 1e-24:
        raise DegenerateInput("source points have zero variance")
    cov = (Yc * w[:, None]).T @ Xc
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    s = float(np.sum(S * D) / var_x)
    t = my - s * R @ mx
    return s, R, t, s * X @ R.T + t
