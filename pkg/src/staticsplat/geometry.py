"""Rigid poses, pinhole projection, pointmaps and induced flow.

Conventions used throughout the package:

* Quaternions are stored as ``(w, x, y, z)``.
* A :class:`Pose` maps camera coordinates to world coordinates
  (``x_world = R @ x_cam + t``).
* Pixel ``(u, v)`` has its center at integer coordinates ``(u, v)``; ``u`` indexes
  columns and ``v`` rows, so grids are shaped ``(H, W, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (batch of) quaternion(s); the input is normalized first."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion ``(w, x, y, z)`` with ``w >= 0`` for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain ``dL/dR`` back to the raw (unnormalized) quaternion ``q``.

    Works on batches: ``q`` is ``(..., 4)`` and ``dR`` is ``(..., 3, 3)``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = dR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    # project out the radial component of the normalization
    return (gu - u * np.sum(gu * u, axis=-1, keepdims=True)) / norm


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians (atan2 form, accurate near zero)."""
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(v), np.trace(R) - 1.0))


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares similarity ``dst ≈ s R src + t`` for ``(K, 3)`` point sets."""
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform stored as a unit quaternion and a translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(np.block([[R.T, (-R.T @ self.t)[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        return Pose(q, self.R @ other.t + self.t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t


def relative_pose(pose_a: Pose, pose_b: Pose) -> Pose:
    """Transform taking frame-``b`` camera coordinates into frame-``a`` camera coordinates."""
    return pose_a.inverse().compose(pose_b)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        """Square pixels with the principal point at the image center."""
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def with_focal(self, focal: float) -> "Intrinsics":
        return Intrinsics(focal, focal, self.cx, self.cy, self.width, self.height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-center coordinates ``(u, v)``, each shaped ``(H, W)``."""
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(np.float64), v.astype(np.float64)


def depth_to_pointmap(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Back-project a depth map into an ``(H, W, 3)`` camera-frame pointmap."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {intr.height}x{intr.width}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("depth must be finite and strictly positive")
    u, v = pixel_grid(*depth.shape)
    return np.stack([depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth], axis=-1)


def project_points(pts: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points; returns ``(uv, z)``.

    ``uv`` is undefined (inf/nan) where ``z`` is not positive; callers mask on ``z``.
    """
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pts[..., 0] / z + intr.cx
        v = intr.fy * pts[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def transform_pointmap(pose: Pose, pm: np.ndarray) -> np.ndarray:
    """Map camera-frame points into the world frame: ``R @ x + t`` per pixel."""
    pm = np.asarray(pm, dtype=np.float64)
    if not np.all(np.isfinite(pm)):
        raise ValueError("pointmap contains non-finite values")
    return pose.apply(pm)


@dataclass
class FlowField:
    flow: np.ndarray  # (H, W, 2) displacement in pixels
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.where(self.valid[..., None], self.flow, 0.0)


def flow_validity(uv: np.ndarray, z: np.ndarray, width: int, height: int) -> np.ndarray:
    """Target lands inside the image and in front of the camera."""
    with np.errstate(invalid="ignore"):
        return (
            (z > NEAR_PLANE)
            & (uv[..., 0] >= -0.5) & (uv[..., 0] <= width - 0.5)
            & (uv[..., 1] >= -0.5) & (uv[..., 1] <= height - 0.5)
        )


def induced_flow(depth_t: np.ndarray, pose_t: Pose, pose_t2: Pose, intr: Intrinsics) -> FlowField:
    """Pixel flow from frame ``t`` to ``t2`` explained purely by camera motion."""
    pts = depth_to_pointmap(depth_t, intr)
    rel = relative_pose(pose_t2, pose_t)
    uv, z = project_points(rel.apply(pts), intr)
    u, v = pixel_grid(intr.height, intr.width)
    valid = flow_validity(uv, z, intr.width, intr.height)
    flow = np.stack([uv[..., 0] - u, uv[..., 1] - v], axis=-1)
    return FlowField(np.where(valid[..., None], flow, 0.0), valid)
