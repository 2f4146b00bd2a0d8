"""Synthetic dynamic videos with exact ground truth.

Frames are ray-cast against analytic primitives (a room, static boxes, moving
quads/ellipsoids) with flat procedural shading, independently of the splat
renderer. Every quantity the pipeline consumes (pair pointmaps, masks, flow) is
derived from the same ray-cast geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .align import FrameGraph, PairPrediction, WindowSet, build_graph, build_windows
from .geometry import FlowField, Intrinsics, Pose, depth_to_pointmap, flow_validity, pixel_grid, relative_pose, rotmat_to_quat

MAX_COVERAGE = 0.9


@dataclass
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    corner_colors: np.ndarray | None = None  # (8, 3)
    freq: tuple[float, float, float] = (3.0, 3.0, 3.0)
    phase: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class DynamicObject:
    kind: Literal["quad", "ellipsoid"]
    center: tuple[float, float, float]
    half: tuple[float, float, float]  # quads ignore the z extent
    motion: Literal["linear", "circular"] = "linear"
    velocity: tuple[float, float, float] = (0.05, 0.0, 0.0)  # per frame, linear motion
    radius: float = 0.5  # circular motion in the x-z plane
    angular_speed: float = 0.1  # radians per frame
    corner_colors: np.ndarray | None = None
    freq: tuple[float, float, float] = (5.0, 5.0, 5.0)
    phase: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def offset(self, t: float) -> np.ndarray:
        if self.motion == "linear":
            return np.asarray(self.velocity, dtype=np.float64) * t
        a = self.angular_speed * t
        return self.radius * np.array([np.cos(a) - 1.0, 0.0, np.sin(a)])


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    num_frames: int = 20
    focal: float | None = None  # defaults to 0.9 * width
    room_half: tuple[float, float, float] = (4.0, 2.5, 6.0)
    room_center: tuple[float, float, float] = (0.0, 0.0, 3.0)
    num_boxes: int = 3
    boxes: list[Box] | None = None
    num_dynamic: int = 1
    dynamic: list[DynamicObject] | None = None
    dynamic_coverage: float | None = None  # target mean fraction of dynamic pixels
    camera_travel: float = 0.6  # keyframe translation spread, scene units
    camera_rotation_deg: float = 4.0  # keyframe rotation spread
    camera_keyframes: int = 4
    texture_freq: tuple[float, float] = (1.5, 3.0)  # radians per scene unit
    pointmap_noise: float = 0.0
    mask_fp_rate: float = 0.0
    mask_fn_rate: float = 0.0
    strides: tuple[int, ...] = (1, 2)
    seed: int = 0

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ValueError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.width < 4 or self.height < 4:
            raise ValueError(f"resolution {self.width}x{self.height} too small")
        if self.dynamic_coverage is not None and not 0.0 <= self.dynamic_coverage <= MAX_COVERAGE:
            raise ValueError(f"dynamic_coverage must be in [0, {MAX_COVERAGE}], got {self.dynamic_coverage}")
        for name in ("mask_fp_rate", "mask_fn_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.pointmap_noise < 0:
            raise ValueError("pointmap_noise must be non-negative")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.centered(self.focal or 0.9 * self.width, self.width, self.height)


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    intr: Intrinsics
    poses: list[Pose]
    images: np.ndarray  # (N, H, W, 3)
    depths: np.ndarray  # (N, H, W)
    masks: np.ndarray  # (N, H, W) ground-truth dynamic masks in {0, 1}
    static_images: np.ndarray  # (N, H, W, 3) renders with dynamic objects removed
    graph: FrameGraph
    windows: WindowSet
    dynamic: list[DynamicObject] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def pointmaps(self) -> np.ndarray:
        return np.stack([depth_to_pointmap(d, self.intr) for d in self.depths])


# ---------------------------------------------------------------------------
# texture and ray casting


def _texture(local: np.ndarray, lo: np.ndarray, hi: np.ndarray, corner_colors: np.ndarray, freq, phase) -> np.ndarray:
    """Corner colors blended trilinearly across the primitive, modulated by a smooth wave."""
    w = np.clip((local - lo) / np.maximum(hi - lo, 1e-9), 0.0, 1.0)
    c = np.zeros(local.shape[:-1] + (3,))
    for k in range(8):
        bits = [(k >> i) & 1 for i in range(3)]
        wk = np.ones(local.shape[:-1])
        for i, b in enumerate(bits):
            wk = wk * (w[..., i] if b else 1.0 - w[..., i])
        c += wk[..., None] * corner_colors[k]
    freq = np.asarray(freq)
    phase = np.asarray(phase)
    wave = np.sin(local @ freq + phase[0]) * np.cos(local[..., 0] * freq[1] - local[..., 2] * freq[2] + phase[1])
    return np.clip(c * (0.8 + 0.2 * wave[..., None]), 0.0, 1.0)


def _slab(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return tmin, tmax


def _hit_box(origin, dirs, box: Box):
    c = np.asarray(box.center)
    h = np.asarray(box.half)
    tmin, tmax = _slab(origin, dirs, c - h, c + h)
    t = np.where((tmin <= tmax) & (tmin > 1e-6), tmin, np.inf)
    return t


def _hit_room(origin, dirs, center, half):
    c = np.asarray(center)
    h = np.asarray(half)
    _, tmax = _slab(origin, dirs, c - h, c + h)
    return np.where(tmax > 1e-6, tmax, np.inf)


def _hit_dynamic(origin, dirs, obj: DynamicObject, offset: np.ndarray, scale: float):
    c = np.asarray(obj.center) + offset
    h = np.asarray(obj.half) * scale
    if obj.kind == "quad":
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (c[2] - origin[2]) / dirs[..., 2]
        p = origin + t[..., None] * dirs
        inside = (np.abs(p[..., 0] - c[0]) <= h[0]) & (np.abs(p[..., 1] - c[1]) <= h[1]) & (t > 1e-6)
        return np.where(inside, t, np.inf)
    o = (origin - c) / h
    d = dirs / h
    a = np.sum(d * d, axis=-1)
    b = 2 * np.sum(o * d, axis=-1)
    cc = np.sum(o * o) - 1.0
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    return np.where((disc >= 0) & (t > 1e-6), t, np.inf)


class _Scene:
    """Resolved primitives of a :class:`SceneSpec` (defaults filled in from the seed)."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        lo_f, hi_f = spec.texture_freq

        def colors():
            return rng.uniform(0.15, 0.95, size=(8, 3))

        def freq():
            return tuple(rng.uniform(lo_f, hi_f, size=3) * rng.choice([-1, 1], size=3))

        def phase():
            return tuple(rng.uniform(0, 2 * np.pi, size=3))

        self.room = Box(spec.room_center, spec.room_half, colors(), freq(), phase())
        if spec.boxes is not None:
            self.boxes = [Box(b.center, b.half, b.corner_colors if b.corner_colors is not None else colors(),
                              b.freq, b.phase) for b in spec.boxes]
        else:
            self.boxes = []
            floor = spec.room_center[1] + spec.room_half[1]
            for _ in range(spec.num_boxes):
                half = rng.uniform(0.3, 0.7, size=3)
                cx = rng.uniform(-2.0, 2.0)
                cz = rng.uniform(4.0, 7.0)
                self.boxes.append(Box((cx, floor - half[1], cz), tuple(half), colors(), freq(), phase()))
        if spec.dynamic is not None:
            self.dynamic = [DynamicObject(**{**d.__dict__, "corner_colors": d.corner_colors if d.corner_colors is not None else colors()})
                            for d in spec.dynamic]
        else:
            self.dynamic = []
            for i in range(spec.num_dynamic):
                kind = "quad" if i % 2 == 0 else "ellipsoid"
                z = rng.uniform(2.5, 3.5)
                speed = rng.uniform(0.6, 1.2) / max(spec.num_frames - 1, 1) * rng.choice([-1, 1])
                x0 = -speed * (spec.num_frames - 1) / 2
                self.dynamic.append(DynamicObject(
                    kind, (x0 + rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), z), (0.5, 0.5, 0.4),
                    "linear", (speed, rng.uniform(-0.2, 0.2) / spec.num_frames, 0.0),
                    corner_colors=colors(), freq=tuple(np.array(freq()) * 1.5), phase=phase()))
        self.dyn_scale = 1.0

    def cast(self, pose: Pose, intr: Intrinsics, t: float, with_dynamic: bool = True):
        """Depth, color and dynamic-object id (``-1`` for static) per pixel."""
        u, v = pixel_grid(intr.height, intr.width)
        d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
        dirs = d_cam @ pose.R.T
        origin = pose.t
        best = _hit_room(origin, dirs, self.room.center, self.room.half)
        which = np.full(best.shape, -1)  # -1 room, 0.. boxes
        for i, b in enumerate(self.boxes):
            tb = _hit_box(origin, dirs, b)
            closer = tb < best
            best = np.where(closer, tb, best)
            which = np.where(closer, i, which)
        dyn = np.full(best.shape, -1)
        if with_dynamic:
            for k, obj in enumerate(self.dynamic):
                td = _hit_dynamic(origin, dirs, obj, obj.offset(t), self.dyn_scale)
                closer = td < best
                best = np.where(closer, td, best)
                dyn = np.where(closer, k, dyn)
        if not np.all(np.isfinite(best)):
            raise ValueError("camera rays escaped the room; camera must stay inside it")
        pts = origin + best[..., None] * dirs
        color = np.zeros(best.shape + (3,))
        prims = [(-1, self.room)] + list(enumerate(self.boxes))
        for i, b in prims:
            sel = (which == i) & (dyn < 0)
            if np.any(sel):
                c = np.asarray(b.center)
                h = np.asarray(b.half)
                color[sel] = _texture(pts[sel], c - h, c + h, b.corner_colors, b.freq, b.phase)
        for k, obj in enumerate(self.dynamic):
            sel = dyn == k
            if np.any(sel):
                h = np.asarray(obj.half) * self.dyn_scale
                local = pts[sel] - (np.asarray(obj.center) + obj.offset(t))
                color[sel] = _texture(local, -h, h, obj.corner_colors, obj.freq, obj.phase)
        return best, color, dyn, pts

    def coverage(self, poses, intr, times, stride: int = 1) -> float:
        fr = [np.mean(self.cast(poses[i], intr, times[i])[2] >= 0) for i in range(0, len(poses), stride)]
        return float(np.mean(fr))


def _camera_path(spec: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    N = spec.num_frames
    K = max(2, spec.camera_keyframes)
    knots = np.linspace(0, N - 1, K)
    trans = rng.uniform(-0.5, 0.5, size=(K, 3)) * spec.camera_travel
    trans[0] = 0.0
    trans[:, 2] *= 0.5
    angles = rng.uniform(-1.0, 1.0, size=(K, 3)) * np.deg2rad(spec.camera_rotation_deg)
    angles[0] = 0.0
    angles[:, 2] *= 0.3  # little roll
    ts = np.arange(N, dtype=np.float64)
    pos = CubicSpline(knots, trans, bc_type="natural")(ts)
    ang = CubicSpline(knots, angles, bc_type="natural")(ts)
    poses = []
    for i in range(N):
        R = Rotation.from_euler("yxz", [ang[i, 1], ang[i, 0], ang[i, 2]]).as_matrix()
        poses.append(Pose(rotmat_to_quat(R), pos[i]))
    return poses


def _fit_coverage(scene: _Scene, poses, intr, times, target: float) -> None:
    if not scene.dynamic:
        if target > 0:
            raise ValueError("dynamic_coverage > 0 requested but the scene has no dynamic objects")
        return
    stride = max(1, len(poses) // 10)
    lo, hi = 0.0, 1.0
    scene.dyn_scale = hi
    while scene.coverage(poses, intr, times, stride) < target:
        hi *= 2.0
        if hi > 64:
            raise ValueError(f"dynamic_coverage {target} is infeasible for this scene")
        scene.dyn_scale = hi
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        scene.dyn_scale = mid
        if scene.coverage(poses, intr, times, stride) < target:
            lo = mid
        else:
            hi = mid
    scene.dyn_scale = hi


# ---------------------------------------------------------------------------
# generation


def corrupt_masks(masks: np.ndarray, fp_rate: float, fn_rate: float, seed: int, block: int = 8) -> np.ndarray:
    """Flip 8x8 blocks static->dynamic with ``fp_rate`` and dynamic->static with ``fn_rate``.

    The block draw depends only on ``seed`` and the mask shape, so corrupting
    several frames with one seed flips the same image regions in each.
    """
    if not (0.0 <= fp_rate <= 1.0 and 0.0 <= fn_rate <= 1.0):
        raise ValueError("corruption rates must lie in [0, 1]")
    masks = np.asarray(masks, dtype=np.float64)
    single = masks.ndim == 2
    stack = masks[None] if single else masks
    H, W = stack.shape[1:]
    bh, bw = -(-H // block), -(-W // block)
    rng = np.random.default_rng(seed)
    fp = np.kron(rng.random((bh, bw)) < fp_rate, np.ones((block, block), dtype=bool))[:H, :W]
    fn = np.kron(rng.random((bh, bw)) < fn_rate, np.ones((block, block), dtype=bool))[:H, :W]
    dynamic = stack >= 0.5
    out = stack.copy()
    out[~dynamic & fp] = 1.0
    out[dynamic & fn] = 0.0
    return out[0] if single else out


def _scene_flow(scene: _Scene, pts_t, dyn_t, t: float, t2: float, pose2: Pose, intr: Intrinsics) -> FlowField:
    moved = pts_t.copy()
    for k, obj in enumerate(scene.dynamic):
        sel = dyn_t == k
        moved[sel] += obj.offset(t2) - obj.offset(t)
    cam = pose2.inverse().apply(moved)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * cam[..., 0] / z + intr.cx, intr.fy * cam[..., 1] / z + intr.cy], axis=-1)
    valid = flow_validity(uv, z, intr.width, intr.height)
    u, v = pixel_grid(intr.height, intr.width)
    flow = np.stack([uv[..., 0] - u, uv[..., 1] - v], axis=-1)
    return FlowField(np.where(valid[..., None], flow, 0.0), valid)


def generate(spec: SceneSpec, poses: list[Pose] | None = None) -> SyntheticDataset:
    """Render a synthetic dataset; deterministic given ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    intr = spec.intrinsics()
    scene = _Scene(spec, rng)
    path = _camera_path(spec, rng)
    poses = path if poses is None else list(poses)
    N = spec.num_frames
    if len(poses) != N:
        raise ValueError(f"got {len(poses)} poses for {N} frames")
    times = np.arange(N, dtype=np.float64)
    if spec.dynamic_coverage is not None:
        _fit_coverage(scene, poses, intr, times, spec.dynamic_coverage)

    images, depths, masks, statics, pts, dyns = [], [], [], [], [], []
    for i in range(N):
        depth, color, dyn, p = scene.cast(poses[i], intr, times[i])
        _, scolor, _, _ = scene.cast(poses[i], intr, times[i], with_dynamic=False)
        moving = np.zeros(depth.shape, dtype=bool)
        for k, obj in enumerate(scene.dynamic):
            if np.any(obj.offset(0.0) != obj.offset(1.0)) or N < 2:
                moving |= dyn == k
        images.append(color)
        depths.append(depth)
        masks.append(moving.astype(np.float64))
        statics.append(scolor)
        pts.append(p)
        dyns.append(dyn)

    graph = build_graph(N, spec.strides)
    cam_pts = [depth_to_pointmap(d, intr) for d in depths]
    mask_seed = int(rng.integers(2**31))
    for n, m in graph.edges:
        # pair mask marks frame-n pixels whose surface moves between the two timestamps
        moved = np.zeros(depths[n].shape, dtype=bool)
        for k, obj in enumerate(scene.dynamic):
            if np.any(obj.offset(times[n]) != obj.offset(times[m])):
                moved |= dyns[n] == k
        M = moved.astype(np.float64)
        if spec.mask_fp_rate or spec.mask_fn_rate:
            M = corrupt_masks(M, spec.mask_fp_rate, spec.mask_fn_rate, mask_seed + n)
        X_nn = cam_pts[n].copy()
        X_mn = relative_pose(poses[n], poses[m]).apply(cam_pts[m])
        if spec.pointmap_noise > 0:
            X_nn = X_nn + rng.normal(0, spec.pointmap_noise, X_nn.shape)
            X_mn = X_mn + rng.normal(0, spec.pointmap_noise, X_mn.shape)
        ones = np.ones(depths[n].shape)
        graph.predictions[(n, m)] = PairPrediction(X_nn, X_mn, ones, ones.copy(), M)

    windows = build_windows(N, spec.strides)
    for t, t2 in windows.pairs():
        windows.flows[(t, t2)] = _scene_flow(scene, pts[t], dyns[t], times[t], times[t2], poses[t2], intr)

    return SyntheticDataset(spec, intr, list(poses), np.stack(images), np.stack(depths), np.stack(masks),
                            np.stack(statics), graph, windows, scene.dynamic)


def perturb_poses(poses: list[Pose], rot_deg: float, trans: float, seed: int) -> list[Pose]:
    """Each pose rotated by exactly ``rot_deg`` about a random axis and shifted by ``trans`` in a random direction."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        dR = Rotation.from_rotvec(axis * np.deg2rad(rot_deg)).as_matrix()
        out.append(Pose(rotmat_to_quat(p.R @ dR), p.t + trans * d))
    return out
