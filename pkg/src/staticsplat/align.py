"""Global alignment of pairwise pointmaps into camera poses and per-frame depth.

The objective is the sum of

* a confidence-weighted L1 between each frame's global pointmap and the
  scaled, pose-transformed pair pointmaps of every edge,
* a smoothness penalty on consecutive camera motion,
* an L1 between induced and estimated optical flow, weighted per pixel by the
  frame's aggregated staticness ``1 - M^t``.

Global pointmaps are derived from per-frame log-depth, pose and a shared focal.
Losses and gradients are evaluated with torch autograd in double precision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from .geometry import NEAR_PLANE, FlowField, Intrinsics, Pose, pixel_grid, quat_normalize, umeyama

log = logging.getLogger(__name__)

DTYPE = torch.float64


class AlignmentDiverged(RuntimeError):
    def __init__(self, iteration: int, message: str = "alignment loss became non-finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PairPrediction:
    """Pair network output for edge ``(n, m)``; both pointmaps live in frame ``n``'s camera."""

    X_nn: np.ndarray
    X_mn: np.ndarray
    C_nn: np.ndarray
    C_mn: np.ndarray
    M_nn: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.X_nn)[:2]
        for name in ("X_mn", "C_nn", "C_mn", "M_nn"):
            if np.shape(getattr(self, name))[:2] != shape:
                raise ValueError(f"{name} shape {np.shape(getattr(self, name))} does not match X_nn {np.shape(self.X_nn)}")
        for name in ("C_nn", "C_mn"):
            c = np.asarray(getattr(self, name))
            if not np.all(np.isfinite(c)) or np.any(c < 0):
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass
class FrameGraph:
    num_frames: int
    edges: list[tuple[int, int]]
    predictions: dict[tuple[int, int], PairPrediction] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.edges)

    def __len__(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edges)}

    def pair_masks(self) -> dict[tuple[int, int], np.ndarray]:
        return {e: self.predictions[e].M_nn for e in self.edges}

    def is_connected(self) -> bool:
        return not self.unreachable()

    def unreachable(self) -> list[int]:
        """Frames with no path to frame 0."""
        adj: dict[int, set[int]] = {v: set() for v in range(self.num_frames)}
        for n, m in self.edges:
            adj[n].add(m)
            adj[m].add(n)
        seen = {0}
        stack = [0]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return [v for v in range(self.num_frames) if v not in seen]

    def validate(self) -> None:
        firsts = {n for n, _ in self.edges}
        missing = [t for t in range(self.num_frames) if t not in firsts]
        if missing:
            raise ValueError(f"frames {missing} are not the first frame of any edge")
        cut = self.unreachable()
        if cut:
            raise ValueError(f"frame graph is not connected: frames {cut[:5]} cannot reach frame 0")
        absent = [e for e in self.edges if e not in self.predictions]
        if absent:
            raise ValueError(f"no pair prediction for edges {absent[:5]}")


def build_graph(num_frames: int, strides: Iterable[int] = (1, 2)) -> FrameGraph:
    """Sliding-window pairs ``(n, n+k)`` and ``(n+k, n)`` for every stride ``k``."""
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames to build a graph, got {num_frames}")
    strides = sorted(set(int(k) for k in strides))
    if not strides or strides[0] < 1:
        raise ValueError(f"strides must be positive integers, got {strides}")
    edges = []
    for n in range(num_frames):
        for k in strides:
            if n + k < num_frames:
                edges.append((n, n + k))
                edges.append((n + k, n))
    graph = FrameGraph(num_frames, edges)
    if not graph.is_connected():
        raise ValueError(f"strides {strides} leave the {num_frames}-frame graph disconnected")
    return graph


@dataclass
class WindowSet:
    """Sliding windows of frame pairs; window ``i`` holds the pairs whose lower index is ``i``."""

    windows: list[list[tuple[int, int]]]
    flows: dict[tuple[int, int], FlowField] = field(default_factory=dict)

    def pairs(self) -> list[tuple[int, int]]:
        return [p for w in self.windows for p in w]


def build_windows(num_frames: int, strides: Iterable[int] = (1, 2)) -> WindowSet:
    strides = sorted(set(int(k) for k in strides))
    windows = []
    for i in range(num_frames):
        w = []
        for k in strides:
            if i + k < num_frames:
                w += [(i, i + k), (i + k, i)]
        if w:
            windows.append(w)
    return WindowSet(windows)


@dataclass
class AlignState:
    """Optimizable alignment variables.

    ``scales`` follows the order of the graph's edge list. Poses are camera-to-world.
    """

    quats: np.ndarray  # (N, 4)
    trans: np.ndarray  # (N, 3)
    depths: np.ndarray  # (N, H, W)
    scales: np.ndarray  # (E,)
    focal: float
    cx: float
    cy: float

    @property
    def num_frames(self) -> int:
        return len(self.quats)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape[1:]

    def intrinsics(self) -> Intrinsics:
        H, W = self.shape
        return Intrinsics(self.focal, self.focal, self.cx, self.cy, W, H)

    def poses(self) -> list[Pose]:
        return [Pose(q, t) for q, t in zip(self.quats, self.trans)]

    def copy(self) -> "AlignState":
        return AlignState(self.quats.copy(), self.trans.copy(), self.depths.copy(), self.scales.copy(),
                          self.focal, self.cx, self.cy)

    def global_pointmaps(self) -> np.ndarray:
        """World-frame pointmaps ``X^(t,w)``, shaped ``(N, H, W, 3)``."""
        with torch.no_grad():
            return _global_points(_to_params(self), _rays(self)).numpy()

    @classmethod
    def from_poses(cls, poses: list[Pose], depths: np.ndarray, intr: Intrinsics, num_edges: int) -> "AlignState":
        return cls(np.stack([p.q for p in poses]), np.stack([p.t for p in poses]),
                   np.asarray(depths, dtype=np.float64).copy(), np.ones(num_edges), float(intr.fx), intr.cx, intr.cy)


# ---------------------------------------------------------------------------
# torch internals


def _to_params(state: AlignState, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    p = {
        "quats": torch.tensor(state.quats, dtype=DTYPE),
        "trans": torch.tensor(state.trans, dtype=DTYPE),
        "log_depth": torch.tensor(np.log(state.depths), dtype=DTYPE),
        "log_scale": torch.tensor(np.log(state.scales), dtype=DTYPE),
        "log_focal": torch.tensor(math.log(state.focal), dtype=DTYPE),
    }
    for v in p.values():
        v.requires_grad_(requires_grad)
    return p


def _from_params(p: dict[str, torch.Tensor], cx: float, cy: float) -> AlignState:
    with torch.no_grad():
        return AlignState(p["quats"].numpy().copy(), p["trans"].numpy().copy(), torch.exp(p["log_depth"]).numpy(),
                          torch.exp(p["log_scale"]).numpy(), float(torch.exp(p["log_focal"])), cx, cy)


@dataclass
class _Rays:
    du: torch.Tensor  # u - cx
    dv: torch.Tensor
    u: torch.Tensor
    v: torch.Tensor
    cx: float
    cy: float
    width: int
    height: int


def _rays(state: AlignState) -> _Rays:
    H, W = state.shape
    u, v = pixel_grid(H, W)
    u = torch.tensor(u, dtype=DTYPE)
    v = torch.tensor(v, dtype=DTYPE)
    return _Rays(u - state.cx, v - state.cy, u, v, state.cx, state.cy, W, H)


def _rotmats(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def _camera_points(p, rays: _Rays) -> torch.Tensor:
    depth = torch.exp(p["log_depth"])
    f = torch.exp(p["log_focal"])
    return torch.stack([depth * rays.du / f, depth * rays.dv / f, depth], dim=-1)


def _global_points(p, rays: _Rays) -> torch.Tensor:
    R = _rotmats(p["quats"])
    return torch.einsum("nij,nhwj->nhwi", R, _camera_points(p, rays)) + p["trans"][:, None, None, :]


@dataclass
class _GraphData:
    n_idx: torch.Tensor
    m_idx: torch.Tensor
    X_nn: torch.Tensor
    X_mn: torch.Tensor
    C_nn: torch.Tensor
    C_mn: torch.Tensor


def _graph_data(graph: FrameGraph) -> _GraphData:
    preds = [graph.predictions[e] for e in graph.edges]
    return _GraphData(
        torch.tensor([e[0] for e in graph.edges]),
        torch.tensor([e[1] for e in graph.edges]),
        torch.tensor(np.stack([p.X_nn for p in preds]), dtype=DTYPE),
        torch.tensor(np.stack([p.X_mn for p in preds]), dtype=DTYPE),
        torch.tensor(np.stack([p.C_nn for p in preds]), dtype=DTYPE),
        torch.tensor(np.stack([p.C_mn for p in preds]), dtype=DTYPE),
    )


def _align_residual(Xw: torch.Tensor, p, g: _GraphData) -> torch.Tensor:
    R = _rotmats(p["quats"])
    Rn = R[g.n_idx]
    Tn = p["trans"][g.n_idx][:, None, None, :]
    sigma = torch.exp(p["log_scale"])[:, None, None, None]
    pred_n = torch.einsum("eij,ehwj->ehwi", Rn, sigma * g.X_nn) + Tn
    pred_m = torch.einsum("eij,ehwj->ehwi", Rn, sigma * g.X_mn) + Tn
    # per-pixel Euclidean distance keeps the loss invariant to a rotation of the world frame
    term_n = (g.C_nn * torch.linalg.vector_norm(Xw[g.n_idx] - pred_n, dim=-1)).sum()
    term_m = (g.C_mn * torch.linalg.vector_norm(Xw[g.m_idx] - pred_m, dim=-1)).sum()
    return term_n + term_m


def _smooth(p) -> torch.Tensor:
    R = _rotmats(p["quats"])
    T = p["trans"]
    if len(T) < 2:
        return torch.zeros((), dtype=DTYPE)
    rel = torch.einsum("nji,njk->nik", R[:-1], R[1:]) - torch.eye(3, dtype=DTYPE)
    step = torch.einsum("nji,nj->ni", R[:-1], T[1:] - T[:-1])
    return torch.linalg.norm(rel.reshape(-1, 9), dim=-1).sum() + torch.linalg.norm(step, dim=-1).sum()


@dataclass
class _FlowData:
    src: torch.Tensor
    dst: torch.Tensor
    flow: torch.Tensor  # (P, H, W, 2)
    weight: torch.Tensor  # (P, H, W): (1 - M^t) * estimated-flow validity


def _flow_data(windows: WindowSet, frame_masks: np.ndarray) -> _FlowData | None:
    pairs = windows.pairs()
    if not pairs:
        return None
    missing = [pr for pr in pairs if pr not in windows.flows]
    if missing:
        raise KeyError(f"no estimated flow for pairs {missing[:5]}")
    frame_masks = np.asarray(frame_masks, dtype=np.float64)
    flows = np.stack([windows.flows[pr].flow for pr in pairs])
    valid = np.stack([windows.flows[pr].valid for pr in pairs])
    weight = (1.0 - frame_masks[[t for t, _ in pairs]]) * valid
    return _FlowData(torch.tensor([t for t, _ in pairs]), torch.tensor([s for _, s in pairs]),
                     torch.tensor(flows, dtype=DTYPE), torch.tensor(weight, dtype=DTYPE))


def _induced_flow(p, rays: _Rays, src: torch.Tensor, dst: torch.Tensor):
    R = _rotmats(p["quats"])
    T = p["trans"]
    pts = _camera_points(p, rays)[src]
    world = torch.einsum("pij,phwj->phwi", R[src], pts) + T[src][:, None, None, :]
    cam = torch.einsum("pji,phwj->phwi", R[dst], world - T[dst][:, None, None, :])
    z = cam[..., 2]
    front = z > NEAR_PLANE
    zs = torch.where(front, z, torch.ones_like(z))
    f = torch.exp(p["log_focal"])
    u2 = f * cam[..., 0] / zs + rays.cx
    v2 = f * cam[..., 1] / zs + rays.cy
    with torch.no_grad():
        valid = front & (u2 >= -0.5) & (u2 <= rays.width - 0.5) & (v2 >= -0.5) & (v2 <= rays.height - 0.5)
    return torch.stack([u2 - rays.u, v2 - rays.v], dim=-1), valid


def _flow_loss(p, rays: _Rays, fd: _FlowData | None) -> torch.Tensor:
    if fd is None:
        return torch.zeros((), dtype=DTYPE)
    flow, valid = _induced_flow(p, rays, fd.src, fd.dst)
    w = fd.weight * valid
    diff = torch.where(valid[..., None], flow - fd.flow, torch.zeros_like(flow))
    return (w * torch.abs(diff).sum(-1)).sum()


# ---------------------------------------------------------------------------
# public loss API


def _check_state(state: AlignState, graph: FrameGraph) -> None:
    if len(state.scales) != len(graph.edges):
        raise ValueError(f"state has {len(state.scales)} edge scales but graph has {len(graph.edges)} edges")
    if state.num_frames != graph.num_frames:
        raise ValueError(f"state has {state.num_frames} frames but graph has {graph.num_frames}")
    shape = state.shape
    for e in graph.edges:
        if graph.predictions[e].X_nn.shape[:2] != shape:
            raise ValueError(f"pair prediction {e} has shape {graph.predictions[e].X_nn.shape[:2]}, expected {shape}")


def loss_align(state: AlignState, graph: FrameGraph, global_points: np.ndarray | None = None) -> float:
    """Pointmap alignment loss. ``global_points`` overrides the state-derived ``X^(t,w)``."""
    _check_state(state, graph)
    p = _to_params(state)
    with torch.no_grad():
        Xw = _global_points(p, _rays(state)) if global_points is None else torch.tensor(global_points, dtype=DTYPE)
        return float(_align_residual(Xw, p, _graph_data(graph)))


def loss_smooth(state: AlignState) -> float:
    with torch.no_grad():
        return float(_smooth(_to_params(state)))


def loss_flow(state: AlignState, windows: WindowSet, frame_masks: np.ndarray) -> float:
    with torch.no_grad():
        return float(_flow_loss(_to_params(state), _rays(state), _flow_data(windows, frame_masks)))


@dataclass
class AlignWeights:
    w_smooth: float = 0.01
    w_flow: float = 0.01


class Objective:
    """Total alignment objective bound to fixed problem data."""

    def __init__(self, graph: FrameGraph, windows: WindowSet | None, frame_masks: np.ndarray | None,
                 weights: AlignWeights, state_like: AlignState):
        _check_state(state_like, graph)
        self.graph = graph
        self.weights = weights
        self.rays = _rays(state_like)
        self.gdata = _graph_data(graph)
        self.fdata = None
        if windows is not None and weights.w_flow != 0:
            if frame_masks is None:
                raise ValueError("flow loss needs per-frame masks")
            self.fdata = _flow_data(windows, frame_masks)

    def terms(self, p) -> dict[str, torch.Tensor]:
        align = _align_residual(_global_points(p, self.rays), p, self.gdata)
        smooth = _smooth(p)
        flow = _flow_loss(p, self.rays, self.fdata)
        total = align + self.weights.w_smooth * smooth + self.weights.w_flow * flow
        return {"total": total, "align": align, "smooth": smooth, "flow": flow}

    def values(self, state: AlignState) -> dict[str, float]:
        with torch.no_grad():
            return {k: float(v) for k, v in self.terms(_to_params(state)).items()}

    def value_and_grad(self, state: AlignState, term: str = "total") -> tuple[float, dict[str, np.ndarray]]:
        """Loss value and gradients w.r.t. every parameter block (log-space where stored so)."""
        p = _to_params(state, requires_grad=True)
        val = self.terms(p)[term]
        val.backward()
        return float(val.detach()), {k: v.grad.numpy().copy() if v.grad is not None else np.zeros(v.shape) for k, v in p.items()}


# ---------------------------------------------------------------------------
# initialization


def _estimate_focal(X: np.ndarray, cx: float, cy: float) -> float:
    H, W = X.shape[:2]
    u, v = pixel_grid(H, W)
    a = X[..., 0] / X[..., 2]
    b = X[..., 1] / X[..., 2]
    den = a * a + b * b
    ok = den > 1e-12
    f = ((u - cx) * a + (v - cy) * b)[ok] / den[ok]
    return float(np.median(f))


def initialize_state(graph: FrameGraph, cx: float, cy: float) -> AlignState:
    """Poses from chained per-edge rigid registration, depths from ``X_nn``, focal from frame 0."""
    graph.validate()
    N = graph.num_frames
    own_edge: dict[int, tuple[int, int]] = {}
    for e in graph.edges:
        own_edge.setdefault(e[0], e)
    H, W = graph.predictions[graph.edges[0]].X_nn.shape[:2]
    depths = np.stack([np.maximum(graph.predictions[own_edge[t]].X_nn[..., 2], 1e-6) for t in range(N)])
    focal = _estimate_focal(graph.predictions[own_edge[0]].X_nn, cx, cy)

    poses: dict[int, Pose] = {0: Pose.identity()}
    edge_list = sorted(graph.edges, key=lambda e: (abs(e[1] - e[0]), e))
    changed = True
    while changed and len(poses) < N:
        changed = False
        for n, m in edge_list:
            if n in poses and m not in poses:
                pred = graph.predictions[(n, m)]
                own = graph.predictions[own_edge[m]]
                conf = (pred.C_mn * own.C_nn).ravel()
                keep = conf >= np.quantile(conf, 0.75)
                R, t, _ = umeyama(own.X_nn.reshape(-1, 3)[keep], pred.X_mn.reshape(-1, 3)[keep])
                poses[m] = poses[n].compose(Pose.from_matrix(np.block([[R, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]])))
                changed = True
    if len(poses) < N:
        raise ValueError("could not chain poses to every frame")
    scales = np.ones(len(graph.edges))
    return AlignState(np.stack([poses[t].q for t in range(N)]), np.stack([poses[t].t for t in range(N)]),
                      depths, scales, focal, cx, cy)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AlignSchedule:
    iterations: int = 300
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12


@dataclass
class AlignResult:
    state: AlignState
    trace: list[dict[str, float]]
    best_iteration: int = 0


def _project_gauge(p) -> None:
    with torch.no_grad():
        p["quats"] /= torch.linalg.norm(p["quats"], dim=-1, keepdim=True)
        p["log_scale"] -= p["log_scale"].mean()


def optimize_alignment(graph: FrameGraph, windows: WindowSet | None, frame_masks: np.ndarray | None,
                       weights: AlignWeights | None = None, schedule: AlignSchedule | None = None,
                       init: AlignState | None = None, cx: float | None = None, cy: float | None = None,
                       callback: Callable[[int, dict[str, float]], None] | None = None) -> AlignResult:
    """Adam on all alignment variables with cosine step decay.

    The trace records every iterate; the returned state is the iterate with
    the lowest total loss (ties keep the earliest). Because the L1 terms make
    an exact fit a strict minimizer, a run started at the noise-free solution
    returns it untouched.
    """
    weights = weights or AlignWeights()
    schedule = schedule or AlignSchedule()
    graph.validate()
    if init is None:
        H, W = graph.predictions[graph.edges[0]].X_nn.shape[:2]
        init = initialize_state(graph, (W - 1) / 2.0 if cx is None else cx, (H - 1) / 2.0 if cy is None else cy)
    objective = Objective(graph, windows, frame_masks, weights, init)

    p = _to_params(init, requires_grad=True)
    _project_gauge(p)
    m1 = {k: torch.zeros_like(v) for k, v in p.items()}
    m2 = {k: torch.zeros_like(v) for k, v in p.items()}
    trace: list[dict[str, float]] = []
    best = (math.inf, 0, None)

    for it in range(schedule.iterations + 1):
        terms = objective.terms(p)
        record = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in record.values()):
            raise AlignmentDiverged(it)
        trace.append(record)
        if callback is not None:
            callback(it, record)
        if record["total"] < best[0]:
            best = (record["total"], it, {k: v.detach().clone() for k, v in p.items()})
        if it == schedule.iterations:
            break
        for v in p.values():
            v.grad = None
        terms["total"].backward()
        lr = schedule.lr * 0.5 * (1 + math.cos(math.pi * it / schedule.iterations))
        with torch.no_grad():
            for k, v in p.items():
                g = v.grad
                if not torch.all(torch.isfinite(g)):
                    raise AlignmentDiverged(it, f"non-finite gradient for {k}")
                m1[k].mul_(schedule.beta1).add_(g, alpha=1 - schedule.beta1)
                m2[k].mul_(schedule.beta2).addcmul_(g, g, value=1 - schedule.beta2)
                mhat = m1[k] / (1 - schedule.beta1 ** (it + 1))
                vhat = m2[k] / (1 - schedule.beta2 ** (it + 1))
                v -= lr * mhat / (torch.sqrt(vhat) + schedule.eps)
        _project_gauge(p)
    return AlignResult(_from_params(best[2], init.cx, init.cy), trace, best[1])


def fused_point_cloud(state: AlignState, confidences: np.ndarray, frame_masks: np.ndarray | None = None,
                      percentile: float = 50.0) -> tuple[np.ndarray, np.ndarray]:
    """World points above the confidence percentile; returns ``(points, (frame, pixel) ids)``."""
    pts = state.global_pointmaps()
    conf = np.asarray(confidences, dtype=np.float64)
    keep = conf >= np.percentile(conf, percentile)
    if frame_masks is not None:
        keep &= np.asarray(frame_masks) < 0.5
    t, v, u = np.nonzero(keep)
    W = state.shape[1]
    return pts[t, v, u], np.stack([t, v * W + u], axis=1)
