"""Small random problem builders shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from staticsplat.align import AlignState, PairPrediction, build_graph, build_windows
from staticsplat.geometry import (FlowField, Intrinsics, Pose, axis_angle_to_quat, depth_to_pointmap, induced_flow,
                                 project_points)
from staticsplat.splat import PARAM_NAMES, GaussianCloud, render, render_backward, render_forward


def random_pose(rng: np.random.Generator, rot_deg: float = 10.0, trans: float = 0.3) -> Pose:
    axis = rng.normal(size=3)
    return Pose(axis_angle_to_quat(axis, np.radians(rng.uniform(-rot_deg, rot_deg))), rng.uniform(-trans, trans, 3))


def consistent_predictions(state: AlignState, graph, scale: float = 1.0) -> None:
    """Fill ``graph.predictions`` with pair pointmaps that the state reproduces exactly."""
    intr = state.intrinsics()
    poses = state.poses()
    for n, m in graph.edges:
        X_nn = depth_to_pointmap(state.depths[n], intr)
        X_mn = poses[n].inverse().apply(poses[m].apply(depth_to_pointmap(state.depths[m], intr)))
        ones = np.ones(state.shape)
        graph.predictions[(n, m)] = PairPrediction(scale * X_nn, scale * X_mn, ones, ones, np.zeros(state.shape))


def random_alignment_problem(rng: np.random.Generator, num_frames: int = 3, size: int = 8):
    """A graph, windows, masks and a state that does not fit the data exactly."""
    graph = build_graph(num_frames, (1, 2))
    windows = build_windows(num_frames, (1, 2))
    intr = Intrinsics.centered(0.9 * size, size, size)
    poses = [Pose.identity()] + [random_pose(rng, 3.0, 0.05) for _ in range(num_frames - 1)]
    depths = rng.uniform(2.0, 3.0, (num_frames, size, size))
    truth = AlignState.from_poses(poses, depths, intr, len(graph))
    consistent_predictions(truth, graph)
    for e, pred in graph.predictions.items():
        pred.X_nn = pred.X_nn + rng.normal(0, 0.05, pred.X_nn.shape)
        pred.X_mn = pred.X_mn + rng.normal(0, 0.05, pred.X_mn.shape)
        pred.C_nn = rng.uniform(0.5, 2.0, truth.shape)
        pred.C_mn = rng.uniform(0.5, 2.0, truth.shape)
    masks = rng.uniform(0, 1, (num_frames, size, size))
    # redraw the start state until no reprojected pixel sits near the image
    # border, where a tiny step would flip its flow validity
    while True:
        state = truth.copy()
        state.quats = np.stack([random_pose(rng, 2.0, 0.0).q for _ in range(num_frames)])
        state.quats *= rng.uniform(0.8, 1.2, (num_frames, 1))
        state.trans = state.trans + rng.normal(0, 0.05, state.trans.shape)
        state.depths = state.depths * rng.uniform(0.9, 1.1, state.depths.shape)
        state.scales = np.exp(rng.normal(0, 0.1, len(graph)))
        state.focal = truth.focal * 1.05
        if _border_margin(state, windows) > 1e-2:
            break
    # observed flow sits at least 0.05 px from the start state's induced flow in
    # every component, so finite differences never straddle the L1 kink
    start_poses, start_intr = state.poses(), state.intrinsics()
    for pr in windows.pairs():
        f = induced_flow(state.depths[pr[0]], start_poses[pr[0]], start_poses[pr[1]], start_intr)
        offset = rng.choice([-1.0, 1.0], f.flow.shape) * rng.uniform(0.05, 0.5, f.flow.shape)
        windows.flows[pr] = FlowField(f.flow + offset, f.valid)
    return graph, windows, masks, state


def _border_margin(state: AlignState, windows) -> float:
    """Smallest distance in pixels from any reprojected pixel to the validity border."""
    poses, intr = state.poses(), state.intrinsics()
    H, W = state.shape
    margin = np.inf
    for n, m in windows.pairs():
        pts = poses[m].inverse().apply(poses[n].apply(depth_to_pointmap(state.depths[n], intr)))
        uv, _ = project_points(pts, intr)
        edges = np.concatenate([uv[..., 0] + 0.5, W - 0.5 - uv[..., 0], uv[..., 1] + 0.5, H - 0.5 - uv[..., 1]])
        margin = min(margin, float(np.abs(edges).min()))
    return margin


def random_cloud(rng: np.random.Generator, n: int = 5, spread: float = 0.4) -> GaussianCloud:
    """Gaussians in front of an identity camera, sized to cover a few pixels of a 16x16 image."""
    mu = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(2.0, 3.0, n)])
    rot = rng.normal(size=(n, 4))
    return GaussianCloud(
        mu=mu,
        log_scale=np.log(rng.uniform(0.08, 0.25, (n, 3))),
        rotation=rot / np.linalg.norm(rot, axis=1, keepdims=True),
        color=rng.uniform(0, 1, (n, 3)),
        opacity_logit=rng.normal(0.5, 1.0, n),
        staticness_logit=rng.normal(1.0, 1.0, n),
    )


def render_gradient_errors(rng: np.random.Generator, mode: str = "staticness", size: int = 16,
                           h: float = 1e-5) -> dict[str, float]:
    """Blockwise relative error between render_backward and central differences of <G, render>."""
    cloud = random_cloud(rng)
    intr = Intrinsics.centered(float(size), size, size)
    pose = random_pose(rng, 2.0, 0.05)
    upstream = rng.normal(size=(size, size, 3))

    def loss(c, p):
        return float(np.sum(render(c, p, intr, mode).image * upstream))

    grads = render_backward(render_forward(cloud, pose, intr, mode), upstream)
    errors = {}
    for name in PARAM_NAMES:
        values = getattr(cloud, name)
        fd = np.zeros_like(values)
        for index in np.ndindex(values.shape):
            plus, minus = cloud.copy(), cloud.copy()
            getattr(plus, name)[index] += h
            getattr(minus, name)[index] -= h
            fd[index] = (loss(plus, pose) - loss(minus, pose)) / (2 * h)
        errors[name] = _block_error(getattr(grads, name), fd)
    for name, analytic in (("pose_q", grads.pose_q), ("pose_t", grads.pose_t)):
        base = pose.q if name == "pose_q" else pose.t
        fd = np.zeros(len(base))
        for i in range(len(base)):
            step = np.zeros(len(base))
            step[i] = h
            if name == "pose_q":
                plus, minus = Pose(base + step, pose.t), Pose(base - step, pose.t)
            else:
                plus, minus = Pose(pose.q, base + step), Pose(pose.q, base - step)
            fd[i] = (loss(cloud, plus) - loss(cloud, minus)) / (2 * h)
        errors[name] = _block_error(analytic, fd)
    return errors


def _block_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-8))
