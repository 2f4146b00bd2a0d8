"""Command-line pipeline: synth, ingest, align, train, render, eval.

Each command reads the manifest of the stage before it and writes its own
output directory with a fresh manifest. Exit codes: 0 ok, 2 invalid config,
3 missing input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "STATICSPLAT_NUM_THREADS"

log = logging.getLogger("staticsplat")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class AlignOptions:
    iterations: int = 300
    lr: float = 0.01
    w_smooth: float = 0.01
    w_flow: float = 0.01
    fused_percentile: float = 50.0


@dataclass
class RenderOptions:
    mode: str = "staticness"
    refine_test_poses: bool = True


@dataclass
class EvalOptions:
    threshold: float = 0.5
    dilation: int = 0


def _sections() -> dict:
    from .synth import SceneSpec
    from .trainer import TrainConfig

    return {"synth": SceneSpec(), "align": AlignOptions(), "train": TrainConfig(),
            "render": RenderOptions(), "eval": EvalOptions()}


def _load_config(args) -> dict:
    from .io import ConfigError, parse_config

    sections = _sections()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CommandError(EXIT_MISSING, f"config file {path} not found")
        try:
            parse_config(path.read_text(), sections, str(path))
        except ConfigError as exc:
            raise CommandError(EXIT_CONFIG, str(exc)) from None
    if getattr(args, "seed", None) is not None:
        sections["synth"].seed = args.seed
        sections["train"].seed = args.seed
    return sections


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_MISSING, f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise CommandError(EXIT_MISSING, f"output directory {out} is not writable")
    return out


def _rel(target: Path, start: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


# ---------------------------------------------------------------------------
# loading helpers


@dataclass
class _Inputs:
    manifest: object
    images: np.ndarray
    graph: object
    windows: object
    frame_masks: np.ndarray
    frame_conf: np.ndarray


def _load_pairs(man):
    from .align import FrameGraph, PairPrediction
    from .io import MissingInput, pair_name, read_mask, read_pfm, read_pointmap

    roles = {"pair_pointmap_nn": "pointmap_nn", "pair_pointmap_mn": "pointmap_mn",
             "pair_confidence_nn": "conf_nn", "pair_confidence_mn": "conf_mn", "pair_mask": "mask"}
    by_role = {r: man.per_edge(r) for r in roles}
    edges = sorted(set().union(*[set(v) for v in by_role.values()]))
    if not edges:
        raise MissingInput("manifest lists no pair predictions")
    preds = {}
    for n, m in edges:
        for role, prefix in roles.items():
            if (n, m) not in by_role[role]:
                raise MissingInput(f"manifest has no {pair_name(prefix, n, m)} ({role})")
        X_nn = read_pointmap(man.path(by_role["pair_pointmap_nn"][(n, m)]))
        X_mn = read_pointmap(man.path(by_role["pair_pointmap_mn"][(n, m)]))
        C_nn = read_pfm(man.path(by_role["pair_confidence_nn"][(n, m)]))
        C_mn = read_pfm(man.path(by_role["pair_confidence_mn"][(n, m)]))
        M = read_mask(man.path(by_role["pair_mask"][(n, m)]))
        preds[(n, m)] = PairPrediction(X_nn, X_mn, C_nn, C_mn, M)
    graph = FrameGraph(man.num_frames, edges, preds)
    try:
        graph.validate()
    except ValueError as exc:
        raise MissingInput(str(exc)) from None
    return graph


def _load_windows(man):
    from .align import WindowSet
    from .geometry import FlowField
    from .io import read_pfm

    flows = {}
    for (t, t2), entry in sorted(man.per_edge("flow").items()):
        u, v, valid = read_pfm(man.path(entry), 3)
        flows[(t, t2)] = FlowField(np.stack([u, v], axis=-1), valid > 0.5)
    if not flows:
        return None
    windows: dict[int, list] = {}
    for t, t2 in flows:
        windows.setdefault(min(t, t2), []).append((t, t2))
    return WindowSet([windows[k] for k in sorted(windows)], flows)


def _load_inputs(data_dir: Path) -> _Inputs:
    from .io import Manifest, read_rgb
    from .masks import aggregate_all

    man = Manifest.load(data_dir)
    images = np.stack([read_rgb(p) for p in man.per_frame("frame")])
    graph = _load_pairs(man)
    frame_masks = aggregate_all(graph.edges, graph.pair_masks(), man.num_frames)
    conf = np.zeros((man.num_frames,) + images.shape[1:3])
    count = np.zeros(man.num_frames)
    for (n, m), pred in graph.predictions.items():
        conf[n] += pred.C_nn
        count[n] += 1
    conf /= count[:, None, None]
    return _Inputs(man, images, graph, _load_windows(man), frame_masks, conf)


def _load_intrinsics(path: Path):
    from .geometry import Intrinsics

    d = json.loads(path.read_text())
    return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


def _write_intrinsics(path: Path, intr) -> None:
    d = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "width": intr.width, "height": intr.height}
    path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def _upstream(man, key: str) -> Path:
    from .io import MissingInput

    if key not in man.meta:
        raise MissingInput(f"manifest in {man.root} does not reference its {key} directory")
    return (man.root / man.meta[key]).resolve()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .io import Manifest, pair_name, write_mask, write_pfm, write_pointmap, write_rgb, write_trajectory
    from .synth import generate

    sections = _load_config(args)
    spec = sections["synth"]
    try:
        spec.validate()
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, f"invalid synth config: {exc}") from None
    out = _out_dir(args)
    ds = generate(spec)
    H, W = spec.height, spec.width
    man = Manifest(out, W, H, ds.num_frames, meta={"sequence": f"synth_seed{spec.seed}", "gt_focal": ds.intr.fx})
    for sub in ("frames", "depth", "pointmap", "masks", "static", "pairs", "flow"):
        (out / sub).mkdir(exist_ok=True)
    pms = ds.pointmaps()
    for t in range(ds.num_frames):
        write_rgb(man.add(f"frames/frame_{t:05d}.png", "frame", frame=t), ds.images[t])
        write_pfm(man.add(f"depth/depth_{t:05d}.pfm", "depth", frame=t), ds.depths[t])
        write_pointmap(man.add(f"pointmap/pointmap_{t:05d}.pfm", "pointmap", frame=t), pms[t])
        write_mask(man.add(f"masks/gtmask_{t:05d}.png", "mask", frame=t), ds.masks[t])
        write_rgb(man.add(f"static/static_{t:05d}.png", "static_frame", frame=t), ds.static_images[t])
    write_trajectory(man.add("trajectory.txt", "trajectory"), ds.poses)
    for n, m in ds.graph.edges:
        pred = ds.graph.predictions[(n, m)]
        write_pointmap(man.add(f"pairs/{pair_name('pointmap_nn', n, m)}.pfm", "pair_pointmap_nn", edge=(n, m)), pred.X_nn)
        write_pointmap(man.add(f"pairs/{pair_name('pointmap_mn', n, m)}.pfm", "pair_pointmap_mn", edge=(n, m)), pred.X_mn)
        write_pfm(man.add(f"pairs/{pair_name('conf_nn', n, m)}.pfm", "pair_confidence_nn", edge=(n, m)), pred.C_nn)
        write_pfm(man.add(f"pairs/{pair_name('conf_mn', n, m)}.pfm", "pair_confidence_mn", edge=(n, m)), pred.C_mn)
        write_mask(man.add(f"pairs/{pair_name('mask', n, m)}.png", "pair_mask", edge=(n, m)), pred.M_nn)
    for (t, t2), ff in ds.windows.flows.items():
        stack = np.stack([ff.flow[..., 0], ff.flow[..., 1], ff.valid.astype(np.float64)])
        write_pfm(man.add(f"flow/{pair_name('flow', t, t2)}.pfm", "flow", edge=(t, t2)), stack)
    man.save()
    print(f"wrote {ds.num_frames} frames and {len(ds.graph.edges)} pair predictions to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    """Copy externally produced frames and pair predictions into manifest form."""
    from .io import Manifest, MissingInput, pair_name, read_mask, read_pfm, read_pointmap, read_rgb, write_pfm

    out = _out_dir(args)
    frames_dir, pairs_dir = Path(args.frames), Path(args.pairs)
    frame_files = sorted(frames_dir.glob("*.png"))
    if not frame_files:
        raise MissingInput(f"no .png frames in {frames_dir}")
    first = read_rgb(frame_files[0])
    H, W = first.shape[:2]
    N = len(frame_files)
    man = Manifest(out, W, H, N, meta={"sequence": args.sequence or frames_dir.resolve().name})
    for sub in ("frames", "pairs", "flow", "masks"):
        (out / sub).mkdir(exist_ok=True)

    def check(arr, what, shape):
        if arr.shape[:2] != shape:
            raise ValueError(f"{what} has shape {arr.shape[:2]}, frames are {shape}")

    for t, f in enumerate(frame_files):
        check(read_rgb(f), f.name, (H, W))
        shutil.copyfile(f, man.add(f"frames/frame_{t:05d}.png", "frame", frame=t))
    edges = []
    for f in sorted(pairs_dir.glob("mask_*_*.png")):
        n, m = (int(x) for x in f.stem.split("_")[1:3])
        edges.append((n, m))
    if not edges:
        raise MissingInput(f"no mask_NNNNN_MMMMM.png pair masks in {pairs_dir}")
    for n, m in edges:
        if not (0 <= n < N and 0 <= m < N):
            raise ValueError(f"edge ({n}, {m}) refers to a frame outside 0..{N - 1}")
        for prefix, role in (("pointmap_nn", "pair_pointmap_nn"), ("pointmap_mn", "pair_pointmap_mn")):
            src = pairs_dir / f"{pair_name(prefix, n, m)}.pfm"
            if not src.is_file():
                raise MissingInput(f"missing {pair_name(prefix, n, m)}.pfm in {pairs_dir}")
            check(read_pointmap(src), src.name, (H, W))
            shutil.copyfile(src, man.add(f"pairs/{src.name}", role, edge=(n, m)))
        for prefix, role in (("conf_nn", "pair_confidence_nn"), ("conf_mn", "pair_confidence_mn")):
            src = pairs_dir / f"{pair_name(prefix, n, m)}.pfm"
            dst = man.add(f"pairs/{pair_name(prefix, n, m)}.pfm", role, edge=(n, m))
            if src.is_file():
                check(read_pfm(src), src.name, (H, W))
                shutil.copyfile(src, dst)
            else:
                write_pfm(dst, np.ones((H, W)))
        src = pairs_dir / f"{pair_name('mask', n, m)}.png"
        check(read_mask(src), src.name, (H, W))
        shutil.copyfile(src, man.add(f"pairs/{src.name}", "pair_mask", edge=(n, m)))
    for f in sorted(pairs_dir.glob("flow_*_*.pfm")):
        t, t2 = (int(x) for x in f.stem.split("_")[1:3])
        arr = read_pfm(f, 3)
        check(arr[0], f.name, (H, W))
        shutil.copyfile(f, man.add(f"flow/{f.name}", "flow", edge=(t, t2)))
    if args.masks:
        mask_files = sorted(Path(args.masks).glob("*.png"))
        if len(mask_files) != N:
            raise MissingInput(f"expected {N} ground-truth masks in {args.masks}, found {len(mask_files)}")
        for t, f in enumerate(mask_files):
            check(read_mask(f), f.name, (H, W))
            shutil.copyfile(f, man.add(f"masks/gtmask_{t:05d}.png", "mask", frame=t))
    if args.trajectory:
        shutil.copyfile(args.trajectory, man.add("trajectory.txt", "trajectory"))
    man.save()
    print(f"ingested {N} frames and {len(edges)} edges into {out}")
    return EXIT_OK


def cmd_align(args) -> int:
    from .align import AlignmentDiverged, AlignSchedule, AlignWeights, fused_point_cloud, optimize_alignment
    from .io import Manifest, read_trajectory, write_pfm, write_points, write_trajectory
    from .metrics import trajectory_metrics

    sections = _load_config(args)
    opts: AlignOptions = sections["align"]
    if args.w_flow is not None:
        opts.w_flow = args.w_flow
    if args.iterations is not None:
        opts.iterations = args.iterations
    data_dir = Path(args.data)
    inp = _load_inputs(data_dir)
    out = _out_dir(args)
    man = inp.manifest
    log_path = out / "align_log.jsonl"

    with open(log_path, "w") as logf:
        def record(it, terms):
            logf.write(json.dumps({"iteration": it, **terms}, sort_keys=True) + "\n")

        try:
            result = optimize_alignment(inp.graph, inp.windows, inp.frame_masks,
                                        AlignWeights(opts.w_smooth, opts.w_flow),
                                        AlignSchedule(iterations=opts.iterations, lr=opts.lr), callback=record)
        except AlignmentDiverged as exc:
            raise CommandError(EXIT_NUMERIC, str(exc)) from None
        state = result.state
        summary = {"event": "summary", "best_iteration": result.best_iteration, "focal": state.focal}
        gt_traj = man.single("trajectory", required=False)
        if gt_traj is not None:
            _, gt = read_trajectory(gt_traj)
            tm = trajectory_metrics(state.poses(), gt)
            summary.update(ate=tm.ate, rpe_trans=tm.rpe_trans, rpe_rot=tm.rpe_rot)
        logf.write(json.dumps(summary, sort_keys=True) + "\n")

    res = Manifest(out, man.width, man.height, man.num_frames, meta={"data": _rel(data_dir, out)})
    res.entries.append({"path": "align_log.jsonl", "role": "align_log"})
    write_trajectory(res.add("trajectory.txt", "trajectory"), state.poses())
    _write_intrinsics(res.add("intrinsics.json", "intrinsics"), state.intrinsics())
    (out / "depth").mkdir(exist_ok=True)
    for t in range(man.num_frames):
        write_pfm(res.add(f"depth/depth_{t:05d}.pfm", "depth", frame=t), state.depths[t])
    pts, ids = fused_point_cloud(state, inp.frame_conf, inp.frame_masks, opts.fused_percentile)
    H, W = state.shape
    colors = inp.images[ids[:, 0], ids[:, 1] // W, ids[:, 1] % W]
    write_points(res.add("fused.ply", "fused_cloud"), pts, colors)
    res.save()
    msg = f"aligned {man.num_frames} frames; best iteration {result.best_iteration}"
    if "ate" in summary:
        msg += f"; ATE {summary['ate']:.3e}"
    print(msg)
    return EXIT_OK


def _train_inputs(align_dir: Path):
    from .align import AlignState
    from .io import Manifest, read_pfm, read_trajectory

    aman = Manifest.load(align_dir)
    data_dir = _upstream(aman, "data")
    inp = _load_inputs(data_dir)
    _, poses = read_trajectory(aman.single("trajectory"))
    intr = _load_intrinsics(aman.single("intrinsics"))
    depths = np.stack([read_pfm(p) for p in aman.per_frame("depth")])
    state = AlignState.from_poses(poses, depths, intr, len(inp.graph.edges))
    return aman, data_dir, inp, state


def cmd_train(args) -> int:
    from .io import Manifest, dump_config, write_cloud, write_trajectory
    from .metrics import split_frames
    from .trainer import FrameDataset, TrainingDiverged, init_cloud, train

    sections = _load_config(args)
    cfg = sections["train"]
    if args.iterations is not None:
        cfg.iterations = args.iterations
    try:
        cfg.validate()
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, f"invalid train config: {exc}") from None
    align_dir = Path(args.aligned)
    aman, data_dir, inp, state = _train_inputs(align_dir)
    out = _out_dir(args)
    train_idx, test_idx = split_frames(aman.num_frames)
    try:
        cloud = init_cloud(state, inp.frame_conf, inp.frame_masks, inp.images, cfg, frames=train_idx)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    data = FrameDataset(inp.images, state.poses(), 1.0 - inp.frame_masks, state.intrinsics(), test_idx)
    try:
        result = train(cloud, data, cfg)
    except TrainingDiverged as exc:
        raise CommandError(EXIT_NUMERIC, str(exc)) from None

    res = Manifest(out, aman.width, aman.height, aman.num_frames,
                   meta={"data": _rel(data_dir, out), "aligned": _rel(align_dir, out)})
    write_cloud(res.add("cloud.ply", "cloud"), result.cloud)
    write_trajectory(res.add("trajectory.txt", "trajectory"), result.poses)
    _write_intrinsics(res.add("intrinsics.json", "intrinsics"), state.intrinsics())
    res.add("config.txt", "config").write_text(dump_config({"train": cfg}))
    with open(res.add("loss.csv", "loss_trace"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "loss_total", "loss_l1", "loss_ssim"])
        for it, total, l1, dssim in result.trace:
            w.writerow([it, repr(total), repr(l1), repr(dssim)])
    res.save()
    print(f"trained {len(result.cloud)} Gaussians for {cfg.iterations} iterations")
    return EXIT_OK


def cmd_render(args) -> int:
    from .io import Manifest, parse_config, read_cloud, read_trajectory, write_pfm, write_rgb, write_trajectory
    from .metrics import split_frames
    from .splat import render
    from .trainer import TrainConfig, TrainingDiverged, prune_low_staticness, refine_test_poses

    sections = _load_config(args)
    ropts: RenderOptions = sections["render"]
    if args.mode is not None:
        ropts.mode = args.mode
    if ropts.mode not in ("plain", "staticness"):
        raise CommandError(EXIT_CONFIG, f"unknown render mode {ropts.mode!r}")
    train_dir = Path(args.trained)
    tman = Manifest.load(train_dir)
    data_dir = _upstream(tman, "data")
    inp = _load_inputs(data_dir)
    cloud = read_cloud(tman.single("cloud"))
    _, poses = read_trajectory(tman.single("trajectory"))
    intr = _load_intrinsics(tman.single("intrinsics"))
    cfg = TrainConfig()
    parse_config(tman.single("config").read_text(), {"train": cfg}, "config.txt")
    if args.prune is not None:
        cloud = prune_low_staticness(cloud, args.prune)
    out = _out_dir(args)
    _, test_idx = split_frames(tman.num_frames)
    test_poses = [poses[t] for t in test_idx]
    if ropts.refine_test_poses and len(test_idx):
        try:
            test_poses = refine_test_poses(cloud, inp.images[test_idx], test_poses,
                                           1.0 - inp.frame_masks[test_idx], intr, cfg)
        except TrainingDiverged as exc:
            raise CommandError(EXIT_NUMERIC, str(exc)) from None
    res = Manifest(out, tman.width, tman.height, tman.num_frames,
                   meta={"data": _rel(data_dir, out), "trained": _rel(train_dir, out), "mode": ropts.mode})
    (out / "renders").mkdir(exist_ok=True)
    for t, pose in zip(test_idx, test_poses):
        img = render(cloud, pose, intr, ropts.mode).image
        write_rgb(res.add(f"renders/render_{t:05d}.png", "render", frame=t), img)
        write_pfm(res.add(f"renders/render_{t:05d}.pfm", "render_float", frame=t), np.moveaxis(img, -1, 0))
    write_trajectory(res.add("test_trajectory.txt", "test_trajectory"), test_poses, timestamps=test_idx)
    res.save()
    print(f"rendered {len(test_idx)} test frames in {ropts.mode} mode")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import Manifest, MissingInput, read_mask, read_pfm, read_rgb, read_trajectory
    from .masks import mask_iou
    from .metrics import METRIC_COLUMNS, masked_psnr, masked_ssim, trajectory_metrics

    sections = _load_config(args)
    eopts: EvalOptions = sections["eval"]
    render_dir = Path(args.rendered)
    rman = Manifest.load(render_dir)
    data_dir = _upstream(rman, "data")
    tman = Manifest.load(_upstream(rman, "trained"))
    aman = Manifest.load(_upstream(tman, "aligned"))
    inp = _load_inputs(data_dir)
    dman = inp.manifest
    gt_masks = dman.per_frame("mask", required=False)
    if gt_masks is None:
        raise MissingInput("evaluation needs ground-truth dynamic masks (role 'mask') in the data manifest")
    gt_masks = np.stack([read_mask(p) for p in gt_masks])
    iou = float(np.mean([mask_iou(inp.frame_masks[t], gt_masks[t], eopts.threshold) for t in range(dman.num_frames)]))
    traj = dman.single("trajectory", required=False)
    if traj is not None:
        _, gt = read_trajectory(traj)
        _, est = read_trajectory(aman.single("trajectory"))
        tm = trajectory_metrics(est, gt)
        ate, rpe_t, rpe_r = tm.ate, tm.rpe_trans, tm.rpe_rot
    else:
        ate = rpe_t = rpe_r = float("nan")
    sequence = dman.meta.get("sequence", data_dir.name)
    rows = []
    for entry in sorted(rman.find("render_float"), key=lambda e: e["frame"]):
        t = entry["frame"]
        img = np.moveaxis(read_pfm(rman.path(entry), 3), 0, -1)
        gt_img = read_rgb(dman.per_frame("frame")[t])
        psnr = masked_psnr(img, gt_img, gt_masks[t], eopts.threshold, eopts.dilation)
        ssim = masked_ssim(img, gt_img, gt_masks[t], eopts.threshold, eopts.dilation)
        rows.append([f"{sequence}/{t:05d}", psnr, ssim, iou, ate, rpe_t, rpe_r])
    out = _out_dir(args)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])
    lines = [f"sequence {sequence}", f"test frames {len(rows)}"]
    if rows:
        lines.append(f"psnr {np.mean([r[1] for r in rows]):.4f}")
        lines.append(f"ssim {np.mean([r[2] for r in rows]):.4f}")
    lines += [f"iou {iou:.4f}", f"ate {ate:.6f}", f"rpe_trans {rpe_t:.6f}", f"rpe_rot {rpe_r:.6f}"]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="staticsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key-value config file (section.key = value)")
        p.add_argument("--seed", type=int, help="random seed override")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("ingest", help="import external frames and pair predictions"))
    p.add_argument("--frames", required=True, help="directory of RGB frames (*.png, sorted by name)")
    p.add_argument("--pairs", required=True, help="directory of per-edge pointmaps, confidences, masks, flows")
    p.add_argument("--masks", help="optional directory of ground-truth dynamic masks")
    p.add_argument("--trajectory", help="optional ground-truth trajectory file")
    p.add_argument("--sequence", help="sequence name for reports")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("align", help="globally align pair predictions"))
    p.add_argument("data", help="dataset directory (synth or ingest output)")
    p.add_argument("--w-flow", type=float, help="flow loss weight")
    p.add_argument("--iterations", type=int, help="optimizer iterations")
    p.set_defaults(func=cmd_align)

    p = common(sub.add_parser("train", help="train the Gaussian model"))
    p.add_argument("aligned", help="align output directory")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("render", help="render held-out frames"))
    p.add_argument("trained", help="train output directory")
    p.add_argument("--mode", choices=("plain", "staticness"), help="blending mode")
    p.add_argument("--prune", type=float, help="drop Gaussians with staticness below this value before rendering")
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("eval", help="compute metrics for rendered frames"))
    p.add_argument("rendered", help="render output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def _configure_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    n = int(value)
    import numba
    import torch

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    from .io import ConfigError, MissingInput

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _configure_threads()
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FileNotFoundError, ValueError) as exc:
        # unreadable or inconsistent input data
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
