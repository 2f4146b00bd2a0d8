"""On-disk formats shared by the command-line tools."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .geometry import Pose
from .masks import mask_from_uint8, mask_to_uint8
from .splat import GaussianCloud

MANIFEST_NAME = "manifest.json"


class MissingInput(FileNotFoundError):
    """A file the manifest promises (or the pipeline needs) is absent."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# float maps (little-endian PFM, several channels stacked vertically)


def write_pfm(path: Path, maps: np.ndarray) -> None:
    """Write an (H, W) map, or a (C, H, W) stack stored as C maps one above the other."""
    data = np.asarray(maps, dtype="<f4")
    if data.ndim == 3:
        data = data.reshape(-1, data.shape[-1])
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D map or a stack of maps, got shape {maps.shape}")
    H, W = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: Path, channels: int = 1) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported, header {kind!r}")
        W, H = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(W * H * 4), dtype=dtype)
    if data.size != W * H:
        raise ValueError(f"{path}: truncated float map")
    data = data.reshape(H, W)[::-1].astype(np.float64)
    if channels == 1:
        return data
    if H % channels:
        raise ValueError(f"{path}: height {H} is not a multiple of {channels} channels")
    return data.reshape(channels, H // channels, W)


def write_pointmap(path: Path, pm: np.ndarray) -> None:
    write_pfm(path, np.moveaxis(pm, -1, 0))


def read_pointmap(path: Path) -> np.ndarray:
    return np.moveaxis(read_pfm(path, 3), 0, -1)


# ---------------------------------------------------------------------------
# 8-bit images


def write_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), mode="RGB").save(path)


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path: Path, m: np.ndarray) -> None:
    Image.fromarray(mask_to_uint8(m), mode="L").save(path)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return mask_from_uint8(np.asarray(im.convert("L")))


# ---------------------------------------------------------------------------
# trajectories: "timestamp tx ty tz qx qy qz qw"


def write_trajectory(path: Path, poses: list[Pose], timestamps=None) -> None:
    timestamps = range(len(poses)) if timestamps is None else timestamps
    lines = []
    for ts, p in zip(timestamps, poses):
        w, x, y, z = p.q
        vals = [float(ts), *p.t, x, y, z, w]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: Path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, vals)
        stamps.append(ts)
        poses.append(Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return np.array(stamps), poses


# ---------------------------------------------------------------------------
# Gaussian clouds: binary little-endian PLY with fixed field names

CLOUD_FIELDS = (
    [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    + [(f"log_scale_{i}", "<f8") for i in range(3)]
    + [(f"rot_{i}", "<f8") for i in range(4)]  # w, x, y, z
    + [(f"color_{i}", "<f8") for i in range(3)]
    + [("opacity_logit", "<f8"), ("staticness_logit", "<f8"), ("source_frame", "<i4"), ("source_pixel", "<i4")]
)
_PLY_TYPES = {"<f8": "double", "<f4": "float", "<i4": "int", "<u1": "uchar"}


def _ply_header(n: int, spec) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {_PLY_TYPES[t]} {name}" for name, t in spec]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_cloud(path: Path, cloud: GaussianCloud) -> None:
    rec = np.empty(len(cloud), dtype=CLOUD_FIELDS)
    for i, ax in enumerate("xyz"):
        rec[ax] = cloud.mu[:, i]
    for i in range(3):
        rec[f"log_scale_{i}"] = cloud.log_scale[:, i]
        rec[f"color_{i}"] = cloud.color[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotation[:, i]
    rec["opacity_logit"] = cloud.opacity_logit
    rec["staticness_logit"] = cloud.staticness_logit
    rec["source_frame"] = cloud.source_frame
    rec["source_pixel"] = cloud.source_pixel
    with open(path, "wb") as f:
        f.write(_ply_header(len(cloud), CLOUD_FIELDS))
        f.write(rec.tobytes())


def _read_ply(path: Path) -> np.ndarray:
    inv = {v: k for k, v in _PLY_TYPES.items()}
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n, spec = 0, []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            parts = line.decode("ascii").split()
            if parts[0] == "format" and parts[1] != "binary_little_endian":
                raise ValueError(f"{path}: unsupported PLY format {parts[1]}")
            if parts[0] == "element":
                n = int(parts[2])
            elif parts[0] == "property":
                spec.append((parts[2], inv[parts[1]]))
            elif parts[0] == "end_header":
                break
        return np.frombuffer(f.read(), dtype=spec, count=n)


def read_cloud(path: Path) -> GaussianCloud:
    rec = _read_ply(path)
    return GaussianCloud(
        mu=np.stack([rec[a] for a in "xyz"], axis=1),
        log_scale=np.stack([rec[f"log_scale_{i}"] for i in range(3)], axis=1),
        rotation=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1),
        color=np.stack([rec[f"color_{i}"] for i in range(3)], axis=1),
        opacity_logit=rec["opacity_logit"],
        staticness_logit=rec["staticness_logit"],
        source_frame=rec["source_frame"],
        source_pixel=rec["source_pixel"],
    )


def write_points(path: Path, pts: np.ndarray, colors: np.ndarray) -> None:
    """Plain colored point cloud (the fused alignment output)."""
    spec = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
    rec = np.empty(len(pts), dtype=spec)
    for i, ax in enumerate("xyz"):
        rec[ax] = pts[:, i]
    rgb = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    for i, c in enumerate(("red", "green", "blue")):
        rec[c] = rgb[:, i]
    with open(path, "wb") as f:
        f.write(_ply_header(len(pts), spec))
        f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    """Index of every file a stage produced, each tagged with a role and optional frame / edge."""

    root: Path
    width: int
    height: int
    num_frames: int
    entries: list[dict[str, Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(self, path: str, role: str, frame: int | None = None, edge: tuple[int, int] | None = None) -> Path:
        entry: dict[str, Any] = {"path": path, "role": role}
        if frame is not None:
            entry["frame"] = int(frame)
        if edge is not None:
            entry["edge"] = [int(edge[0]), int(edge[1])]
        self.entries.append(entry)
        return self.root / path

    def find(self, role: str) -> list[dict[str, Any]]:
        return [e for e in self.entries if e["role"] == role]

    def path(self, entry: dict[str, Any]) -> Path:
        p = self.root / entry["path"]
        if not p.is_file():
            raise MissingInput(f"missing input file {entry['path']} (role {entry['role']})")
        return p

    def per_frame(self, role: str, required: bool = True) -> list[Path] | None:
        found = {e["frame"]: e for e in self.find(role)}
        if not found and not required:
            return None
        missing = [t for t in range(self.num_frames) if t not in found]
        if missing:
            raise MissingInput(f"manifest has no {role} for frame {missing[0]}")
        return [self.path(found[t]) for t in range(self.num_frames)]

    def single(self, role: str, required: bool = True) -> Path | None:
        found = self.find(role)
        if not found:
            if required:
                raise MissingInput(f"manifest has no {role} entry")
            return None
        return self.path(found[0])

    def per_edge(self, role: str) -> dict[tuple[int, int], dict[str, Any]]:
        return {tuple(e["edge"]): e for e in self.find(role)}

    def save(self) -> None:
        doc = {"width": self.width, "height": self.height, "num_frames": self.num_frames,
               "meta": self.meta, "files": self.entries}
        (self.root / MANIFEST_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: Path) -> "Manifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise MissingInput(f"no {MANIFEST_NAME} in {root}")
        doc = json.loads(path.read_text())
        return cls(root, int(doc["width"]), int(doc["height"]), int(doc["num_frames"]),
                   list(doc["files"]), dict(doc.get("meta", {})))


def pair_name(prefix: str, n: int, m: int) -> str:
    return f"{prefix}_{n:05d}_{m:05d}"


# ---------------------------------------------------------------------------
# key-value config files: "section.key = value"

_LINE = re.compile(r"^\s*([A-Za-z_][\w]*)\.([A-Za-z_][\w]*)\s*=\s*(.*?)\s*$")


def _coerce(raw: str, current: Any, where: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            if current is None and raw.lower() in ("none", ""):
                return None
            return float(raw)
        if isinstance(current, tuple):
            parts = [p for p in re.split(r"[,\s]+", raw) if p]
            kind = type(current[0]) if current else float
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def parse_config(text: str, sections: dict[str, Any], source: str = "<config>") -> None:
    """Apply ``section.key = value`` lines onto the dataclass instances in ``sections``."""
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        match = _LINE.match(stripped)
        if not match:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line.strip()!r}")
        section, key, raw = match.groups()
        target = sections.get(section)
        names = {f.name for f in fields(target)} if target is not None else set()
        if key not in names:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        setattr(target, key, _coerce(raw, getattr(target, key), where))


def dump_config(sections: dict[str, Any]) -> str:
    lines = []
    for name, obj in sections.items():
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (list, dict)) or (value is not None and not isinstance(value, (bool, int, float, str, tuple))):
                continue
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
