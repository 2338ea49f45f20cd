"""Radar-to-camera geometry and the 4-channel radar raster.

A radar return lives in the radar frame; a rigid transform moves it into the
camera frame (x right, y down, z forward) and a pinhole model projects it
onto the image. Projected returns are rasterized into a range / elevation /
velocity / power (REVP) image aligned with the camera pixels, which is what
the radar branch of the network consumes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


class InvalidExtrinsicError(ValueError):
    """Rotation failed the orthonormality / right-handedness check."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")


@dataclass(frozen=True, eq=False)
class Extrinsic:
    """Radar -> camera rigid transform: p_cam = rotation @ p_radar + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise InvalidExtrinsicError("rotation is not orthonormal (tolerance 1e-9)")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise InvalidExtrinsicError(f"rotation determinant {np.linalg.det(r):.12f} != +1")

    @staticmethod
    def identity() -> "Extrinsic":
        return Extrinsic(np.eye(3), np.zeros(3))


@dataclass
class RadarPoint:
    x: float
    y: float
    z: float
    velocity: float
    power: float
    frame_idx: int = 0


@dataclass
class ProjectedPoint:
    u: float
    v: float
    range_m: float
    elevation_deg: float
    velocity: float
    power: float


@dataclass(frozen=True)
class ChannelRange:
    lo: float
    hi: float

    def normalize(self, value: float) -> float:
        v = min(max(value, self.lo), self.hi)
        return (v - self.lo) / (self.hi - self.lo)


@dataclass(frozen=True)
class RevpNorm:
    """Min/max normalization ranges for the four raster channels."""

    range_m: ChannelRange = ChannelRange(0.0, 100.0)
    elevation_deg: ChannelRange = ChannelRange(-30.0, 30.0)
    velocity: ChannelRange = ChannelRange(-10.0, 10.0)
    power: ChannelRange = ChannelRange(0.0, 50.0)


@dataclass
class RevpMap:
    channels: np.ndarray  # (4, H, W) float64 in [0, 1]
    occupancy: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


MIN_DEPTH_M = 0.1


def project_points(points: list[RadarPoint], ext: Extrinsic, cam: CameraModel,
                   min_depth: float = MIN_DEPTH_M) -> list[ProjectedPoint]:
    """Project radar returns to the image; returns keep input order.

    Culls returns behind (or nearly at) the camera plane and returns whose
    nearest pixel falls outside the image. Elevation is measured upward from
    the optical axis, so camera-down y negates: asin(-y / range).
    """
    out: list[ProjectedPoint] = []
    if not points:
        return out
    xyz = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64)
    cam_pts = xyz @ ext.rotation.T + ext.translation
    for p, (x, y, z) in zip(points, cam_pts):
        if z <= min_depth:
            continue
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
        if not (-0.5 <= u < cam.width - 0.5 and -0.5 <= v < cam.height - 0.5):
            continue
        rng = float(np.sqrt(x * x + y * y + z * z))
        elev = math.degrees(math.asin(-y / rng))
        out.append(ProjectedPoint(float(u), float(v), rng, elev, p.velocity, p.power))
    return out


def back_project(u: float, v: float, range_m: float, ext: Extrinsic, cam: CameraModel) -> np.ndarray:
    """Invert the projection: pixel + range -> radar-frame position (3,)."""
    dx = (u - cam.cx) / cam.fx
    dy = (v - cam.cy) / cam.fy
    direction = np.array([dx, dy, 1.0])
    direction /= np.linalg.norm(direction)
    p_cam = direction * range_m
    return ext.rotation.T @ (p_cam - ext.translation)


def rasterize_revp(projected: list[ProjectedPoint], cam: CameraModel,
                   norm: RevpNorm = RevpNorm()) -> RevpMap:
    """Write returns at their nearest pixel; collisions keep the smallest range.

    Range ties keep the earlier point in the input order. Empty pixels stay
    exactly zero in all four channels with occupancy False.
    """
    h, w = cam.height, cam.width
    channels = np.zeros((4, h, w), dtype=np.float64)
    occupancy = np.zeros((h, w), dtype=bool)
    best_range = np.full((h, w), np.inf)
    for p in projected:
        px = int(math.floor(p.u + 0.5))
        py = int(math.floor(p.v + 0.5))
        if not (0 <= px < w and 0 <= py < h):
            continue
        if p.range_m < best_range[py, px]:
            best_range[py, px] = p.range_m
            occupancy[py, px] = True
            channels[0, py, px] = norm.range_m.normalize(p.range_m)
            channels[1, py, px] = norm.elevation_deg.normalize(p.elevation_deg)
            channels[2, py, px] = norm.velocity.normalize(p.velocity)
            channels[3, py, px] = norm.power.normalize(p.power)
    return RevpMap(channels, occupancy)


def accumulate_frames(frames: list[list[RadarPoint]], n_frames: int) -> list[RadarPoint]:
    """Concatenate the most recent n_frames point lists (index 0 = newest).

    No ego-motion compensation: the platform is static, points are merged
    as-is.
    """
    merged: list[RadarPoint] = []
    for frame in frames[:n_frames]:
        merged.extend(frame)
    return merged


def build_revp(frames: list[list[RadarPoint]], n_frames: int, ext: Extrinsic,
               cam: CameraModel, norm: RevpNorm = RevpNorm()) -> RevpMap:
    pts = accumulate_frames(frames, n_frames)
    return rasterize_revp(project_points(pts, ext, cam), cam, norm)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_calib(path: str, cam: CameraModel, ext: Extrinsic) -> None:
    payload = {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "rotation": [float(v) for v in ext.rotation.reshape(-1)],
        "translation": [float(v) for v in ext.translation],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_calib(path: str) -> tuple[CameraModel, Extrinsic]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed JSON ({e})") from e
    for key in ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"):
        if key not in raw:
            raise ValueError(f"{path}: missing field {key!r}")
    rot = np.asarray(raw["rotation"], dtype=np.float64)
    if rot.size != 9:
        raise ValueError(f"{path}: field 'rotation' must have 9 entries, got {rot.size}")
    trans = np.asarray(raw["translation"], dtype=np.float64)
    if trans.size != 3:
        raise ValueError(f"{path}: field 'translation' must have 3 entries, got {trans.size}")
    cam = CameraModel(raw["fx"], raw["fy"], raw["cx"], raw["cy"], int(raw["width"]), int(raw["height"]))
    return cam, Extrinsic(rot.reshape(3, 3), trans)


def save_radar_jsonl(path: str, frames: list[list[RadarPoint]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for frame in frames:
            for p in frame:
                f.write(json.dumps({
                    "x": p.x, "y": p.y, "z": p.z,
                    "velocity": p.velocity, "power": p.power,
                    "frame_idx": p.frame_idx,
                }) + "\n")


def load_radar_jsonl(path: str, n_frames: int | None = None) -> list[list[RadarPoint]]:
    """Read one point per line, grouped into frames by frame_idx."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    points: list[RadarPoint] = []
    max_idx = -1
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e})") from e
            for key in ("x", "y", "z", "velocity", "power", "frame_idx"):
                if key not in raw:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            p = RadarPoint(float(raw["x"]), float(raw["y"]), float(raw["z"]),
                           float(raw["velocity"]), float(raw["power"]), int(raw["frame_idx"]))
            points.append(p)
            max_idx = max(max_idx, p.frame_idx)
    count = n_frames if n_frames is not None else max_idx + 1
    frames: list[list[RadarPoint]] = [[] for _ in range(max(count, 0))]
    for p in points:
        frames[p.frame_idx].append(p)
    return frames
