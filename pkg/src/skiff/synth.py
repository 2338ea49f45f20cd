"""Deterministic synthetic waterway scenes.

Each scene is a small image split by a horizon: sky above, a drivable water
gradient below, and a handful of shaded shapes (boat / buoy / pier) sitting
on the waterline. Radar returns are sampled on object surfaces by inverting
the camera projection at a per-object depth, plus low-power water clutter.
All randomness flows through the package RNG, so a seed pins every byte of
the output across platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .radar import (CameraModel, Extrinsic, RadarPoint, load_calib, load_radar_jsonl,
                    save_calib, save_radar_jsonl)
from .rng import Rng

CLASS_NAMES = ("boat", "buoy", "pier")
ADVERSITY_MODES = ("none", "dark", "fog", "droplet")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, normalized to [0, 1] image coordinates."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self, width: int, height: int) -> tuple[float, float, float, float]:
        return ((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)


@dataclass
class SynthConfig:
    image_size: int = 64
    num_classes: int = 3  # object classes; drivable water is class num_classes + 1
    min_objects: int = 1
    max_objects: int = 3
    n_frames: int = 3
    returns_per_area: float = 1.0 / 48.0  # returns per box pixel per frame
    radar_noise_m: float = 0.05
    clutter_rate: float = 2.5  # Poisson mean clutter returns per frame
    adversity: str = "none"
    droplet_count: int = 3

    def __post_init__(self):
        n = self.image_size
        if n < 32 or (n & (n - 1)) != 0:
            raise ValueError(f"image_size must be a power of two >= 32, got {n}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.adversity not in ADVERSITY_MODES:
            raise ValueError(f"adversity must be one of {ADVERSITY_MODES}, got {self.adversity!r}")

    @property
    def drivable_id(self) -> int:
        return self.num_classes + 1


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    radar_frames: list  # list of frames, each a list[RadarPoint]; index 0 = newest
    boxes: list  # list[Box]
    sem_mask: np.ndarray  # (H, W) uint8: 0 sky/background, 1..C objects, C+1 water
    camera: CameraModel
    extrinsic: Extrinsic
    meta: dict = field(default_factory=dict)


def default_camera(size: int) -> CameraModel:
    return CameraModel(fx=float(size), fy=float(size), cx=size / 2.0, cy=size / 2.0,
                       width=size, height=size)


def _pixel_to_radar(u: float, v: float, depth: float, cam: CameraModel) -> tuple[float, float, float]:
    # identity extrinsic: radar frame coincides with the camera frame
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return x, y, depth


# per-class pixel-size priors at a 64 px reference, scaled with the image
_SIZE_PRIORS = {
    1: ((12, 20), (7, 10)),  # boat: wide hull
    2: ((6, 9), (6, 9)),  # buoy: round marker
    3: ((5, 8), (12, 18)),  # pier: tall post
}
_BASE_COLORS = {
    1: np.array([0.58, 0.14, 0.12]),
    2: np.array([0.92, 0.76, 0.12]),
    3: np.array([0.36, 0.24, 0.14]),
}
_POWER_PRIORS = {1: 34.0, 2: 17.0, 3: 27.0}


def generate_scene(seed: int, cfg: SynthConfig) -> Scene:
    """Build one fully-labeled scene; identical (seed, cfg) -> identical bytes."""
    size = cfg.image_size
    scale = size / 64.0
    horizon = size // 2
    cam = default_camera(size)
    ext = Extrinsic.identity()

    layout = Rng(seed, stream=1)
    texture = Rng(seed, stream=2)
    radar_rng = Rng(seed, stream=3)
    clutter_rng = Rng(seed, stream=4)

    image = np.zeros((3, size, size))
    mask = np.zeros((size, size), dtype=np.uint8)

    # sky gradient
    sky_top = np.array([0.54, 0.64, 0.80]) + texture.uniforms(3, -0.04, 0.04)
    sky_bot = np.array([0.76, 0.81, 0.88]) + texture.uniforms(3, -0.04, 0.04)
    for row in range(horizon):
        t = row / max(1, horizon - 1)
        image[:, row, :] = ((1 - t) * sky_top + t * sky_bot)[:, None]

    # water gradient with mild ripple texture; everything below the horizon is drivable
    wat_top = np.array([0.10, 0.22, 0.36]) + texture.uniforms(3, -0.03, 0.03)
    wat_bot = np.array([0.16, 0.36, 0.50]) + texture.uniforms(3, -0.03, 0.03)
    ripple = texture.uniforms((size - horizon) * size, -0.02, 0.02).reshape(size - horizon, size)
    for row in range(horizon, size):
        t = (row - horizon) / max(1, size - horizon - 1)
        image[:, row, :] = ((1 - t) * wat_top + t * wat_bot)[:, None] + ripple[row - horizon]
    mask[horizon:, :] = cfg.drivable_id

    # objects in disjoint horizontal slots so shapes never overlap
    count = layout.randint(cfg.min_objects, cfg.max_objects)
    slot_w = size // max(count, 1)
    order = layout.permutation(count)
    objects = []
    for idx in range(count):
        cls = layout.randint(1, cfg.num_classes)
        (w_lo, w_hi), (h_lo, h_hi) = _SIZE_PRIORS[cls]
        w = max(4, min(int(round(layout.uniform(w_lo, w_hi) * scale)), slot_w - 4))
        h = max(4, int(round(layout.uniform(h_lo, h_hi) * scale)))
        slot_x = order[idx] * slot_w
        x1 = slot_x + 2 + layout.randint(0, max(0, slot_w - w - 4))
        overlap = max(1, int(round(h * layout.uniform(0.25, 0.45))))
        y1 = horizon - overlap
        y2 = min(y1 + h, size - 3)
        h = y2 - y1
        objects.append((cls, x1, y1, w, h))

    boxes: list[Box] = []
    for cls, x1, y1, w, h in objects:
        x2, y2 = x1 + w, y1 + h
        shade = np.linspace(0.8, 1.15, h)[:, None]
        noise = texture.uniforms(h * w, -0.03, 0.03).reshape(h, w)
        patch = _BASE_COLORS[cls][:, None, None] * shade[None] + noise[None]
        if cls == 2:  # buoy: ellipse
            yy, xx = np.mgrid[0:h, 0:w]
            ry, rx = h / 2.0, w / 2.0
            inside = ((yy + 0.5 - ry) / ry) ** 2 + ((xx + 0.5 - rx) / rx) ** 2 <= 1.0
        else:
            inside = np.ones((h, w), dtype=bool)
        region = image[:, y1:y2, x1:x2]
        region[:, inside] = np.clip(patch, 0.0, 1.0)[:, inside]
        mask[y1:y2, x1:x2][inside] = cls
        boxes.append(Box(cls, (x1 + w / 2) / size, (y1 + h / 2) / size, w / size, h / size))

    # radar returns: per object, per frame, count proportional to box area
    frames: list[list[RadarPoint]] = [[] for _ in range(cfg.n_frames)]
    depths = [radar_rng.uniform(8.0, 60.0) for _ in objects]
    velocities = [max(-9.0, min(9.0, radar_rng.normal(0.0, 2.5))) for _ in objects]
    for f in range(cfg.n_frames):
        for (cls, x1, y1, w, h), depth, vel in zip(objects, depths, velocities):
            n_ret = max(1, int(round(w * h * cfg.returns_per_area)))
            for j in range(n_ret):
                if j == 0:
                    # anchor return: exact box centre, no noise, so every object
                    # is guaranteed one in-box return per frame
                    u, v, d = x1 + w / 2.0, y1 + h / 2.0, depth
                    jitter = np.zeros(3)
                else:
                    u = radar_rng.uniform(x1 + 0.1 * w, x1 + 0.9 * w)
                    v = radar_rng.uniform(y1 + 0.1 * h, y1 + 0.9 * h)
                    d = depth + radar_rng.normal(0.0, 0.1)
                    jitter = radar_rng.normals(3, 0.0, cfg.radar_noise_m)
                x, y, z = _pixel_to_radar(u, v, d, cam)
                power = min(48.0, max(6.0, _POWER_PRIORS[cls] + radar_rng.normal(0.0, 1.5)))
                velocity = max(-9.9, min(9.9, vel + radar_rng.normal(0.0, 0.15)))
                frames[f].append(RadarPoint(x + jitter[0], y + jitter[1], z + jitter[2],
                                            velocity, power, f))
        for _ in range(clutter_rng.poisson(cfg.clutter_rate)):
            u = clutter_rng.uniform(0.0, size - 1.0)
            v = clutter_rng.uniform(horizon + 0.5, size - 1.0)
            d = clutter_rng.uniform(5.0, 80.0)
            x, y, z = _pixel_to_radar(u, v, d, cam)
            jitter = clutter_rng.normals(3, 0.0, cfg.radar_noise_m)
            frames[f].append(RadarPoint(x + jitter[0], y + jitter[1], z + jitter[2],
                                        clutter_rng.normal(0.0, 0.4),
                                        clutter_rng.uniform(0.5, 5.5), f))

    scene = Scene(image, frames, boxes, mask, cam, ext,
                  meta={"seed": int(seed), "adversity": "none", "n_frames": cfg.n_frames})
    if cfg.adversity != "none":
        scene = apply_adversity(scene, cfg.adversity, cfg.droplet_count)
    return scene


# ---------------------------------------------------------------------------
# adversity
# ---------------------------------------------------------------------------


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + img.shape[1], dx:dx + img.shape[2]]
    return out / 9.0


def apply_adversity(scene: Scene, mode: str, droplet_count: int = 3) -> Scene:
    """Corrupt the image only; labels, mask and radar stay untouched."""
    if mode not in ADVERSITY_MODES:
        raise ValueError(f"adversity must be one of {ADVERSITY_MODES}, got {mode!r}")
    img = scene.image
    h = img.shape[1]
    if mode == "none":
        out = img.copy()
    elif mode == "dark":
        out = img * 0.1
    elif mode == "fog":
        horizon = h // 2
        alpha = np.full(h, 0.7)
        rows = np.arange(horizon, h)
        # water recedes toward the camera, so fog thins toward the bottom edge
        alpha[horizon:] = 0.7 * (1.0 - 0.75 * (rows - horizon) / max(1, h - 1 - horizon))
        out = (1.0 - alpha[None, :, None]) * img + alpha[None, :, None]
    else:  # droplet
        rng = Rng(scene.meta.get("seed", 0), stream=99)
        out = img.copy()
        blur = _box_blur3(img)
        yy, xx = np.mgrid[0:h, 0:img.shape[2]]
        for _ in range(droplet_count):
            cy = rng.uniform(0.1 * h, 0.9 * h)
            cx = rng.uniform(0.1 * img.shape[2], 0.9 * img.shape[2])
            r = rng.uniform(0.07 * h, 0.14 * h)
            tint = rng.uniforms(3, 0.55, 0.80)[:, None]
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            out[:, disk] = 0.7 * tint + 0.3 * blur[:, disk]
    return replace(scene, image=np.clip(out, 0.0, 1.0),
                   meta={**scene.meta, "adversity": mode})


# ---------------------------------------------------------------------------
# image files (8-bit binary netpbm)
# ---------------------------------------------------------------------------


def write_ppm(path: str, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> binary P6, round-to-nearest 8-bit."""
    _, h, w = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.transpose(1, 2, 0).tobytes())


def _read_netpbm(path: str, magic: bytes) -> tuple[int, int, bytes]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} header")
    fields: list[int] = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise ValueError(f"{path}: malformed header field {raw[start:pos]!r}") from None
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h, raw[pos:]


def read_ppm(path: str) -> np.ndarray:
    w, h, payload = _read_netpbm(path, b"P6")
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: pixel payload is {len(payload)} bytes, expected {w * h * 3}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path: str, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(mask.astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    w, h, payload = _read_netpbm(path, b"P5")
    if len(payload) != w * h:
        raise ValueError(f"{path}: pixel payload is {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

SCENE_FILES = ("image.ppm", "radar.jsonl", "labels.json", "mask.pgm", "calib.json")


def write_dataset(scenes: list[Scene], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, scene in enumerate(scenes):
        d = os.path.join(out_dir, f"{i:05d}")
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, "image.ppm"), scene.image)
        write_pgm(os.path.join(d, "mask.pgm"), scene.sem_mask)
        save_radar_jsonl(os.path.join(d, "radar.jsonl"), scene.radar_frames)
        save_calib(os.path.join(d, "calib.json"), scene.camera, scene.extrinsic)
        payload = {
            "boxes": [{"class_id": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                      for b in scene.boxes],
            "meta": scene.meta,
        }
        with open(os.path.join(d, "labels.json"), "w", encoding="utf-8") as f:
            json.dump(payload, f)


def read_scene(scene_dir: str) -> Scene:
    labels_path = os.path.join(scene_dir, "labels.json")
    if not os.path.exists(labels_path):
        raise FileNotFoundError(labels_path)
    with open(labels_path, "r", encoding="utf-8") as f:
        try:
            labels = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{labels_path}: malformed JSON ({e})") from e
    if "boxes" not in labels:
        raise ValueError(f"{labels_path}: missing field 'boxes'")
    boxes = []
    for i, b in enumerate(labels["boxes"]):
        for key in ("class_id", "cx", "cy", "w", "h"):
            if key not in b:
                raise ValueError(f"{labels_path}: box {i} missing field {key!r}")
        boxes.append(Box(int(b["class_id"]), float(b["cx"]), float(b["cy"]),
                         float(b["w"]), float(b["h"])))
    meta = labels.get("meta", {})
    cam, ext = load_calib(os.path.join(scene_dir, "calib.json"))
    frames = load_radar_jsonl(os.path.join(scene_dir, "radar.jsonl"), meta.get("n_frames"))
    image = read_ppm(os.path.join(scene_dir, "image.ppm"))
    mask = read_pgm(os.path.join(scene_dir, "mask.pgm"))
    return Scene(image, frames, boxes, mask, cam, ext, meta)


def read_dataset(root: str) -> list[Scene]:
    if not os.path.isdir(root):
        raise FileNotFoundError(root)
    ids = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not ids:
        raise ValueError(f"{root}: no scene subdirectories found")
    return [read_scene(os.path.join(root, sid)) for sid in ids]


def generate_dataset(base_seed: int, count: int, cfg: SynthConfig) -> list[Scene]:
    """Scene i gets an independent derived seed; the list is reproducible."""
    scenes = []
    for i in range(count):
        scene_seed = (base_seed ^ (i * 0x9E3779B97F4A7C15)) & 0x7FFFFFFFFFFFFFFF
        scenes.append(generate_scene(scene_seed, cfg))
    return scenes
