"""Synthetic surveillance videos with ground-truth tubes, plus dataset file I/O.

On-disk layout written by :func:`generate_synthetic`::

    out/
      manifest.json
      annotations.txt
      videos/<video_id>/frame_00000.ppm ...

Frames are binary P6 rasters (``P6 W H 255`` text header, then RGB bytes).
Each annotation line is::

    video_id frame_index x_min y_min x_max y_max lost occluded anomaly_flag category
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .tubes import CLIP_LENGTH, BoundingBox, Tube, VideoClip

__all__ = [
    "MANIFEST_VERSION",
    "CATEGORIES",
    "AnnotationRecord",
    "ManifestEntry",
    "DatasetManifest",
    "SynthConfig",
    "generate_synthetic",
    "split",
    "save_annotations",
    "load_annotations",
    "save_manifest",
    "load_manifest",
    "compute_stats",
    "read_ppm",
    "write_ppm",
    "load_video",
    "clip_iterator",
    "DatasetFormatError",
]

MANIFEST_VERSION = 1
CATEGORIES = ("Arrest", "Assault", "Burglary", "Robbery", "Stealing", "Vandalism")


class DatasetFormatError(ValueError):
    """A dataset file does not follow its documented format."""


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    frame_index: int
    box: BoundingBox
    lost: bool = False
    occluded: bool = False
    anomaly_flag: int = 1
    category: str = ""

    def to_line(self) -> str:
        b = self.box
        return " ".join(
            [
                self.video_id,
                str(self.frame_index),
                *(str(int(v)) for v in (b.x_min, b.y_min, b.x_max, b.y_max)),
                str(int(self.lost)),
                str(int(self.occluded)),
                str(self.anomaly_flag),
                self.category or "-",
            ]
        )


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: str
    frame_count: int
    fps: float
    dims: tuple
    label: int
    category: str = ""
    split: str = "train"
    weak: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class DatasetManifest:
    entries: list
    format_version: int = MANIFEST_VERSION
    seed: int | None = None
    annotations: str = "annotations.txt"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("manifest video ids are not unique")

    def by_split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def entry(self, video_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise KeyError(video_id)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "annotations": self.annotations,
            "entries": [e.to_dict() for e in self.entries],
        }


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the moving-sprite video generator.

    Normal videos hold slowly drifting textured sprites over a noisy textured
    background. Anomalous videos add one sprite that moves fast and changes
    direction often while staying inside a small square region. Its bounding
    box, grown by ``margin`` on every side, is the annotation for each frame
    the sprite is visible, so ground-truth tubes follow the sprite.

    ``anomaly_region`` pins the region of every anomalous video to
    ``(x, y, side)`` (margin included) instead of drawing it at random; all
    annotated boxes then lie inside it.
    """

    n_anomalous: int = 100
    n_normal: int = 200
    frame_dims: tuple = (56, 56)
    video_length: tuple = (32, 32)
    fps: float = 8.0
    n_sprites: tuple = (2, 3)
    sprite_size: tuple = (4, 7)
    normal_speed: tuple = (0.3, 1.2)
    anomaly_speed: tuple = (3.0, 4.5)
    direction_change_rate: float = 0.6
    region_size: tuple = (14, 20)
    margin: int = 2
    min_anomaly_length: int = 32
    noise_std: float = 0.02
    seed: int = 0
    anomaly_region: tuple | None = None

    def __post_init__(self):
        h, w = self.frame_dims
        lo, hi = self.video_length
        if lo < CLIP_LENGTH or hi < lo:
            raise ValueError(f"video_length must be a range with minimum >= {CLIP_LENGTH}")
        if not CLIP_LENGTH <= self.min_anomaly_length <= lo:
            raise ValueError("min_anomaly_length must lie between 16 and the shortest video")
        if self.region_size[1] + 2 * self.margin >= min(h, w):
            raise ValueError("anomaly region must be strictly smaller than the frame")
        if self.anomaly_region is not None:
            x, y, side = self.anomaly_region
            inner = side - 2 * self.margin
            if x < 0 or y < 0 or x + side > w or y + side > h or inner < self.sprite_size[0] + 2:
                raise ValueError(f"anomaly_region {self.anomaly_region} does not fit frame {self.frame_dims}")
        if self.n_anomalous < 0 or self.n_normal < 0:
            raise ValueError("video counts must be non-negative")


# --------------------------------------------------------------------------
# rasters


def write_ppm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w = frame.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(frame.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    header = data[:nl].split()
    if len(header) != 4 or header[0] != b"P6" or header[3] != b"255":
        raise DatasetFormatError(f"{path}: not a P6 raster with maxval 255")
    w, h = int(header[1]), int(header[2])
    body = data[nl + 1 :]
    if len(body) != w * h * 3:
        raise DatasetFormatError(f"{path}: expected {w * h * 3} bytes of pixels, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


# --------------------------------------------------------------------------
# generator


def _texture(rng, shape, sigma, lo, hi):
    t = ndimage.gaussian_filter(rng.random(shape), sigma=(sigma, sigma, 0))
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return lo + (hi - lo) * t


def _make_sprite(rng, size):
    base = rng.uniform(0.0, 1.0, 3)
    tex = rng.uniform(-0.25, 0.25, (size, size, 1))
    return np.clip(base + tex, 0.0, 1.0)


def _paste(frame, sprite, x, y):
    h, w = frame.shape[:2]
    s = sprite.shape[0]
    xi, yi = int(round(x)), int(round(y))
    x0, y0 = max(xi, 0), max(yi, 0)
    x1, y1 = min(xi + s, w), min(yi + s, h)
    if x1 > x0 and y1 > y0:
        frame[y0:y1, x0:x1] = sprite[y0 - yi : y1 - yi, x0 - xi : x1 - xi]


def _bounce(pos, vel, lo, hi):
    pos = pos + vel
    for k in range(2):
        if pos[k] < lo[k]:
            pos[k] = 2 * lo[k] - pos[k]
            vel[k] = -vel[k]
        elif pos[k] > hi[k]:
            pos[k] = 2 * hi[k] - pos[k]
            vel[k] = -vel[k]
        pos[k] = min(max(pos[k], lo[k]), hi[k])
    return pos, vel


def _render_video(cfg: SynthConfig, rng, length: int, anomalous: bool):
    h, w = cfg.frame_dims
    background = _texture(rng, (h, w, 3), 3.0, 0.25, 0.65)
    sprites = []
    for _ in range(int(rng.integers(cfg.n_sprites[0], cfg.n_sprites[1] + 1))):
        size = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
        speed = rng.uniform(*cfg.normal_speed)
        angle = rng.uniform(0, 2 * np.pi)
        sprites.append(
            {
                "img": _make_sprite(rng, size),
                "pos": np.array([rng.uniform(0, w - size), rng.uniform(0, h - size)]),
                "vel": speed * np.array([np.cos(angle), np.sin(angle)]),
                "hi": (w - size, h - size),
            }
        )

    interval = None
    track = {}
    if anomalous:
        alen = int(rng.integers(cfg.min_anomaly_length, length + 1))
        start = int(rng.integers(0, length - alen + 1))
        interval = (start, start + alen)
        side = int(rng.integers(cfg.region_size[0], cfg.region_size[1] + 1))
        m = cfg.margin
        rx = int(rng.integers(m, w - side - m + 1))
        ry = int(rng.integers(m, h - side - m + 1))
        if cfg.anomaly_region is not None:
            rx, ry, side = cfg.anomaly_region[0] + m, cfg.anomaly_region[1] + m, cfg.anomaly_region[2] - 2 * m
        size = int(rng.integers(cfg.sprite_size[0], min(cfg.sprite_size[1], side - 2) + 1))
        erratic = {
            "img": _make_sprite(rng, size),
            "pos": np.array([rx + rng.uniform(0, side - size), ry + rng.uniform(0, side - size)]),
            "lo": (rx, ry),
            "hi": (rx + side - size, ry + side - size),
        }

    frames = np.empty((length, h, w, 3), dtype=np.uint8)
    for t in range(length):
        frame = background.copy()
        for s in sprites:
            _paste(frame, s["img"], *s["pos"])
            s["pos"], s["vel"] = _bounce(s["pos"], s["vel"], (0, 0), s["hi"])
        if interval is not None and interval[0] <= t < interval[1]:
            _paste(frame, erratic["img"], *erratic["pos"])
            xi, yi = (int(round(v)) for v in erratic["pos"])
            m, size = cfg.margin, erratic["img"].shape[0]
            track[t] = (max(xi - m, 0), max(yi - m, 0), min(xi + size + m, w), min(yi + size + m, h))
            if t == interval[0] or rng.random() < cfg.direction_change_rate:
                angle = rng.uniform(0, 2 * np.pi)
                erratic["vel"] = rng.uniform(*cfg.anomaly_speed) * np.array([np.cos(angle), np.sin(angle)])
            erratic["pos"], erratic["vel"] = _bounce(erratic["pos"], erratic["vel"], erratic["lo"], erratic["hi"])
        frame = frame + rng.normal(0.0, cfg.noise_std, frame.shape)
        frames[t] = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    return frames, interval, track


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def generate_synthetic(config: SynthConfig, out_dir, rng: np.random.Generator | None = None):
    """Render videos, annotations and a manifest under ``out_dir``.

    Returns ``(manifest, records)``. Splits are all ``train`` until
    :func:`split` is applied.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    out = Path(out_dir)
    try:
        (out / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    h, w = config.frame_dims
    labels = [1] * config.n_anomalous + [0] * config.n_normal
    entries, records = [], []
    for idx, label in enumerate(labels):
        prefix = "anom" if label else "norm"
        video_id = f"{prefix}_{idx:04d}"
        length = int(rng.integers(config.video_length[0], config.video_length[1] + 1))
        frames, _, track = _render_video(config, rng, length, bool(label))
        vdir = out / "videos" / video_id
        vdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(frames):
            write_ppm(vdir / f"frame_{t:05d}.ppm", frame)
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))] if label else "Normal"
        entries.append(
            ManifestEntry(video_id, f"videos/{video_id}", length, config.fps, (h, w), label, category)
        )
        for t in sorted(track):
            box = BoundingBox(*(float(v) for v in track[t]))
            records.append(AnnotationRecord(video_id, t, box, category=category))

    manifest = DatasetManifest(entries, seed=config.seed, root=out)
    save_annotations(records, out / manifest.annotations)
    save_manifest(manifest, out / "manifest.json")
    return manifest, records


# --------------------------------------------------------------------------
# splits and statistics


def split(manifest: DatasetManifest, train_fraction: float, rng: np.random.Generator) -> DatasetManifest:
    """Stratified train/test assignment; each class keeps ``round(fraction * n)`` for training."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    assignment = {}
    for label in sorted({e.label for e in manifest.entries}):
        ids = [e.video_id for e in manifest.entries if e.label == label]
        n_train = int(round(train_fraction * len(ids)))
        if n_train == 0 or n_train == len(ids):
            raise ValueError(
                f"class {label} with {len(ids)} videos cannot be split at fraction {train_fraction}"
            )
        order = rng.permutation(len(ids))
        for rank, i in enumerate(order):
            assignment[ids[i]] = "train" if rank < n_train else "test"
    entries = [replace(e, split=assignment[e.video_id]) for e in manifest.entries]
    return DatasetManifest(entries, manifest.format_version, manifest.seed, manifest.annotations, manifest.root)


def compute_stats(manifest: DatasetManifest) -> dict:
    """Per-class video counts and lengths (minutes total, seconds otherwise)."""
    if not manifest.entries:
        raise ValueError("empty manifest")
    stats = {}
    for label, name in ((1, "anomalous"), (0, "normal")):
        entries = [e for e in manifest.entries if e.label == label]
        if not entries:
            continue
        secs = np.array([e.frame_count / e.fps for e in entries])
        stats[name] = {
            "count": len(entries),
            "train_count": sum(e.split == "train" for e in entries),
            "total_min": float(secs.sum() / 60.0),
            "avg_sec": float(secs.mean()),
            "min_sec": float(secs.min()),
            "max_sec": float(secs.max()),
        }
    return stats


# --------------------------------------------------------------------------
# file formats


def save_annotations(records, path) -> None:
    lines = [r.to_line() for r in records]
    path = Path(path)
    _atomic_write_text(path, "".join(line + "\n" for line in lines))


def _parse_int(token: str, lineno: int, name: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise DatasetFormatError(f"line {lineno}: field {name!r} is not an integer: {token!r}") from None


def load_annotations(path) -> list:
    names = ("video_id", "frame_index", "x_min", "y_min", "x_max", "y_max", "lost", "occluded", "anomaly_flag", "category")
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != len(names):
                raise DatasetFormatError(f"line {lineno}: expected {len(names)} fields, got {len(tok)}")
            vals = {n: _parse_int(tok[i], lineno, n) for i, n in enumerate(names) if 1 <= i <= 8}
            if vals["x_min"] >= vals["x_max"]:
                raise DatasetFormatError(f"line {lineno}: field 'x_min' must be < x_max")
            if vals["y_min"] >= vals["y_max"]:
                raise DatasetFormatError(f"line {lineno}: field 'y_min' must be < y_max")
            for flag in ("lost", "occluded", "anomaly_flag"):
                if vals[flag] not in (0, 1):
                    raise DatasetFormatError(f"line {lineno}: field {flag!r} must be 0 or 1")
            key = (tok[0], vals["frame_index"])
            if key in seen:
                raise DatasetFormatError(
                    f"line {lineno}: second box for video {tok[0]} frame {vals['frame_index']} "
                    "(one box per frame)"
                )
            seen.add(key)
            box = BoundingBox(*(float(vals[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
            records.append(
                AnnotationRecord(
                    tok[0],
                    vals["frame_index"],
                    box,
                    bool(vals["lost"]),
                    bool(vals["occluded"]),
                    vals["anomaly_flag"],
                    "" if tok[9] == "-" else tok[9],
                )
            )
    return records


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    _atomic_write_text(path, json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{path}: unsupported manifest format version")
    try:
        entries = [
            ManifestEntry(
                str(e["video_id"]),
                str(e["path"]),
                int(e["frame_count"]),
                float(e["fps"]),
                tuple(int(v) for v in e["dims"]),
                int(e["label"]),
                str(e.get("category", "")),
                str(e["split"]),
                bool(e.get("weak", False)),
            )
            for e in doc["entries"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: malformed manifest entry ({exc})") from exc
    for e in entries:
        if e.split not in ("train", "test"):
            raise DatasetFormatError(f"{path}: entry {e.video_id} has split {e.split!r}")
    return DatasetManifest(
        entries, doc["format_version"], doc.get("seed"), doc.get("annotations", "annotations.txt"), path.parent
    )


# --------------------------------------------------------------------------
# iteration


def load_video(entry: ManifestEntry, root) -> np.ndarray:
    """All frames of a video as ``F x H x W x 3`` uint8."""
    vdir = Path(root) / entry.path
    frames = []
    for t in range(entry.frame_count):
        p = vdir / f"frame_{t:05d}.ppm"
        if not p.exists():
            raise FileNotFoundError(f"missing frame file {p}")
        frames.append(read_ppm(p))
    video = np.stack(frames)
    if tuple(video.shape[1:3]) != tuple(entry.dims):
        raise DatasetFormatError(f"{entry.video_id}: frames are {video.shape[1:3]}, manifest says {entry.dims}")
    return video


def clip_iterator(
    manifest: DatasetManifest,
    split_name: str | None,
    records=None,
    root=None,
    stride: int = CLIP_LENGTH,
) -> Iterator[tuple]:
    """Yield ``(VideoClip, Tube | None, label)`` for 16-frame windows.

    A window of an anomalous video gets label 1 and the annotated tube only
    when all 16 of its frames carry a box; every other window is label 0
    without a tube.
    """
    root = manifest.root if root is None else Path(root)
    if records is None:
        records = load_annotations(root / manifest.annotations)
    boxes = {(r.video_id, r.frame_index): r.box for r in records if r.anomaly_flag == 1}
    entries = manifest.entries if split_name is None else manifest.by_split(split_name)
    for e in entries:
        video = load_video(e, root)
        for start in range(0, e.frame_count - CLIP_LENGTH + 1, stride):
            clip = VideoClip(video[start : start + CLIP_LENGTH] / 255.0, e.video_id, start)
            tube, label = None, 0
            if e.label == 1:
                track = [boxes.get((e.video_id, t)) for t in range(start, start + CLIP_LENGTH)]
                if all(b is not None for b in track):
                    tube, label = Tube(tuple(track)), 1
                    tube.validate(clip.dims)
            yield clip, tube, label
