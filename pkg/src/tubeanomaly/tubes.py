"""Bounding boxes, box tracks and the crop+resize tube extractor.

Coordinates are continuous pixels with the origin at the top-left corner; a
frame of width ``W`` spans ``[0, W]``. Pixel ``i`` has its center at index
``i`` when sampling, so the full-frame box ``(0, 0, W, H)`` resampled at the
frame size reproduces the frame exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLIP_LENGTH = 16

__all__ = [
    "CLIP_LENGTH",
    "BoundingBox",
    "Tube",
    "VideoClip",
    "crop_resize",
    "extract_tube",
    "extract_flow_tube",
    "full_frame_tube",
    "static_tube",
    "scale_box",
    "translate_box",
    "scale_tube",
    "translate_tube",
]


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}: need x_min < x_max and y_min < y_max")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, frame_dims: tuple[int, int]) -> bool:
        h, w = frame_dims
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= w and self.y_max <= h

    def clamp(self, frame_dims: tuple[int, int]) -> "BoundingBox":
        """Clip to ``[0, W] x [0, H]``; raises if nothing is left."""
        h, w = frame_dims
        return BoundingBox(
            min(max(self.x_min, 0.0), w),
            min(max(self.y_min, 0.0), h),
            min(max(self.x_max, 0.0), w),
            min(max(self.y_max, 0.0), h),
        )


@dataclass(frozen=True)
class Tube:
    """One box per frame of a 16-frame clip."""

    boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if len(self.boxes) != CLIP_LENGTH:
            raise ValueError(f"a tube holds exactly {CLIP_LENGTH} boxes, got {len(self.boxes)}")

    def as_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Tube":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(BoundingBox(*map(float, row)) for row in arr))

    def validate(self, frame_dims: tuple[int, int]) -> None:
        for i, b in enumerate(self.boxes):
            if not b.within(frame_dims):
                raise ValueError(f"tube box {i} {b.as_tuple()} falls outside frame {frame_dims}")


@dataclass(frozen=True, eq=False)
class VideoClip:
    """Sixteen RGB frames, ``16 x H x W x 3`` with values in ``[0, 1]``."""

    frames: np.ndarray
    source_id: str = ""
    start_frame: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[0] != CLIP_LENGTH or frames.shape[-1] != 3:
            raise ValueError(f"clip frames must be {CLIP_LENGTH} x H x W x 3, got {frames.shape}")
        object.__setattr__(self, "frames", frames)

    @property
    def dims(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def full_frame_tube(dims: tuple[int, int]) -> Tube:
    h, w = dims
    if h <= 0 or w <= 0:
        raise ValueError(f"frame dims must be positive, got {dims}")
    box = BoundingBox(0.0, 0.0, float(w), float(h))
    return Tube((box,) * CLIP_LENGTH)


def static_tube(box: BoundingBox) -> Tube:
    return Tube((box,) * CLIP_LENGTH)


def _sample_positions(lo: float, hi: float, n: int) -> np.ndarray:
    # align-corners: the first and last samples sit on the outermost pixel centers
    span = max(hi - lo - 1.0, 0.0)
    if n == 1:
        return np.array([lo + 0.5 * span])
    return lo + np.arange(n) * (span / (n - 1))


def _bilinear_weights(pos: np.ndarray, size: int):
    pos = np.clip(pos, 0.0, size - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, pos - i0


def _resample(image: np.ndarray, box: BoundingBox, out_size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    oh, ow = out_size
    y0, y1, fy = _bilinear_weights(_sample_positions(box.y_min, box.y_max, oh), h)
    x0, x1, fx = _bilinear_weights(_sample_positions(box.x_min, box.x_max, ow), w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1.0 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1.0 - fx) + image[y1][:, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _checked_box(box: BoundingBox, dims: tuple[int, int]) -> BoundingBox:
    try:
        clamped = box.clamp(dims)
    except ValueError:
        raise ValueError(f"box {box.as_tuple()} has zero area inside frame {dims}") from None
    return clamped


def crop_resize(frame: np.ndarray, box: BoundingBox, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the ``box`` region of ``frame`` onto an ``out_size`` grid.

    ``frame`` is ``H x W`` or ``H x W x C``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    squeeze = frame.ndim == 2
    img = frame[..., None] if squeeze else frame
    box = _checked_box(box, img.shape[:2])
    out = _resample(img, box, tuple(int(v) for v in out_size))
    return out[..., 0] if squeeze else out


def _extract(volume: np.ndarray, tube: Tube, out_size: tuple[int, int]) -> np.ndarray:
    if volume.shape[0] != len(tube.boxes):
        raise ValueError(f"tube has {len(tube.boxes)} boxes but volume has {volume.shape[0]} frames")
    dims = volume.shape[1:3]
    out_size = tuple(int(v) for v in out_size)
    return np.stack(
        [_resample(frame, _checked_box(box, dims), out_size) for frame, box in zip(volume, tube.boxes)]
    )


def extract_tube(clip: VideoClip, tube: Tube, out_size: tuple[int, int] | None = None) -> VideoClip:
    """Crop and resize every frame of ``clip`` to its box in ``tube``."""
    out_size = clip.dims if out_size is None else out_size
    frames = _extract(clip.frames, tube, out_size)
    return VideoClip(frames, clip.source_id, clip.start_frame)


def _zoom(n: int, extent: float) -> float:
    # output pixels per input pixel on the align-corners sampling grid
    span = extent - 1.0
    return (n - 1) / span if n > 1 and span > 0 else n / extent


def extract_flow_tube(flows: np.ndarray, tube: Tube, out_size: tuple[int, int]) -> np.ndarray:
    """Resample ``16 x H x W x 2`` flow fields along a tube.

    Displacements are rescaled by the per-frame zoom so they stay in output
    pixels.
    """
    out = _extract(flows, tube, out_size)
    dims = flows.shape[1:3]
    boxes = [_checked_box(b, dims) for b in tube.boxes]
    sx = np.array([_zoom(out_size[1], b.width) for b in boxes])
    sy = np.array([_zoom(out_size[0], b.height) for b in boxes])
    out[..., 0] *= sx[:, None, None]
    out[..., 1] *= sy[:, None, None]
    return out


def scale_box(box: BoundingBox, factor: float, frame_dims: tuple[int, int]) -> BoundingBox:
    """Scale each side by ``factor`` about the box center, then clamp to the frame."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        # exact identity: avoid center/half-width round-off
        return _checked_box(box, frame_dims)
    cx, cy = box.center
    hw, hh = 0.5 * box.width * factor, 0.5 * box.height * factor
    raw = BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)
    return _checked_box(raw, frame_dims)


def translate_box(box: BoundingBox, dx: float, dy: float, frame_dims: tuple[int, int]) -> BoundingBox:
    """Shift by ``(-dx, -dy)`` (towards the top-left) and clip to the frame."""
    xs = (box.x_min - dx, box.x_max - dx)
    ys = (box.y_min - dy, box.y_max - dy)
    h, w = frame_dims
    if xs[1] <= 0 or ys[1] <= 0 or xs[0] >= w or ys[0] >= h:
        raise ValueError(f"box {box.as_tuple()} shifted by ({-dx}, {-dy}) leaves frame {frame_dims}")
    return _checked_box(BoundingBox(xs[0], ys[0], xs[1], ys[1]), frame_dims)


def scale_tube(tube: Tube, factor: float, frame_dims: tuple[int, int]) -> Tube:
    return Tube(tuple(scale_box(b, factor, frame_dims) for b in tube.boxes))


def translate_tube(tube: Tube, dx: float, dy: float, frame_dims: tuple[int, int]) -> Tube:
    return Tube(tuple(translate_box(b, dx, dy, frame_dims) for b in tube.boxes))
