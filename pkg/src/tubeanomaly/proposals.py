"""Multi-tube scoring, weak labels and retraining from proposals."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    AnnotationRecord,
    DatasetManifest,
    load_annotations,
    load_video,
    save_annotations,
    save_manifest,
)
from .training import FlowCache, Model, TrainConfig, TrainingSample, train
from .tubes import CLIP_LENGTH, BoundingBox, Tube, VideoClip, static_tube

__all__ = [
    "ProposalConfig",
    "TubeProposal",
    "GRID_SCALES",
    "grid_boxes",
    "sample_tubes",
    "score_tubes",
    "weak_label",
    "propose",
    "build_weak_dataset",
    "retrain_weak",
    "write_weak_dataset",
    "load_weak_samples",
]

GRID_SCALES = (1.0, 0.5, 0.33)
MIN_AREA_FRACTION = 0.04


@dataclass(frozen=True)
class ProposalConfig:
    n_tubes: int = 45
    tau_w: float = 0.4
    sampler: str = "grid"
    seed: int = 0

    def __post_init__(self):
        if self.n_tubes < 1:
            raise ValueError(f"n_tubes must be >= 1, got {self.n_tubes}")
        if not 0.0 < self.tau_w < 1.0:
            raise ValueError(f"tau_w must lie in (0, 1), got {self.tau_w}")
        if self.sampler not in ("grid", "random"):
            raise ValueError(f"sampler must be 'grid' or 'random', got {self.sampler!r}")


@dataclass(frozen=True)
class TubeProposal:
    tube: Tube
    score: float
    weak_label: int


def _int_box(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(float(round(x0)), float(round(y0)), float(round(x1)), float(round(y1)))


def grid_boxes(dims: tuple[int, int]) -> list:
    """Half-overlapping lattice cells at each scale, coarsest first.

    Corners are rounded to whole pixels so proposals survive the integer
    annotation format unchanged.
    """
    h, w = dims
    boxes = []
    for s in GRID_SCALES:
        bw, bh = s * w, s * h
        per_axis = int(round((1.0 - s) / (s / 2.0))) + 1
        xs = np.linspace(0.0, w - bw, per_axis)
        ys = np.linspace(0.0, h - bh, per_axis)
        for y in ys:
            for x in xs:
                boxes.append(_int_box(x, y, x + bw, y + bh))
    return boxes


def _random_box(dims, rng) -> BoundingBox:
    h, w = dims
    lo = np.sqrt(MIN_AREA_FRACTION)
    fw, fh = rng.uniform(lo, 1.0, 2)
    bw, bh = np.ceil(fw * w), np.ceil(fh * h)
    x = np.floor(rng.uniform(0.0, w - bw + 1))
    y = np.floor(rng.uniform(0.0, h - bh + 1))
    return _int_box(x, y, x + bw, y + bh)


def sample_tubes(clip_dims: tuple[int, int], config: ProposalConfig, rng: np.random.Generator | None = None) -> list:
    """``config.n_tubes`` distinct static tubes.

    The grid sampler takes lattice cells coarse to fine; if ``n_tubes``
    exceeds the lattice, the remainder is filled with random boxes.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    boxes = grid_boxes(clip_dims)[: config.n_tubes] if config.sampler == "grid" else []
    seen = {b.as_tuple() for b in boxes}
    while len(boxes) < config.n_tubes:
        b = _random_box(clip_dims, rng)
        if b.as_tuple() not in seen:
            seen.add(b.as_tuple())
            boxes.append(b)
    return [static_tube(b) for b in boxes]


def score_tubes(model: Model, clip: VideoClip, tubes: Sequence[Tube], flow_cache: FlowCache | None = None) -> list:
    flows = flow_cache(clip) if flow_cache is not None else None
    scores = model.score_tubes(clip, tubes, flows)
    return list(zip(tubes, scores.tolist()))


def weak_label(score: float, tau_w: float) -> int:
    return 1 if score >= tau_w else 0


def propose(model: Model, clip: VideoClip, config: ProposalConfig, rng=None, flow_cache=None) -> TubeProposal:
    """Highest-scoring sampled tube of ``clip`` (first one on ties)."""
    tubes = sample_tubes(clip.dims, config, rng)
    scored = score_tubes(model, clip, tubes, flow_cache)
    best = int(np.argmax([s for _, s in scored]))
    tube, s = scored[best]
    return TubeProposal(tube, s, weak_label(s, config.tau_w))


def build_weak_dataset(
    model: Model,
    unlabeled_clips: Sequence[VideoClip],
    negative_clips: Sequence[VideoClip],
    config: ProposalConfig | None = None,
    flow_cache: FlowCache | None = None,
) -> tuple[list, list]:
    """Weakly labeled samples: best tube per clip, label from the threshold.

    Negative clips go through the same tube selection but keep label 0.
    Returns ``(samples, proposals)`` aligned with ``unlabeled + negatives``.
    """
    config = config or ProposalConfig()
    if not unlabeled_clips and not negative_clips:
        raise ValueError("no clips to propose on")
    rng = np.random.default_rng(config.seed)
    samples, proposals = [], []
    for clip in unlabeled_clips:
        p = propose(model, clip, config, rng, flow_cache)
        proposals.append(p)
        samples.append(TrainingSample(clip, p.tube, p.weak_label))
    for clip in negative_clips:
        p = propose(model, clip, config, rng, flow_cache)
        p = replace(p, weak_label=0)
        proposals.append(p)
        samples.append(TrainingSample(clip, p.tube, 0))
    return samples, proposals


def retrain_weak(
    weak_samples: Sequence[TrainingSample],
    train_config: TrainConfig | None = None,
    seed: int = 1,
    template: Model | None = None,
    flow_cache: FlowCache | None = None,
) -> tuple[Model, list]:
    """Train a freshly initialized model (tube mode) on weak samples.

    ``template`` only supplies the architecture; none of its weights are used.
    """
    if not weak_samples:
        raise ValueError("no weak samples")
    train_config = train_config or TrainConfig()
    kwargs = {}
    if template is not None:
        kwargs = dict(
            encoder_config=template.encoder_config,
            regressor_config=template.regressor_config,
            flow_params=template.flow_params,
        )
    model = Model.initialize(seed=seed, **kwargs)
    return train(model, weak_samples, "tube", replace(train_config, seed=seed), flow_cache=flow_cache)


def write_weak_dataset(
    out_dir,
    source: DatasetManifest,
    clip_refs: Sequence[tuple[str, int]],
    proposals: Sequence[TubeProposal],
    seed: int | None = None,
) -> DatasetManifest:
    """Write proposals as an annotation file plus a ``weak=true`` manifest.

    ``clip_refs`` gives ``(video_id, start_frame)`` for each proposal. Every
    frame of a proposed window gets one record whose ``anomaly_flag`` is the
    weak label.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    video_label: dict = {}
    for (vid, start), p in zip(clip_refs, proposals):
        for t, box in enumerate(p.tube.boxes):
            records.append(AnnotationRecord(vid, start + t, _int_box(*box.as_tuple()), anomaly_flag=p.weak_label, category="weak"))
        video_label[vid] = max(video_label.get(vid, 0), p.weak_label)
    src_root = Path(source.root) if source.root is not None else Path(".")
    entries = []
    for e in source.entries:
        if e.video_id not in video_label:
            continue
        rel = os.path.relpath(src_root / e.path, out)
        entries.append(replace(e, path=rel, label=video_label[e.video_id], split="train", weak=True))
    manifest = DatasetManifest(entries, seed=seed if seed is not None else source.seed, root=out)
    save_annotations(records, out / manifest.annotations)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def load_weak_samples(manifest: DatasetManifest, records=None) -> list:
    """Samples from a weak dataset: every fully annotated window with its flag as label."""
    root = Path(manifest.root)
    if records is None:
        records = load_annotations(root / manifest.annotations)
    table = {(r.video_id, r.frame_index): r for r in records}
    samples = []
    for e in manifest.entries:
        video = load_video(e, root)
        for start in range(0, e.frame_count - CLIP_LENGTH + 1, CLIP_LENGTH):
            track = [table.get((e.video_id, t)) for t in range(start, start + CLIP_LENGTH)]
            if any(r is None for r in track):
                continue
            flags = {r.anomaly_flag for r in track}
            if len(flags) != 1:
                raise ValueError(f"{e.video_id} window at {start} mixes weak labels")
            clip = VideoClip(video[start : start + CLIP_LENGTH] / 255.0, e.video_id, start)
            samples.append(TrainingSample(clip, Tube(tuple(r.box for r in track)), flags.pop()))
    return samples
