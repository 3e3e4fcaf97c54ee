"""Command-line entry points: ``tubeanomaly <command> ...``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetFormatError,
    SynthConfig,
    clip_iterator,
    compute_stats,
    generate_synthetic,
    load_manifest,
    save_manifest,
    split,
)
from .evaluation import (
    ROBUSTNESS_SETTINGS,
    TubeSource,
    evaluate,
    read_roc_csv,
    reports_to_csv,
    roc_to_csv,
)
from .plotting import roc_svg
from .proposals import ProposalConfig, build_weak_dataset, load_weak_samples, retrain_weak, write_weak_dataset
from .training import FlowCache, Model, ModelFormatError, TrainConfig, TrainingSample, load_model, save_model, train

log = logging.getLogger("tubeanomaly")

FORMAT_VERSION = 1


class UsageError(Exception):
    pass


def _atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _staging_dir(target: Path) -> Path:
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=target.name + ".tmp"))
    # mkdtemp is private (0700); final outputs follow the umask like mkdir
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp, 0o777 & ~umask)
    return tmp


def _swap_in_dir(tmp_dir: Path, target: Path) -> None:
    old = None
    if target.exists():
        old = target.with_name(target.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        target.rename(old)
    tmp_dir.rename(target)
    if old is not None:
        shutil.rmtree(old)


def _header(seed) -> str:
    return f"# seed={seed} format_version={FORMAT_VERSION}\n"


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not inside (0, 1)")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def _tube_source(text: str) -> TubeSource:
    try:
        return TubeSource.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _samples(manifest, split_name):
    return [TrainingSample(c, t, l) for c, t, l in clip_iterator(manifest, split_name)]


def _check_dims(model: Model, manifest) -> None:
    for e in manifest.entries:
        if tuple(e.dims) != tuple(model.input_dims):
            raise ValueError(
                f"model input is {tuple(model.input_dims)} but video {e.video_id} is {tuple(e.dims)}"
            )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch,
        epochs=args.epochs,
        train_encoder=not args.frozen_encoder,
        seed=args.seed,
    )


def _loss_csv(history, seed) -> str:
    buf = io.StringIO()
    buf.write(_header(seed))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, loss in enumerate(history, start=1):
        w.writerow([i, repr(float(loss))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> None:
    out = Path(args.out)
    cfg = SynthConfig(
        n_anomalous=args.anomalous,
        n_normal=args.normal,
        frame_dims=(args.size, args.size),
        video_length=(args.length, args.length),
        min_anomaly_length=min(args.min_anomaly_length, args.length),
        seed=args.seed,
    )
    tmp = _staging_dir(out)
    try:
        manifest, _ = generate_synthetic(cfg, tmp, np.random.default_rng(args.seed))
        if args.train_fraction is not None:
            manifest = split(manifest, args.train_fraction, np.random.default_rng(args.seed + 1))
            save_manifest(manifest, tmp / "manifest.json")
        _swap_in_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    counts = {s: len(manifest.by_split(s)) for s in ("train", "test")}
    print(f"wrote {len(manifest.entries)} videos to {out} (train {counts['train']}, test {counts['test']})")


def cmd_stats(args) -> None:
    stats = compute_stats(load_manifest(args.manifest))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "count", "train_count", "total_min", "avg_sec", "min_sec", "max_sec"])
    for name, s in stats.items():
        w.writerow([name, s["count"], s["train_count"], f"{s['total_min']:.2f}", f"{s['avg_sec']:.2f}",
                    f"{s['min_sec']:.2f}", f"{s['max_sec']:.2f}"])
    sys.stdout.write(buf.getvalue())


def cmd_train(args) -> None:
    manifest = load_manifest(args.manifest)
    model = Model.initialize(seed=args.seed)
    _check_dims(model, manifest)
    samples = _samples(manifest, args.split)
    model, history = train(model, samples, args.mode, _train_config(args))
    loss_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    save_model(model, args.out)
    _atomic_write(loss_path, _loss_csv(history, args.seed))
    print(f"trained on {len(samples)} clips in {args.mode} mode; model -> {args.out}")


def _write_reports(args, reports) -> None:
    _atomic_write(Path(args.out), reports_to_csv(reports, args.seed))
    if args.roc_dir:
        roc_dir = Path(args.roc_dir)
        for r in reports:
            name = r.setting.replace(":", "_").replace("+", "_")
            _atomic_write(roc_dir / f"roc_{name}.csv", roc_to_csv(r.roc, args.seed))
    for r in reports:
        print(f"{r.setting}: AUC {r.auc:.4f} ({r.n_pos} pos / {r.n_neg} neg)")


def cmd_eval(args) -> None:
    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    _check_dims(model, manifest)
    samples = _samples(manifest, args.split)
    cache = FlowCache(model.flow_params)
    sources = args.tube_source or [TubeSource("oracle")]
    if args.both_variants:
        sources += [TubeSource(s.kind, s.value, True) for s in sources if s.kind != "fullframe"]
    reports = [evaluate(model, samples, s, seed=args.seed, flow_cache=cache) for s in sources]
    _write_reports(args, reports)


def cmd_robustness(args) -> None:
    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    _check_dims(model, manifest)
    samples = _samples(manifest, args.split)
    cache = FlowCache(model.flow_params)
    reports = [evaluate(model, samples, s, seed=args.seed, flow_cache=cache) for s in ROBUSTNESS_SETTINGS]
    _write_reports(args, reports)


def cmd_propose(args) -> None:
    model = load_model(args.model)
    manifest = load_manifest(args.clips)
    _check_dims(model, manifest)
    config = ProposalConfig(args.n_tubes, args.tau_w, args.sampler, args.seed)
    unlabeled, negatives, refs_u, refs_n = [], [], [], []
    for clip, _, _ in clip_iterator(manifest, args.split, records=[]):
        label = manifest.entry(clip.source_id).label
        (unlabeled if label == 1 else negatives).append(clip)
        (refs_u if label == 1 else refs_n).append((clip.source_id, clip.start_frame))
    samples, proposals = build_weak_dataset(model, unlabeled, negatives, config, FlowCache(model.flow_params))
    out = Path(args.out)
    tmp = _staging_dir(out)
    try:
        # written into tmp, but video paths must resolve from the final directory
        write_weak_dataset(tmp, _rooted(manifest, tmp, out), refs_u + refs_n, proposals, seed=args.seed)
        buf = io.StringIO()
        buf.write(_header(args.seed))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video_id", "start_frame", "score", "weak_label", "x_min", "y_min", "x_max", "y_max"])
        for (vid, start), p in zip(refs_u + refs_n, proposals):
            w.writerow([vid, start, repr(p.score), p.weak_label, *(int(v) for v in p.tube.boxes[0].as_tuple())])
        (tmp / "proposals.csv").write_text(buf.getvalue())
        _swap_in_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    n_pos = sum(s.label for s in samples)
    print(f"proposed tubes for {len(samples)} clips ({n_pos} weak positives) -> {out}")


def _rooted(manifest, staging: Path, final: Path):
    """Manifest copy with video paths relative to ``final``, resolved from a staging dir.

    ``write_weak_dataset`` rewrites paths relative to the directory it writes
    into; rooting the copy there keeps them relative to ``final``.
    """
    from dataclasses import replace

    src_root = Path(manifest.root).resolve()
    final_abs = final.resolve()
    entries = [replace(e, path=os.path.relpath(src_root / e.path, final_abs)) for e in manifest.entries]
    return replace(manifest, entries=entries, root=staging)


def cmd_retrain(args) -> None:
    manifest = load_manifest(args.weak)
    if not all(e.weak for e in manifest.entries):
        raise ValueError(f"{args.weak} is not a weak manifest (entries lack weak=true)")
    samples = load_weak_samples(manifest)
    model, history = retrain_weak(samples, _train_config(args), seed=args.seed)
    loss_path = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    save_model(model, args.out)
    _atomic_write(loss_path, _loss_csv(history, args.seed))
    print(f"retrained from scratch on {len(samples)} weak clips; model -> {args.out}")


def cmd_plot_roc(args) -> None:
    labels = args.labels or [Path(p).stem for p in args.roc_csv]
    if len(labels) != len(args.roc_csv):
        raise UsageError("--labels needs one label per ROC file")
    curves = [(lab, read_roc_csv(Path(p).read_text())) for lab, p in zip(labels, args.roc_csv)]
    _atomic_write(Path(args.out), roc_svg(curves))
    print(f"wrote {len(curves)} curves to {args.out}")


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p) -> None:
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=_positive_int, default=5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--frozen-encoder", action="store_true", help="update only the regression head")
    p.add_argument("--loss-csv", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubeanomaly", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--anomalous", type=int, default=100)
    p.add_argument("--normal", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive_int, default=56)
    p.add_argument("--length", type=_positive_int, default=32)
    p.add_argument("--min-anomaly-length", type=_positive_int, default=32)
    p.add_argument("--train-fraction", type=_unit_interval, default=0.7)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("stats", help="per-class video statistics")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("tube", "fullframe"), default="tube")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("robustness", cmd_robustness)):
        p = sub.add_parser(name, help="AUC reports" if name == "eval" else "localization-error sweep")
        p.add_argument("--model", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="report CSV")
        p.add_argument("--roc-dir", default=None, help="directory for per-setting ROC CSVs")
        p.add_argument("--split", default="test")
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--tube-source", action="append", type=_tube_source,
                           help="oracle, fullframe, scale:<f> or translate:<px>; repeatable")
            p.add_argument("--both-variants", action="store_true",
                           help="also score normal clips through full frames")
        p.set_defaults(func=func)

    p = sub.add_parser("propose", help="weak tube proposals on new videos")
    p.add_argument("--model", required=True)
    p.add_argument("--clips", required=True, help="manifest of the new videos")
    p.add_argument("--out", required=True)
    p.add_argument("--tau-w", type=_unit_interval, default=0.4)
    p.add_argument("--n-tubes", type=_positive_int, default=45)
    p.add_argument("--sampler", choices=("grid", "random"), default="grid")
    p.add_argument("--split", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("retrain", help="train a fresh model on weak proposals")
    p.add_argument("--weak", required=True, help="weak manifest written by propose")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("plot-roc", help="SVG of one or more ROC CSVs")
    p.add_argument("roc_csv", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_roc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, DatasetFormatError, ModelFormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
