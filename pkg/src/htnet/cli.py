"""``htnet`` command line: synthetic data, spotting, extraction, training, LOSO."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import (
    RunConfig,
    RunConfigError,
    dump_run_config,
    load_run_config,
    synth_run_config,
)
from .evaluation import REPORT_FORMAT, FoldError, ProtocolError, confusion_csv, evaluate_loso
from .features import (
    FrameSequence,
    build_composite,
    compute_flow,
    compute_strain,
    landmark_rois,
    load_landmarks,
    read_flow_file,
    spot_apex,
    write_flow_file,
)
from .features.imaging import list_frames, load_gray
from .manifest import ManifestError, SampleManifest, read_manifest, with_apex, write_manifest
from .metrics import CLASS_NAMES
from .model import HTNet
from .synth import SynthOptions, make_synth
from .training import DegenerateSplitError, TrainingDivergedError, fit

log = logging.getLogger("htnet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


def _setup_logging() -> None:
    level = os.environ.get("HTNET_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _config(args) -> RunConfig:
    return load_run_config(args.config).with_seed(args.seed)


def _manifest(args) -> SampleManifest:
    if not args.manifest:
        raise InputError("--manifest is required")
    try:
        return read_manifest(args.manifest)
    except (OSError, ManifestError) as exc:
        raise InputError(str(exc)) from exc


def _load_sequence(manifest: SampleManifest, sample) -> tuple[FrameSequence, list[Path]]:
    frames_dir = manifest.resolve(sample.frames_dir)
    if not frames_dir.is_dir():
        raise InputError(f"frames directory {frames_dir} not found")
    paths = list_frames(frames_dir)
    if sample.offset >= len(paths):
        raise InputError(f"offset {sample.offset} beyond the {len(paths)} frames in {frames_dir}")
    frames = [load_gray(p) for p in paths]
    return FrameSequence(frames, sample.onset, sample.offset, sample.apex), paths


# -- commands --------------------------------------------------------------


def cmd_init_config(args) -> int:
    text = dump_run_config(RunConfig().with_seed(args.seed))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_make_synth(args) -> int:
    if not args.out:
        raise InputError("--out is required")
    seed = 0 if args.seed is None else args.seed
    opts = SynthOptions(subjects=args.subjects, per_class=args.per_class, seed=seed)
    manifest_path = make_synth(args.out, opts)
    (Path(args.out) / "config.json").write_text(dump_run_config(synth_run_config(seed)))
    print(manifest_path)
    return EXIT_OK


def _spot_one(manifest: SampleManifest, sample, cfg: RunConfig) -> int:
    seq, _ = _load_sequence(manifest, sample)
    h, w = seq.frames[0].shape
    rois = cfg.spotting.rects()
    if rois is None:
        landmarks = load_landmarks(manifest.resolve(sample.landmarks_path))
        rois = landmark_rois(
            list(landmarks.points().values()), cfg.spotting.half_size_for(h, w), h, w
        )
    return spot_apex(seq, rois, cfg.spotting.bins)


def cmd_spot(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    src = Path(args.manifest)
    out = Path(args.out) if args.out else src.with_name(src.stem + "_spotted.csv")
    same_dir = out.parent.resolve() == src.parent.resolve()
    todo = [s for s in manifest if s.apex is None]
    if not todo and same_dir:
        out.write_bytes(src.read_bytes())
        return EXIT_OK
    errors = []
    updated = {}
    for sample in todo:
        try:
            updated[sample.sample_id] = _spot_one(manifest, sample, cfg)
        except Exception as exc:  # collected per entry
            errors.append((sample.sample_id, str(exc)))
    entries = [
        with_apex(s, updated[s.sample_id]) if s.sample_id in updated else s for s in manifest
    ]
    result = manifest.with_entries(entries)
    write_manifest(result if same_dir else result.rebased(out.parent), out)
    for sid, msg in errors:
        print(f"spot: {sid}: {msg}", file=sys.stderr)
    log.info("spotted %d/%d entries -> %s", len(updated), len(todo), out)
    return EXIT_INPUT if errors else EXIT_OK


def _extract_one(task) -> tuple[str, dict]:
    manifest, sample, cfg, out_dir = task
    seq, _ = _load_sequence(manifest, sample)
    landmarks = load_landmarks(manifest.resolve(sample.landmarks_path))
    flow = compute_flow(seq.frames[sample.onset], seq.frames[sample.apex], cfg.flow)
    strain = compute_strain(flow)
    fmap = build_composite(flow, strain, landmarks)
    write_flow_file(fmap, out_dir / f"{sample.sample_id}.htfm")
    return sample.sample_id, {
        "mean_abs_u": float(np.abs(flow.u).mean()),
        "mean_abs_v": float(np.abs(flow.v).mean()),
        "max_strain": float(strain.max()),
    }


def _safe_extract(task):
    try:
        return _extract_one(task), None
    except Exception as exc:
        return None, (task[1].sample_id, f"{type(exc).__name__}: {exc}")


def cmd_extract(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    if not args.out:
        raise InputError("--out is required")
    no_apex = [s.sample_id for s in manifest if s.apex is None]
    if no_apex:
        raise InputError(f"entries without apex (run `htnet spot` first): {no_apex[:5]}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(manifest, s, cfg, out_dir) for s in manifest]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_safe_extract, tasks))
    else:
        results = [_safe_extract(t) for t in tasks]
    rows, errors = [], []
    for ok, err in results:
        if ok:
            rows.append({"sample_id": ok[0], **ok[1]})
        else:
            errors.append(err)
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, ["sample_id", "mean_abs_u", "mean_abs_v", "max_strain"], lineterminator="\n"
    )
    writer.writeheader()
    writer.writerows(rows)
    (out_dir / "extraction_log.csv").write_text(buf.getvalue())
    (out_dir / "extraction_config.json").write_text(
        json.dumps({"seed": cfg.seed, "flow": cfg.flow.to_dict(), "failed": errors}, indent=2)
        + "\n"
    )
    for sid, msg in errors:
        print(f"extract: {sid}: {msg}", file=sys.stderr)
    log.info("extracted %d/%d samples -> %s", len(rows), len(tasks), out_dir)
    return EXIT_INPUT if errors else EXIT_OK


def _features(manifest: SampleManifest, features_dir) -> dict[str, np.ndarray]:
    if not features_dir:
        raise InputError("--features is required")
    out = {}
    for s in manifest:
        path = Path(features_dir) / f"{s.sample_id}.htfm"
        if not path.is_file():
            raise InputError(f"missing flow file for sample {s.sample_id}: {path}")
        try:
            out[s.sample_id] = read_flow_file(path).data
        except ValueError as exc:
            raise InputError(f"sample {s.sample_id}: {exc}") from exc
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    if not args.out:
        raise InputError("--out is required")
    feats = _features(manifest, args.features)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [s.sample_id for s in manifest]
    images = np.stack([feats[i] for i in ids])
    labels = np.array([s.label for s in manifest])
    model = HTNet(cfg.model, seed=cfg.seed)
    result = fit(model, images, labels, cfg.train)
    save_checkpoint(model, out_dir / "model.htck")
    (out_dir / "loss_curve.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses))
    )
    (out_dir / "run_config.json").write_text(dump_run_config(cfg))
    log.info("trained %d epochs on %d samples -> %s", len(result.losses), len(ids), out_dir)
    return EXIT_OK


def cmd_eval_loso(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args)
    if not args.out:
        raise InputError("--out is required")
    feats = _features(manifest, args.features)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_loso(manifest, feats, cfg.model, cfg.train, jobs=args.jobs)
    report.extra = {"flow": cfg.flow.to_dict(), "spotting": cfg.spotting.to_dict()}
    data = report.to_dict()
    (out_dir / "report.json").write_text(json.dumps(data, indent=2) + "\n")
    (out_dir / "confusion.csv").write_text(confusion_csv(data))
    pooled = data["pooled"]
    print(f"pooled UF1 {pooled['uf1']:.4f}  UAR {pooled['uar']:.4f}  ({len(data['folds'])} folds)")
    return EXIT_OK


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_report(data: dict) -> str:
    if not isinstance(data, dict) or data.get("format") != REPORT_FORMAT:
        raise InputError("not an htnet LOSO report")
    try:
        scopes = [("pooled", data["pooled"])] + list(data["per_dataset"].items())
        classes = data.get("classes", list(CLASS_NAMES))
        lines = []
        flagged = False
        for scope, summary in scopes:
            cm = np.asarray(summary["confusion"], dtype=np.float64)
            if cm.shape != (len(classes), len(classes)):
                raise InputError(f"{scope}: confusion matrix shape {cm.shape}")
            mark = ""
            if summary.get("empty_classes"):
                mark = " *"
                flagged = True
            lines.append(
                f"{scope}: UF1 {_fmt(summary['uf1'])}{mark}  UAR {_fmt(summary['uar'])}"
                f"  (n={int(cm.sum())})"
            )
            width = max(len(c) for c in classes)
            lines.append(" " * (width + 2) + "  ".join(f"{c[:8]:>8}" for c in classes))
            rows = cm.sum(axis=1, keepdims=True)
            norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
            for name, row in zip(classes, norm):
                lines.append(f"  {name:<{width}}" + "  ".join(f"{v:8.3f}" for v in row))
            lines.append("")
        if flagged:
            lines.append(
                "* F1 undefined for a class with no true and no predicted samples; counted as 0"
            )
        return "\n".join(lines).rstrip() + "\n"
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"report schema mismatch: {exc}") from exc


def cmd_report(args) -> int:
    try:
        data = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {args.report}: {exc}") from exc
    sys.stdout.write(render_report(data))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, features=False, jobs=False):
        p.add_argument("--config", help="run config JSON (see init-config)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", help="output path or directory")
        if manifest:
            p.add_argument("--manifest", help="sample manifest CSV")
        if features:
            p.add_argument("--features", help="directory of <sample_id>.htfm files")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("init-config", help="write the default run config")
    common(p, manifest=False)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("make-synth", help="generate the synthetic corpus")
    common(p, manifest=False)
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--per-class", type=int, default=3)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("spot", help="fill empty apex indices")
    common(p)
    p.set_defaults(func=cmd_spot)

    p = sub.add_parser("extract", help="compute composite flow maps")
    common(p, jobs=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit on the whole manifest")
    common(p, features=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-loso", help="leave-one-subject-out evaluation")
    common(p, features=True, jobs=True)
    p.set_defaults(func=cmd_eval_loso)

    p = sub.add_parser("report", help="print a LOSO report")
    p.add_argument("report", help="report.json from eval-loso")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, RunConfigError, DegenerateSplitError, ProtocolError) as exc:
        print(f"htnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDivergedError as exc:
        print(f"htnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FoldError as exc:
        print(f"htnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, TrainingDivergedError) else EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
