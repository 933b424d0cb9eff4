"""Command line interface.

Subcommands: cov, train-static, train-dynamic, predict, report, synth,
gram. Options come from an optional JSON config file (--config) with
individual flags taking precedence. Exit codes: 0 success, 2 validation
error, 3 numeric failure, 4 I/O or file-format failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import align, pipeline, spdcore, tensorio
from .errors import FormatError, NumericalError, ValidationError


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", s)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _names(text: str) -> tuple:
    return tuple(v for v in text.split(",") if v != "")


def _size(text: str) -> tuple:
    parts = re.split(r"[x,]", text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WxH: {text!r}")
    try:
        return (int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH integers: {text!r}") from exc


def _load_config(args, mode: str | None = None) -> pipeline.RunConfig:
    base = (pipeline.RunConfig.from_file(args.config) if args.config
            else pipeline.RunConfig())
    overrides = {}
    for flag, key in (
            ("manifest", "manifest"), ("out", "out_dir"),
            ("epsilon", "epsilon"), ("channels", "channels"),
            ("resize_to", "resize_to"), ("seed", "seed"),
            ("gamma_grid", "gamma_grid"), ("c_grid", "c_grid"),
            ("folds", "folds"), ("inner_folds", "inner_folds"),
            ("l_target", "l_target"), ("fusion", "fusion_strategy"),
            ("fusion_weights", "fusion_weights"), ("beta_step", "beta_step"),
            ("static_scoring", "static_scoring"), ("peak_frames", "peak_frames"),
            ("ratio_kernel", "use_ratio_kernel"), ("gak_normalize", "gak_normalize"),
            ("alignment", "alignment")):
        if hasattr(args, flag) and getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if mode is not None:
        overrides["mode"] = mode
    return base.merged(overrides)


def _manifest_path(config: pipeline.RunConfig) -> Path:
    if not config.manifest:
        raise ValidationError("no manifest given (use --manifest or the config file)")
    return Path(config.manifest)


def _out_dir(config: pipeline.RunConfig) -> Path:
    if not config.out_dir:
        raise ValidationError("no output directory given (use --out or the config file)")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_cov(args) -> int:
    """One descriptor stack per sample per channel, as SPDT files."""
    config = _load_config(args, mode="static")
    manifest = tensorio.read_manifest(_manifest_path(config))
    out = _out_dir(config)
    channels = pipeline.resolve_channels(manifest, config)
    mask_cache: dict = {}
    count = 0
    names = set()
    for entry in manifest.entries:
        masks_by_id = {m.region_id: m
                       for m in pipeline._load_masks(entry, mask_cache)}
        frames = pipeline._read_frames(entry.tensor_paths, config)
        for ci, ch in enumerate(channels):
            descs = [pipeline._frame_descriptor(t, ch, masks_by_id, config.epsilon)
                     for t in frames]
            stack = np.stack([d.matrix for d in descs])
            name = f"{_safe_name(entry.sample_id)}__{_safe_name(ch)}.spdt"
            if name in names:
                raise ValidationError(f"descriptor filename collision: {name}")
            names.add(name)
            tensor = tensorio.FeatureTensor(values=stack,
                                            source_id=f"{entry.sample_id}:{ch}")
            tensorio.write_tensor(tensor, out / name)
            count += 1
    print(f"wrote {count} descriptor files ({len(manifest.entries)} samples x "
          f"{len(channels)} channels) to {out}")
    return 0


def _run_train(args, mode: str) -> int:
    config = _load_config(args, mode=mode)
    manifest = tensorio.read_manifest(_manifest_path(config))
    out = _out_dir(config)
    t0 = time.perf_counter()
    report, bundle, _units = pipeline.run_training(manifest, config)
    report.elapsed_seconds = time.perf_counter() - t0
    bundle.save(out)
    report_path = Path(args.report) if args.report else out / "report.json"
    report.save(report_path)
    print("fold accuracies: " + " ".join(f"{a:.2f}" for a in report.fold_accuracies))
    print(f"overall accuracy: {report.overall_accuracy:.2f}")
    chosen = report.chosen
    beta = chosen["beta"]
    print(f"chosen: gamma={chosen['gamma']} C={chosen['C']} "
          f"beta={'-' if beta is None else ','.join(f'{b:g}' for b in beta)}")
    print(f"report: {report_path}")
    print(f"bundle: {out}")
    print(f"training time: {report.elapsed_seconds:.2f} s")
    return 0


def cmd_train_static(args) -> int:
    return _run_train(args, "static")


def cmd_train_dynamic(args) -> int:
    return _run_train(args, "dynamic")


def cmd_predict(args) -> int:
    bundle = pipeline.ModelBundle.load(args.bundle)
    manifest = tensorio.read_manifest(args.manifest)
    result = bundle.predict(manifest)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["sample_id", "predicted"] + [f"score_{c}" for c in result["classes"]]
    lines = [",".join(header)]
    for sid, lab, row in zip(result["ids"], result["labels"], result["scores"]):
        lines.append(",".join([sid, lab] + [f"{v:.17g}" for v in row]))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(result['ids'])} predictions to {out_path}")
    return 0


def cmd_report(args) -> int:
    reports = [pipeline.EvalReport.from_file(p) for p in args.eval]
    labels = reports[0].labels
    for r, p in zip(reports, args.eval):
        if r.labels != labels:
            raise ValidationError(f"eval file {p} has a different label set")
    total = np.zeros((len(labels), len(labels)), dtype=np.int64)
    n_predictions = 0
    for r, p in zip(reports, args.eval):
        recomputed = pipeline.confusion_matrix(
            [q["true"] for q in r.predictions],
            [q["predicted"] for q in r.predictions], labels)
        stored = np.asarray(r.confusion, dtype=np.int64)
        if stored.shape != recomputed.shape or not np.array_equal(stored, recomputed):
            raise ValidationError(
                f"malformed eval file {p}: stored confusion does not match predictions")
        trace_acc = recomputed.trace() / max(1, recomputed.sum())
        if abs(trace_acc - r.overall_accuracy) > 1e-9:
            raise ValidationError(
                f"malformed eval file {p}: overall accuracy does not match confusion")
        total += recomputed
        n_predictions += len(r.predictions)
    spdcore.save_matrix_csv(total, args.out)
    per_class = total.sum(axis=1)
    print(f"samples: {n_predictions}")
    print(f"overall accuracy: {total.trace() / max(1, total.sum()):.2f}")
    for k, lab in enumerate(labels):
        n = int(per_class[k])
        ok = int(total[k, k])
        rate = ok / n if n else 0.0
        print(f"  {lab}: {rate:.2f} ({ok}/{n})")
    print(f"confusion matrix: {args.out}")
    return 0


def cmd_synth(args) -> int:
    manifest = tensorio.synth_generate(
        classes=args.classes, samples_per_class=args.samples_per_class,
        m=args.m, w=args.w, h=args.h, frames=args.frames,
        separation=args.separation, seed=args.seed, out_dir=args.out,
        subjects=args.subjects)
    n_files = sum(len(e.tensor_paths) for e in manifest.entries)
    print(f"wrote {len(manifest.entries)} samples ({n_files} tensor files) "
          f"under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_gram(args) -> int:
    mode = "dynamic" if args.mode == "dynamic" else "static"
    config = _load_config(args, mode=mode)
    manifest = tensorio.read_manifest(_manifest_path(config))
    if len(manifest.entries) == 0:
        raise ValidationError("cannot build a Gram matrix from an empty manifest")
    out = _out_dir(config)
    units = pipeline.build_units(manifest, config)
    bank = pipeline.build_bank(units, config)
    needs_gamma = bank.uses_gamma
    if needs_gamma and args.gamma is None:
        raise ValidationError("this mode needs --gamma")
    paths = []
    for ci, ch in enumerate(bank.channels):
        if isinstance(bank, pipeline.PpfBank):
            path = out / f"proximity_c{ci}_{_safe_name(ch)}.csv"
            spdcore.save_matrix_csv(bank.proximity(ch), path)
        else:
            path = out / f"gram_c{ci}_{_safe_name(ch)}.csv"
            K = bank.kernel_for(ch, args.gamma)
            spdcore.save_matrix_csv(K.values, path)
        paths.append(path)
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, train: bool) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epsilon", type=float, help="covariance regularizer")
    p.add_argument("--channels", type=_names,
                   help="comma-separated channel ids (default: all available)")
    p.add_argument("--resize-to", type=_size, dest="resize_to",
                   help="resize feature maps to WxH before descriptors")
    p.add_argument("--seed", type=int, help="run seed recorded in the report")
    if not train:
        return
    p.add_argument("--gamma-grid", type=_floats, dest="gamma_grid",
                   help="comma-separated kernel widths")
    p.add_argument("--c-grid", type=_floats, dest="c_grid",
                   help="comma-separated SVM C values")
    p.add_argument("--folds", type=int, help="outer CV folds")
    p.add_argument("--inner-folds", type=int, dest="inner_folds",
                   help="inner CV folds for the grid search")
    p.add_argument("--fusion", choices=("late_product", "late_weighted_sum",
                                        "kernel_weighted_sum", "feature_concat"),
                   help="multi-channel fusion strategy")
    p.add_argument("--fusion-weights", type=_floats, dest="fusion_weights",
                   help="fixed channel weights (skips the weight search)")
    p.add_argument("--beta-step", type=float, dest="beta_step",
                   help="weight grid resolution")
    p.add_argument("--report", help="where to write the eval report JSON "
                                    "(default: OUT/report.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spdtraj",
        description="Covariance descriptors, SPD trajectories and manifold-aware "
                    "kernel classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cov", help="extract covariance descriptors to SPDT files")
    _add_config_flags(p, train=False)
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("train-static", help="train on per-frame/per-video descriptors")
    _add_config_flags(p, train=True)
    p.add_argument("--static-scoring", choices=pipeline.STATIC_SCORINGS,
                   dest="static_scoring", help="how multi-frame samples are scored")
    p.add_argument("--peak-frames", type=int, dest="peak_frames",
                   help="how many trailing frames form a static sample")
    p.set_defaults(func=cmd_train_static)

    p = sub.add_parser("train-dynamic", help="train on SPD trajectories")
    _add_config_flags(p, train=True)
    p.add_argument("--alignment", choices=pipeline.ALIGNMENTS,
                   help="trajectory kernel: gak or dtw_ppf")
    p.add_argument("--l-target", type=int, dest="l_target",
                   help="trajectory length after resampling")
    p.add_argument("--ratio-kernel", action="store_true", default=None,
                   dest="ratio_kernel",
                   help="use the k/(1+k) local kernel (guaranteed PD)")
    p.add_argument("--gak-normalize", action="store_true", default=None,
                   dest="gak_normalize",
                   help="geometric-mean normalize the GAK Gram")
    p.set_defaults(func=cmd_train_dynamic)

    p = sub.add_parser("predict", help="classify a manifest with a saved bundle")
    p.add_argument("--bundle", required=True, help="bundle directory from training")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="confusion matrix and summary from eval reports")
    p.add_argument("--eval", nargs="+", required=True, help="eval report JSON file(s)")
    p.add_argument("--out", required=True, help="confusion matrix CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples-per-class", type=int, default=10,
                   dest="samples_per_class")
    p.add_argument("--m", type=int, default=8, help="feature maps per tensor")
    p.add_argument("--w", type=int, default=4, help="map width")
    p.add_argument("--h", type=int, default=4, help="map height")
    p.add_argument("--frames", type=int, default=15, help="frames per sample")
    p.add_argument("--separation", type=float, default=3.0,
                   help="between-class distance scale; 0 means identical classes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=10,
                   help="size of the synthetic subject pool")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gram", help="export Gram/proximity matrices as CSV")
    _add_config_flags(p, train=False)
    p.add_argument("--mode", choices=pipeline.MODES, default="static")
    p.add_argument("--alignment", choices=pipeline.ALIGNMENTS,
                   help="trajectory kernel for dynamic mode")
    p.add_argument("--l-target", type=int, dest="l_target",
                   help="trajectory length after resampling")
    p.add_argument("--gamma", type=float, help="kernel width for the export")
    p.add_argument("--static-scoring", choices=pipeline.STATIC_SCORINGS,
                   dest="static_scoring")
    p.add_argument("--peak-frames", type=int, dest="peak_frames")
    p.add_argument("--ratio-kernel", action="store_true", default=None,
                   dest="ratio_kernel")
    p.add_argument("--gak-normalize", action="store_true", default=None,
                   dest="gak_normalize")
    p.set_defaults(func=cmd_gram)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    print(f"elapsed: {time.perf_counter() - t0:.2f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
