"""Command line entry point: ``mscan <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (bad or
incomplete study), 3 pipeline error (missing checkpoints, training failure).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MScanError, StudyError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PIPELINE = 0, 1, 2, 3
HELP_WIDTH = 88


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


# ---------------------------------------------------------------- helpers

def _run_config(args):
    from .trainer import RunConfig

    if args.config is None:
        return RunConfig()
    try:
        return RunConfig.from_file(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None


def _seed_override(run, seed):
    if seed is not None:
        run.base["seed"] = seed
        for section in run.stages.values():
            section.pop("seed", None)
    return run


def _load(path):
    from .studyio import load_study

    return load_study(path)


def _models(args, names=None):
    from .pipeline import ModelBundle

    return ModelBundle.load(args.models, names)


def _writer(fh=None):
    return csv.writer(fh or sys.stdout, lineterminator="\n")


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    from .synth import SynthParams, generate

    if args.n < 1:
        raise UsageError("--n must be at least 1")
    params = SynthParams(n_studies=args.n, seed=args.seed, noise=args.noise, sagittal_size=args.size,
                         axial_size=args.size)
    dirs = generate(params, args.out)
    print(f"wrote {len(dirs)} studies to {args.out}")


def cmd_validate(args):
    from .studyio import discover_studies

    root = Path(args.data)
    paths = [root] if (root / "manifest.json").is_file() else discover_studies(root)
    if not paths:
        raise StudyError(f"no studies found under {root}")
    w = _writer()
    w.writerow(["study_id", "sagittal_slices", "axial_slices", "labelled"])
    for p in paths:
        s = _load(p)
        w.writerow([s.study_id, len(s.sagittal_slices), len(s.axial_slices), int(s.labels is not None)])


def cmd_project(args):
    from .geometry import project_to_3d

    study = _load(args.data)
    series = study.sagittal_slices if args.series == "sagittal" else study.axial_slices
    by_index = {r.index: r for r in series}
    if args.slice not in by_index:
        raise StudyError(f"{study.study_id}: no {args.series} slice with index {args.slice}")
    x, y, z = project_to_3d(by_index[args.slice].geometry, tuple(args.point))
    print(f"{x:.6f},{y:.6f},{z:.6f}")


def _keypoints(args, study):
    """Per-level (selected slice, keypoint) from trained models or the truth sidecar."""
    if args.models:
        from .pipeline import PipelineConfig, locate_levels

        _, selected, keypoints = locate_levels(study, _models(args, ["unet", "scorer"]), PipelineConfig())
        return selected, keypoints
    from .synth import truth_for

    t = truth_for(study)
    return t["best_slices"], t["keypoints"]


def cmd_match(args):
    from .geometry import match_levels
    from .studyio import LEVELS

    study = _load(args.data)
    selected, keypoints = _keypoints(args, study)
    table = match_levels(study, keypoints, selected, k=args.k)
    w = _writer()
    w.writerow(["level", "sagittal_slice", "row", "col"] + [f"axial_{i + 1}" for i in range(args.k)])
    for level, si, (r, c), row in zip(LEVELS, selected, keypoints, table):
        w.writerow([level, si, f"{r:.3f}", f"{c:.3f}", *row.tolist()])


def cmd_select(args):
    from .sliceselect import score_slices, select_slices
    from .studyio import LEVELS

    study = _load(args.data)
    P = score_slices(_models(args, ["scorer"]).scorer, study)
    chosen = select_slices(P)
    w = _writer()
    w.writerow(["slice", *LEVELS])
    for rec, row in zip(study.sagittal_slices, P):
        w.writerow([rec.index, *(f"{v:.6f}" for v in row)])
    w.writerow(["selected", *chosen])


def cmd_preprocess(args):
    from .pipeline import extract_features

    run = _run_config(args)
    study = _load(args.data)
    f = extract_features(study, _models(args, ["unet", "scorer", "canal"]), run.pipeline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{study.study_id}_crops.npz"
    np.savez(path, sagittal=f.sagittal_crops, axial=f.axial_crops, selected=np.asarray(f.selected),
             keypoints=np.asarray(f.keypoints), table=f.table, centers=f.centers, slice_scores=f.P)
    print(f"wrote {path}")


def cmd_train(args):
    from .trainer import run_stage

    run = _seed_override(_run_config(args), args.seed)
    path = run_stage(args.stage, args.data, args.out, run, epochs=args.epochs, lr=args.lr)
    print(f"stage {args.stage} done; metrics in {path}")


def cmd_eval(args):
    import torch

    from .trainer import run_eval

    run = _seed_override(_run_config(args), args.seed)
    torch.manual_seed(run.stage_config(3).seed)
    report = run_eval(args.data, args.out, run)
    sys.stdout.write(report.to_csv())


def cmd_predict(args):
    from .pipeline import predict_study
    from .studyio import LEVELS

    run = _run_config(args)
    study = _load(args.data)
    if len(study.axial_slices) < run.pipeline.k:
        from .errors import EmptySeries

        raise EmptySeries(f"{study.study_id}: needs at least {run.pipeline.k} axial slices, "
                          f"has {len(study.axial_slices)}")
    probs = predict_study(study, _models(args), run.pipeline)
    w = _writer()
    w.writerow(["study_id", "level", "p_normal_mild", "p_moderate", "p_severe", "grade"])
    for level, p in zip(LEVELS, probs):
        w.writerow([study.study_id, level, *(f"{v:.6f}" for v in p), int(p.argmax())])


def cmd_plot(args):
    from .plots import plot_roc, plot_training

    run_dir = Path(args.out)
    written = plot_training(run_dir)
    if (run_dir / "eval_predictions.csv").is_file():
        if not args.data:
            raise UsageError("--data is needed to plot ROC curves (labels come from the study manifests)")
        written.append(plot_roc(run_dir, args.data))
    if not written:
        raise MScanError(f"nothing to plot in {run_dir}: no metrics logs or predictions")
    for p in written:
        print(f"wrote {p}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mscan", description="Multi-view lumbar canal stenosis grading pipeline.",
                formatter_class=_formatter)
    p.add_argument("--version", action="version", version=f"mscan {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_, fn):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)
        sp.set_defaults(func=fn)
        return sp

    def data(sp, what="study directory or manifest"):
        sp.add_argument("--data", required=True, metavar="PATH", help=what)

    def models(sp, required=True):
        sp.add_argument("--models", required=required, metavar="DIR",
                        help="directory holding trained checkpoints")

    def config(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON run configuration")

    sp = add("synth", "Generate synthetic studies with ground-truth sidecars.", cmd_synth)
    sp.add_argument("--n", type=int, default=50, help="number of studies (default 50)")
    sp.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    sp.add_argument("--out", required=True, metavar="DIR", help="output root")
    sp.add_argument("--noise", type=float, default=0.03, help="noise level relative to CSF intensity (default 0.03)")
    sp.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")

    sp = add("validate", "Check manifests and pixel files; list the studies found.", cmd_validate)
    data(sp, "study directory, manifest, or root holding study directories")

    sp = add("project", "Map a pixel (row, col) on one slice to patient coordinates.", cmd_project)
    data(sp)
    sp.add_argument("--series", choices=("sagittal", "axial"), default="sagittal", help="series (default sagittal)")
    sp.add_argument("--slice", type=int, required=True, help="slice index within the series")
    sp.add_argument("--point", type=float, nargs=2, required=True, metavar=("ROW", "COL"), help="pixel position")

    sp = add("match", "Assign axial slices to each level from sagittal keypoints.", cmd_match)
    data(sp)
    models(sp, required=False)
    sp.add_argument("--k", type=int, default=3, help="axial slices per level (default 3)")

    sp = add("select", "Score sagittal slices and pick one per level.", cmd_select)
    data(sp)
    models(sp)

    sp = add("preprocess", "Write the encoder input crops for one study.", cmd_preprocess)
    data(sp)
    models(sp)
    config(sp)
    sp.add_argument("--out", required=True, metavar="DIR", help="output directory for the .npz file")

    sp = add("train", "Train one stage on the training split.", cmd_train)
    sp.add_argument("--stage", type=int, choices=(1, 2, 3), required=True, help="stage to train")
    data(sp, "root holding study directories")
    sp.add_argument("--out", required=True, metavar="DIR", help="run directory (checkpoints, logs, split)")
    config(sp)
    sp.add_argument("--seed", type=int, help="override the configured seed")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.add_argument("--lr", type=float, help="override the configured learning rate")

    sp = add("eval", "Evaluate a trained run on its held-out split.", cmd_eval)
    data(sp, "root holding study directories")
    sp.add_argument("--out", required=True, metavar="DIR", help="run directory from training")
    config(sp)
    sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = add("predict", "Print per-level grade probabilities for one study.", cmd_predict)
    data(sp)
    models(sp)
    config(sp)

    sp = add("plot", "Render training curves and ROC curves to PNG files.", cmd_plot)
    sp.add_argument("--out", required=True, metavar="DIR", help="run directory; images are written here")
    sp.add_argument("--data", metavar="PATH", help="study root, needed for ROC labels")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"mscan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StudyError as exc:
        print(f"mscan {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MScanError as exc:
        print(f"mscan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
