"""Command-line interface.

Subcommands cover the whole experiment cycle: synthetic data generation,
single training runs from a config file, evaluation, the alpha sweep, the
data-efficiency study, auxiliary-label export, and plotting. Every command
refuses to overwrite existing outputs unless --force is given, and is
idempotent under --force.

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
or existing files), 2 runtime failure. Errors print one machine-parsable
``error: <message>`` line on standard error. The environment variable
AUXSTEP_SEED supplies the seed when a command or config does not.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import evaluate, plotting, synthgen, trainer
from .data_io import (Dataset, FormatError, load_manifest, mldc_export,
                      read_tensor, write_tensor)
from .model import AUX_TASKS
from .optim import DEFAULT_BASE_LR

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class CommandError(ValueError):
    """Validation failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's default exits with code 2
        raise CommandError(message)


def _fallback_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("AUXSTEP_SEED", "")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise CommandError(f"AUXSTEP_SEED is not an integer: {env!r}") from exc
    return 0


def _fresh_dir(path: Path, marker: str, force: bool) -> None:
    """Refuse to reuse a populated output directory unless forced."""
    if (path / marker).exists():
        if not force:
            raise CommandError(f"{path} already contains output ({marker}); use --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _fresh_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CommandError(f"{path} exists; use --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.preset == "benchmark":
        if args.invalid_frac is not None:
            raise CommandError("--invalid-frac conflicts with --preset benchmark")
        base = synthgen.benchmark_spec() if args.classes is None \
            else synthgen.benchmark_spec(args.classes)
        spec = dataclasses.replace(base, height=args.height, width=args.width)
    else:
        frac = 0.10 if args.invalid_frac is None else args.invalid_frac
        spec = synthgen.SceneSpec(height=args.height, width=args.width,
                                  num_classes=12 if args.classes is None else args.classes,
                                  invalid_min=min(0.02, frac), invalid_max=frac)
    if args.scenes < 2:
        raise CommandError(f"--scenes must be at least 2 to split, got {args.scenes}")
    n_train = round(args.train_fraction * args.scenes)
    if not 0 < n_train < args.scenes:
        raise CommandError(f"--train-fraction {args.train_fraction} leaves an empty "
                           f"split for {args.scenes} scenes")
    _fresh_dir(out, "manifest_all.json", args.force)
    paths = synthgen.generate_dataset(spec, args.scenes, _fallback_seed(args.seed),
                                      out, name=args.name,
                                      train_fraction=args.train_fraction)
    for split, path in sorted(paths.items()):
        print(f"{split}: {path}")
    return 0


# ---------------------------------------------------------------------------
# train

_AXIS_KEYS = ("alphas", "fractions", "seeds", "tasks")


def load_run_spec(path: Path) -> tuple[trainer.TrainConfig, Path]:
    """Single-run config file: TrainConfig fields plus run_dir."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise CommandError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CommandError(f"{path}: expected a JSON object")
    present_axes = [k for k in _AXIS_KEYS if k in doc]
    if present_axes:
        raise CommandError(f"{path}: sweep axes {present_axes} are not valid for a single run; "
                           "use the sweep-alpha or data-efficiency command")
    run_dir = doc.pop("run_dir", None)
    if not run_dir:
        raise CommandError(f"{path}: missing required key 'run_dir'")
    if "seed" not in doc:
        doc["seed"] = _fallback_seed(None)
    known = {f.name for f in dataclasses.fields(trainer.TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise CommandError(f"{path}: unknown config keys {unknown}")
    try:
        config = trainer.TrainConfig.from_json(doc)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"{path}: {exc}") from exc
    base = path.parent
    return config, (base / run_dir if not Path(run_dir).is_absolute() else Path(run_dir))


def cmd_train(args) -> int:
    config, run_dir = load_run_spec(Path(args.config))
    if args.resume:
        result = trainer.resume_run(run_dir)
    else:
        if (run_dir / "config.json").exists():
            if not args.force:
                raise CommandError(f"{run_dir} already holds a run; use --force or --resume")
            shutil.rmtree(run_dir)
        result = trainer.train(config, run_dir)
    print(f"run: {result.run_dir}")
    print(f"steps: {result.steps_completed}")
    print(f"checkpoint: {result.final_checkpoint}")
    if result.report is not None:
        print(f"test absrel: {result.report.absrel!r}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _resolve_checkpoint(run: Path) -> Path:
    if run.is_dir():
        ckpt = trainer._latest_checkpoint(run)
        if ckpt is None:
            raise CommandError(f"{run}: no checkpoint found")
        return ckpt
    if not run.exists():
        raise CommandError(f"checkpoint not found: {run}")
    return run


def cmd_eval(args) -> int:
    ckpt = _resolve_checkpoint(Path(args.run))
    out = Path(args.out)
    _fresh_dir(out, "report.json", args.force)
    model, meta = trainer.model_from_checkpoint(ckpt)
    manifest = load_manifest(Path(args.test_manifest))
    dataset = Dataset(manifest)
    report = evaluate.evaluate_model(model, dataset,
                                     seed=meta["config"].get("seed"),
                                     with_extras=args.extras)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    if args.dump_error_maps:
        map_dir = out / "error_maps"
        map_dir.mkdir(exist_ok=True)
        for i in range(len(dataset)):
            sample = dataset.load(i)
            pred = model.predict_depth(sample.image[None].astype(np.float64))[0]
            emap = evaluate.error_map(pred, sample.depth)
            valid = np.isfinite(emap)
            write_tensor(map_dir / f"{sample.id}.errmap.dten",
                         np.where(valid, emap, 0.0).astype(np.float32))
            write_tensor(map_dir / f"{sample.id}.validmask.dten",
                         valid.astype(np.uint16))
    print(f"absrel: {report.absrel!r}")
    print(f"report: {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# shared experiment plumbing

def _experiment_parent(sub: _Parser) -> None:
    sub.add_argument("--depth-manifest", required=True)
    sub.add_argument("--aux-manifest", action="append", default=None,
                     help="repeatable; defaults to the depth manifest")
    sub.add_argument("--test-manifest", required=True)
    sub.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    sub.add_argument("--steps", type=int, default=3000)
    sub.add_argument("--base-lr", type=float, default=DEFAULT_BASE_LR)
    sub.add_argument("--batch-depth", type=int, default=4)
    sub.add_argument("--batch-aux", type=int, default=4)
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--out", required=True)
    sub.add_argument("--force", action="store_true")


def _base_config(args, mode: str, **overrides) -> trainer.TrainConfig:
    aux = tuple(args.aux_manifest) if args.aux_manifest else (args.depth_manifest,)
    fields = dict(mode=mode, depth_manifest=args.depth_manifest,
                  test_manifest=args.test_manifest,
                  total_steps=args.steps, base_lr=args.base_lr,
                  batch_size_depth=args.batch_depth, batch_size_aux=args.batch_aux)
    if mode in ("joint", "beta_ablation"):
        fields["aux_manifests"] = aux
    fields.update(overrides)
    return trainer.TrainConfig(**fields)


def _aggregate(config: trainer.TrainConfig, seeds, out_dir: Path, jobs: int) -> dict:
    return trainer.run_seeds(config, seeds, out_dir, jobs=jobs)


def _write_rows_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# sweep-alpha

def cmd_sweep_alpha(args) -> int:
    alphas = sorted(set(args.alphas))
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise CommandError(f"alphas must lie in [0, 1], got {args.alphas}")
    if args.task not in AUX_TASKS:
        raise CommandError(f"unknown task '{args.task}' (one of {AUX_TASKS})")
    out = Path(args.out)
    _fresh_dir(out, "results.csv", args.force)

    base_agg = _aggregate(_base_config(args, "baseline"), args.seeds,
                          out / "baseline", args.jobs)
    rows = [["baseline", "none", base_agg["mean_absrel"], base_agg["stderr_absrel"],
             base_agg["n_seeds"]]]
    points = []
    for alpha in alphas:
        cfg = _base_config(args, "joint", alpha=alpha, aux_task=args.task)
        agg = _aggregate(cfg, args.seeds, out / f"alpha_{alpha:g}", args.jobs)
        rows.append([alpha, args.task, agg["mean_absrel"], agg["stderr_absrel"],
                     agg["n_seeds"]])
        points.append((alpha, agg["mean_absrel"], agg["stderr_absrel"]))

    _write_rows_csv(out / "results.csv",
                    ["alpha", "task", "mean_absrel", "stderr_absrel", "n_seeds"], rows)
    with open(out / "results.json", "w", encoding="utf-8") as fh:
        json.dump({"baseline": base_agg,
                   "alphas": [{"alpha": a, "mean_absrel": m, "stderr_absrel": s}
                              for a, m, s in points]}, fh, indent=1, sort_keys=True)
        fh.write("\n")

    bm, bs = base_agg["mean_absrel"], base_agg["stderr_absrel"]
    series = [
        plotting.Series(f"joint ({args.task})", [p[0] for p in points],
                        [p[1] for p in points], [p[2] for p in points]),
        plotting.Series("baseline", [alphas[0], alphas[-1]], [bm, bm]),
        plotting.Series("baseline +/- stderr", [alphas[0], alphas[-1]],
                        [bm + bs, bm + bs], dash=True, markers=False),
        plotting.Series("", [alphas[0], alphas[-1]], [bm - bs, bm - bs],
                        dash=True, markers=False),
    ]
    plotting.line_plot(out / "sweep_alpha.svg", series,
                       title="test error vs task-focusing weight",
                       xlabel="alpha", ylabel="AbsRel")
    print(f"results: {out / 'results.csv'}")
    return 0


# ---------------------------------------------------------------------------
# data-efficiency

def cmd_data_efficiency(args) -> int:
    fractions = sorted(set(args.fractions))
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise CommandError(f"fractions must lie in (0, 1], got {args.fractions}")
    if args.task not in AUX_TASKS:
        raise CommandError(f"unknown task '{args.task}' (one of {AUX_TASKS})")
    if not 0.0 <= args.alpha <= 1.0:
        raise CommandError(f"alpha must lie in [0, 1], got {args.alpha}")
    out = Path(args.out)
    _fresh_dir(out, "results.csv", args.force)

    rows = []
    curves = {"baseline": [], "joint": []}
    for fraction in fractions:
        tag = f"frac_{fraction:g}"
        base_cfg = _base_config(args, "baseline", depth_fraction=fraction)
        base_agg = _aggregate(base_cfg, args.seeds, out / tag / "baseline", args.jobs)
        joint_cfg = _base_config(args, "joint", depth_fraction=fraction,
                                 alpha=args.alpha, aux_task=args.task)
        joint_agg = _aggregate(joint_cfg, args.seeds, out / tag / "joint", args.jobs)
        for mode, agg in (("baseline", base_agg), ("joint", joint_agg)):
            rows.append([fraction, mode, agg["mean_absrel"], agg["stderr_absrel"],
                         agg["n_seeds"]])
            curves[mode].append((fraction, agg["mean_absrel"], agg["stderr_absrel"]))

    _write_rows_csv(out / "results.csv",
                    ["fraction", "mode", "mean_absrel", "stderr_absrel", "n_seeds"], rows)
    with open(out / "results.json", "w", encoding="utf-8") as fh:
        json.dump({"fractions": fractions, "alpha": args.alpha, "task": args.task,
                   "rows": [{"fraction": r[0], "mode": r[1], "mean_absrel": r[2],
                             "stderr_absrel": r[3]} for r in rows]},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    series = [plotting.Series(mode, [p[0] for p in pts], [p[1] for p in pts],
                              [p[2] for p in pts])
              for mode, pts in curves.items()]
    plotting.line_plot(out / "data_efficiency.svg", series,
                       title="test error vs labeled-depth fraction",
                       xlabel="depth-data fraction", ylabel="AbsRel")
    print(f"results: {out / 'results.csv'}")
    return 0


# ---------------------------------------------------------------------------
# mldc-export

def cmd_mldc_export(args) -> int:
    manifest = load_manifest(Path(args.seg_manifest))
    out = Path(args.out)
    _fresh_dir(out, "mldc_manifest.json", args.force)
    path = mldc_export(manifest, out)
    print(f"manifest: {path}")
    return 0


# ---------------------------------------------------------------------------
# plot

def cmd_plot(args) -> int:
    if args.diff:
        base_dir, ours_dir = map(Path, args.diff)
        if not args.id:
            raise CommandError("--diff requires --id to pick the sample")
        out = Path(args.out)
        _fresh_file(out, args.force)
        maps = []
        for d in (base_dir, ours_dir):
            emap = read_tensor(d / f"{args.id}.errmap.dten").astype(np.float64)
            valid = read_tensor(d / f"{args.id}.validmask.dten").astype(bool)
            emap[~valid] = np.nan
            maps.append(emap)
        diff = evaluate.error_diff_map(maps[0], maps[1])
        evaluate.write_ppm(out, evaluate.diff_raster(diff))
        print(f"raster: {out}")
        return 0

    if not args.report:
        raise CommandError("nothing to plot: give --report files or --diff directories")
    out = Path(args.out)
    _fresh_file(out, args.force)
    series = []
    for path in args.report:
        report = evaluate.load_report(Path(path))
        label = f"{report.dataset}/{report.split}"
        if report.seed is not None:
            label += f" seed {report.seed}"
        series.append(plotting.Series(label, list(range(1, report.n_images + 1)),
                                      [v for _, v in report.per_image]))
    plotting.line_plot(out, series, title="per-image test error",
                       xlabel="image index", ylabel="AbsRel")
    print(f"plot: {out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="auxstep",
                     description="Depth training with alternating auxiliary-task steps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", parents=[])
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=None,
                   help="class count (default 12, or the preset's own default)")
    p.add_argument("--preset", choices=("default", "benchmark"), default="default",
                   help="benchmark: sparse-depth evaluation world (overrides --invalid-frac)")
    p.add_argument("--invalid-frac", type=float, default=None,
                   help="target invalid-pixel fraction per scene (default 0.10)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--name", default="synth")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training config")
    p.add_argument("--config", required=True, help="JSON file: TrainConfig fields + run_dir")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    p.add_argument("--run", required=True, help="run directory or checkpoint file")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extras", action="store_true", help="also report rmse/delta metrics")
    p.add_argument("--dump-error-maps", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="sweep the task-focusing weight")
    _experiment_parent(p)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.5, 0.9, 1.0])
    p.add_argument("--task", default="mldc")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("data-efficiency", help="baseline vs joint across depth fractions")
    _experiment_parent(p)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.05, 0.2, 1.0])
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--task", default="mldc")
    p.set_defaults(func=cmd_data_efficiency)

    p = sub.add_parser("mldc-export", help="export presence vectors and dominant classes")
    p.add_argument("--seg-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_mldc_export)

    p = sub.add_parser("plot", help="plot eval reports or an error-map diff raster")
    p.add_argument("--report", action="append", default=[])
    p.add_argument("--diff", nargs=2, metavar=("BASE_DIR", "OURS_DIR"))
    p.add_argument("--id", default=None, help="sample id for --diff")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CommandError, FormatError, FileNotFoundError, FileExistsError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
