"""Command-line entry point.

Exit codes: 0 success, 1 a stage or operation failed, 2 usage or manifest error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .analysis import BehaviorReport, correlation_matrix, evaluate_behavior, load_suites
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GeneratorSpec, generate, generate_splits, save_dataset
from .errors import ManifestError, MergeLensError, RecipeError
from .merge import apply_recipe
from .models import ToyArchitecture
from .pipeline import STAGES, Pipeline, resolve_output_dir, validate_manifest
from .probe import ProbeConfig, ProbeReport, load_probe_tasks, run_probe_suite
from .recipe import first_error, load_recipe
from .reports import load_report, write_correlation, write_report

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mergelens")


def _model_id(model, path: Path, override):
    return override or model.metadata.get("model_id") or path.stem


def cmd_run(args):
    manifest = validate_manifest(args.manifest)
    out = resolve_output_dir(manifest, args.out)
    pipeline = Pipeline(manifest, out, seed=args.seed, jobs=args.jobs)
    if args.stage:
        out.mkdir(parents=True, exist_ok=True)
        pipeline.run_stage(args.stage)
    else:
        pipeline.run()
    print(out)


def cmd_validate(args):
    manifest = validate_manifest(args.manifest)
    print(f"ok: {len(manifest.parents)} parents, {len(manifest.recipes)} recipes")


def cmd_merge(args):
    recipe_path = Path(args.recipe)
    recipe = load_recipe(recipe_path)
    root = recipe_path.parent
    parents = [load_checkpoint(root / p) for p in recipe.parents]
    base = load_checkpoint(root / recipe.base) if recipe.base else None
    save_checkpoint(apply_recipe(recipe, parents, base), args.out)


def cmd_gen_data(args):
    try:
        spec = GeneratorSpec.model_validate(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    except ValidationError as exc:
        loc, msg = first_error(exc)
        raise ManifestError(loc, msg) from None
    out = Path(args.out)
    if spec.splits:
        out.mkdir(parents=True, exist_ok=True)
        for name, ds in generate_splits(spec).items():
            save_dataset(ds, out / f"{name}{args.format}")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(generate(spec), out)


def cmd_probe(args):
    path = Path(args.model)
    model = load_checkpoint(path)
    arch = ToyArchitecture.from_checkpoint(model)
    config = ProbeConfig(args.epochs, args.lr, args.l2)
    report = run_probe_suite(model, arch, load_probe_tasks(args.tasks), config, _model_id(model, path, args.model_id))
    write_report(Path(args.out).with_suffix(""), report)


def cmd_behave(args):
    path = Path(args.model)
    model = load_checkpoint(path)
    arch = ToyArchitecture.from_checkpoint(model)
    report = evaluate_behavior(model, arch, load_suites(args.suites), _model_id(model, path, args.model_id))
    write_report(Path(args.out).with_suffix(""), report)


def cmd_correlate(args):
    reports = [load_report(p) for p in args.reports]
    probes = [r for r in reports if isinstance(r, ProbeReport)]
    behaviors = [r for r in reports if isinstance(r, BehaviorReport)]
    if not probes or not behaviors:
        raise ManifestError("reports", "correlate needs at least one probe report and one behavior report")
    methods = ["pearson", "spearman"] if args.method == "both" else [args.method]
    for method in methods:
        write_correlation(args.out, correlation_matrix(probes, behaviors, method))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergelens", description="Merge checkpoints, score merged models, and correlate probes with behavior.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="run the full pipeline from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (overrides the manifest)")
    p.add_argument("--seed", type=int, help="global seed (overrides the manifest)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stage", choices=STAGES, help="run a single stage against an existing run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a manifest without running it")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("merge", help="merge checkpoints according to a recipe file")
    p.add_argument("recipe")
    p.add_argument("out")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    p.add_argument("spec")
    p.add_argument("out", help="dataset file (.json/.csv), or a directory when the spec has splits")
    p.add_argument("--format", choices=[".json", ".csv"], default=".json", help="split file format")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("probe", help="probe one checkpoint on a task manifest")
    p.add_argument("model")
    p.add_argument("tasks")
    p.add_argument("out", help="report path; .json and .csv are written")
    p.add_argument("--model-id")
    p.add_argument("--epochs", type=int, default=ProbeConfig.epochs)
    p.add_argument("--lr", type=float, default=ProbeConfig.learning_rate)
    p.add_argument("--l2", type=float, default=ProbeConfig.l2_penalty)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("behave", help="score one checkpoint on behavior suites")
    p.add_argument("model")
    p.add_argument("suites")
    p.add_argument("out", help="report path; .json and .csv are written")
    p.add_argument("--model-id")
    p.set_defaults(func=cmd_behave)

    p = sub.add_parser("correlate", help="correlate probe and behavior reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=["pearson", "spearman", "both"], default="both")
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ManifestError, RecipeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MergeLensError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
