"""Command-line entry point: ``lvo analyze|prior|visualize|evaluate|sweep --config <path>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from lvo.pipeline import (
    PipelineConfig,
    PipelineError,
    SweepPlan,
    parse_features,
    run_sweep,
    stage_analyze,
    stage_evaluate,
    stage_prior,
    stage_visualize,
)

EXIT_OK, EXIT_ERROR, EXIT_WARNINGS = 0, 1, 2
log = logging.getLogger("lvo")


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvo", description="Latent visualization by optimization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("analyze", "time-step activity profiles and peaks"),
                            ("prior", "steered prior samples per feature and seed"),
                            ("visualize", "optimize latents at every activity peak"),
                            ("evaluate", "HTML report over all stage outputs"),
                            ("sweep", "one-parameter hyperparameter sweep")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="stage config (YAML)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--features", help="comma-separated feature ids, or first:N")
        p.add_argument("--seed", type=_seeds, help="comma-separated prior/optimization seeds")
        p.add_argument("--workers", type=int, help="parallel work units")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--parameter", help="parameter to sweep (overrides the config)")
    t = sub.add_parser("train-toy", help="retrain the toy model bundle and its SAE")
    t.add_argument("--out", required=True, help="checkpoint directory to write")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if args.features:
        cfg.features = parse_features(args.features)
    if args.seed:
        cfg.seeds = args.seed
    if args.workers:
        cfg.workers = args.workers
    return cfg


def _train_toy(args) -> int:
    from lvo.toy import ToyRecipe, train_toy_bundle

    train_toy_bundle(args.out, ToyRecipe(seed=args.seed), log=log.info)
    print(args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train-toy":
            return _train_toy(args)
        cfg = _load(args)
        if args.command == "analyze":
            stage_analyze(cfg)
            print(cfg.out_dir / "profiles" / "manifest.json")
        elif args.command == "prior":
            stage_prior(cfg)
            print(cfg.out_dir / "priors" / "manifest.json")
        elif args.command == "visualize":
            stage_visualize(cfg)
            print(cfg.out_dir / "visualizations" / "manifest.json")
        elif args.command == "evaluate":
            report, warnings = stage_evaluate(cfg)
            for w in warnings:
                log.warning(w)
            print(report)
            return EXIT_WARNINGS if warnings else EXIT_OK
        elif args.command == "sweep":
            if args.parameter:
                cfg.sweep.parameter = args.parameter
            manifest = run_sweep(SweepPlan.from_config(cfg))
            print(json.dumps({"parameter": manifest["parameter"], "grid": manifest["grid"]}))
    except (PipelineError, FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        print(f"lvo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
