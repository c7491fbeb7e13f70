#!/usr/bin/env python3
"""Command line entry point for few-shot class-incremental experiments.

Run from the repository root, e.g. ``python -m tools.fscil_experiments
--config configs/desk_scale.toml run``. Every subcommand reads the same run
configuration, writes its results atomically into the output directory next
to a manifest, and prints the rendered table to stdout.

Exit codes: 0 on success, 1 on a runtime or verification failure, 2 when the
configuration (or a command-line override) is invalid.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from checkpoints import CHECKPOINT_SUFFIX, CheckpointError, load_checkpoint, save_checkpoint
from data_sources import (
    DatasetError,
    LabeledDataset,
    export_embeddings_csv,
    export_perturbations_csv,
    load_embeddings_csv,
)
from gradcheck_suite import run_suite
from manifests import MANIFEST_SUFFIX, atomic_write_text, runtime_section, write_manifest
from metrics import FORMATS, LAYOUTS, MetricsError, ResultRow, emit_grid, emit_table, result_rows, summarize
from protocol import (
    STRATEGIES,
    ProtocolError,
    ablation_study,
    collect_perturbations,
    compare_strategies,
    run_sessions,
    shot_study,
    sweep_hyperparams,
)
from run_config import ConfigError, RunConfig, apply_overrides, build_dataset, build_sessions, load_run_config

logger = logging.getLogger("fscil_experiments")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
LOG_LEVEL_ENV = "FSCIL_LOG_LEVEL"
DATASET_META = "dataset.meta.toml"


def _configure_logging(level_name: str) -> None:
    level = logging.getLevelName(level_name.upper())
    if not isinstance(level, int):
        raise ConfigError(f"log level: unknown level {level_name!r}")
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    return apply_overrides(
        cfg,
        seed=args.seed,
        strategy=args.strategy,
        gamma=args.gamma,
        alpha=args.alpha,
        out=args.out,
        fmt=args.format,
    )


def _output_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.output.dir) / f"{name}{cfg.output.extension}"


def _write_results(
    args: argparse.Namespace,
    cfg: RunConfig,
    name: str,
    rendered: str,
    *,
    dataset_metadata: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write the results file, its manifest and the dataset sidecar; echo the table to stdout."""

    target = atomic_write_text(_output_path(cfg, name), rendered)
    sections: Dict[str, Dict[str, Any]] = {
        "command": {"name": args.command, "config": args.config, "results": target.name, **(extra or {})}
    }
    sections.update(cfg.manifest_sections())
    sections["runtime"] = runtime_section()
    write_manifest(target.with_name(name + MANIFEST_SUFFIX), sections)
    if dataset_metadata is not None:
        write_manifest(target.with_name(DATASET_META), {"dataset": dataset_metadata})
    print(rendered, end="")
    logger.info("wrote %s", target)
    return target


def _emit_rows(cfg: RunConfig, rows: Sequence[ResultRow], layout: Optional[str]) -> str:
    return emit_table(rows, cfg.output.format, layout or cfg.output.layout)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def handle_run(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset = build_dataset(cfg)
    sessions = build_sessions(cfg, dataset)
    run = run_sessions(cfg.train, sessions)
    rows = [ResultRow(cfg.train.strategy, cfg.train.seed, summarize(run.reports))]
    _write_results(args, cfg, "results", _emit_rows(cfg, rows, args.layout), dataset_metadata=dataset.metadata)
    save_checkpoint(run.final_state, Path(cfg.output.dir) / f"checkpoint{CHECKPOINT_SUFFIX}")
    return EXIT_OK


def handle_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    audits = run_suite(cfg.study.gradcheck_configs, cfg.study.gradcheck_seed, corrupt=args.corrupt_gradient)
    for audit in audits:
        print(audit.line())
    failed = [audit for audit in audits if not audit.passed()]
    for audit in failed:
        print(f"error: gradient check failed for {audit.loss}: {audit.worst.describe()} ({audit.point})", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def _export_source(args: argparse.Namespace, cfg: RunConfig) -> tuple[LabeledDataset, Dict[str, Any]]:
    if args.dataset in ("train", "test"):
        dataset = build_dataset(cfg)
        part = dataset.train if args.dataset == "train" else dataset.test
        return part, {**dataset.metadata, "split": args.dataset}
    return load_embeddings_csv(args.dataset), {"source": "embeddings", "path": str(args.dataset)}


def handle_export(args: argparse.Namespace, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    data, provenance = _export_source(args, cfg)
    provenance["checkpoint"] = str(args.checkpoint)
    target = args.output or str(Path(cfg.output.dir) / "embeddings.csv")
    written = export_embeddings_csv(state.extractor, data, target, provenance=provenance)
    print(f"exported {len(data)} embeddings of dimension {state.extractor.feature_dim} to {written}")
    return EXIT_OK


def handle_perturb(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset = build_dataset(cfg)
    sessions = build_sessions(cfg, dataset)
    perturbations = collect_perturbations(cfg.train, sessions)
    provenance = {
        **dataset.metadata,
        "train_seed": cfg.train.seed,
        "alpha": cfg.train.hyperparams.alpha,
        "spl_head_init": cfg.train.spl_head_init,
    }
    target = args.output or str(Path(cfg.output.dir) / "perturbed.csv")
    written = export_perturbations_csv(perturbations, target, provenance=provenance)
    count = sum(len(item.labels) for item in perturbations)
    print(f"exported {count} few-shot features and their perturbed copies from {len(perturbations)} sessions to {written}")
    return EXIT_OK


def _spl_wins(rows: Sequence[ResultRow]) -> Optional[tuple[int, int]]:
    by_seed: Dict[int, Dict[str, float]] = {}
    for row in rows:
        if row.summary.harmonic is not None:
            by_seed.setdefault(row.seed, {})[row.method] = row.summary.harmonic
    if not by_seed or not all("spl" in scores for scores in by_seed.values()):
        return None
    wins = sum(1 for scores in by_seed.values() if scores["spl"] >= max(scores.values()))
    return wins, len(by_seed)


def handle_compare(args: argparse.Namespace, cfg: RunConfig) -> int:
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    triples = []
    for seed in seeds:
        seeded = cfg.with_seed(seed) if args.seeds else cfg
        sessions = build_sessions(seeded)
        triples.extend(run.as_triple() for run in compare_strategies(seeded.train, sessions, seeded.study.strategies))
    baseline = "prototype" if "prototype" in cfg.study.strategies else None
    rows = result_rows(triples, baseline_method=baseline)
    _write_results(args, cfg, "compare", _emit_rows(cfg, rows, args.layout or "metrics"), extra={"seeds": list(seeds)})
    wins = _spl_wins(rows)
    if wins is not None and len(seeds) > 1:
        print(f"spl has the top harmonic accuracy in {wins[0]} of {wins[1]} seeds")
    return EXIT_OK


def handle_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    sessions = build_sessions(cfg)
    runs = ablation_study(cfg.train, sessions)
    rows = result_rows((run.as_triple() for run in runs), baseline_method="CE")
    _write_results(args, cfg, "ablation", _emit_rows(cfg, rows, args.layout or "metrics"))
    return EXIT_OK


def handle_shots(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset = build_dataset(cfg)
    results = shot_study(cfg.train, dataset, cfg.split, cfg.study.shots)
    rows = [ResultRow(f"{r.k_shot}-shot", cfg.train.seed, summarize(r.reports)) for r in results]
    _write_results(
        args, cfg, "shots", _emit_rows(cfg, rows, args.layout or "sessions"), dataset_metadata=dataset.metadata
    )
    return EXIT_OK


def handle_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset = build_dataset(cfg)
    sessions = build_sessions(cfg, dataset)
    workers = args.workers if args.workers is not None else cfg.study.workers
    result = sweep_hyperparams(
        cfg.train, sessions, cfg.study.gamma_grid, cfg.study.alpha_grid, workers=workers
    )
    rendered = emit_grid(result.accuracy, result.gamma_grid, result.alpha_grid, fmt=cfg.output.format)  # type: ignore[arg-type]
    _write_results(args, cfg, "sweep", rendered, dataset_metadata=dataset.metadata, extra={"workers": workers})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_layout(parser: argparse.ArgumentParser, default_help: str) -> None:
    parser.add_argument("--layout", choices=LAYOUTS, help=f"Table layout (default: {default_help})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", metavar="PATH", help="TOML run configuration (default: built-in desk-scale run)")
    parser.add_argument("--seed", type=int, help="Reseed data, session split and training")
    parser.add_argument("--strategy", choices=STRATEGIES, help="Incremental strategy override")
    parser.add_argument("--gamma", type=float, help="CCL weight override")
    parser.add_argument("--alpha", type=float, help="KL weight override")
    parser.add_argument("--out", metavar="DIR", help="Output directory override")
    parser.add_argument("--format", choices=FORMATS, help="Results format override")
    parser.add_argument(
        "--log-level",
        default=os.environ.get(LOG_LEVEL_ENV, "WARNING"),
        help=f"Logging level for stderr (default: %(default)s, or ${LOG_LEVEL_ENV})",
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Train the base session and run every incremental session")
    _add_layout(run_parser, "output.layout from the config")
    run_parser.set_defaults(func=handle_run)

    gradcheck_parser = subparsers.add_parser("gradcheck", help="Audit analytic gradients against finite differences")
    gradcheck_parser.add_argument(
        "--corrupt-gradient",
        action="store_true",
        help="Double one analytic gradient coordinate per loss; the audit must then fail",
    )
    gradcheck_parser.set_defaults(func=handle_gradcheck)

    export_parser = subparsers.add_parser("export", help="Write extractor features of a dataset as an embeddings csv")
    export_parser.add_argument("--checkpoint", required=True, help="Checkpoint written by the run command")
    export_parser.add_argument(
        "--dataset",
        default="test",
        help="'train' or 'test' split of the configured dataset, or a path to an embeddings csv (default: %(default)s)",
    )
    export_parser.add_argument("--output", metavar="PATH", help="Output csv (default: <out>/embeddings.csv)")
    export_parser.set_defaults(func=handle_export)

    perturb_parser = subparsers.add_parser(
        "perturb", help="Run SPL over the schedule and write few-shot features with their perturbed copies"
    )
    perturb_parser.add_argument("--output", metavar="PATH", help="Output csv (default: <out>/perturbed.csv)")
    perturb_parser.set_defaults(func=handle_perturb)

    compare_parser = subparsers.add_parser("compare", help="Run every configured strategy from one shared base")
    compare_parser.add_argument("--seeds", type=int, nargs="+", help="Repeat the comparison for each seed")
    _add_layout(compare_parser, "metrics")
    compare_parser.set_defaults(func=handle_compare)

    sweep_parser = subparsers.add_parser("sweep", help="Final accuracy over the (gamma, alpha) grid")
    sweep_parser.add_argument("--workers", type=int, help="Worker processes (default: study.workers)")
    sweep_parser.set_defaults(func=handle_sweep)

    shots_parser = subparsers.add_parser("shots", help="Final accuracy for each incremental shot count")
    _add_layout(shots_parser, "sessions")
    shots_parser.set_defaults(func=handle_shots)

    ablate_parser = subparsers.add_parser("ablate", help="CE / CE+SPL / CE+CCL / CE+CCL+SPL component ablation")
    _add_layout(ablate_parser, "metrics")
    ablate_parser.set_defaults(func=handle_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging(args.log_level)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        config = build_config(args)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ProtocolError, MetricsError, CheckpointError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
