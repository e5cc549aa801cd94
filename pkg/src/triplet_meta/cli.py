"""Command-line interface.

Subcommands mirror the pipeline stages (`ingest`, `triplets`, `embed`,
`cluster`, `meta`, `sensitivity`), plus `run` for the whole pipeline and
`report` to assemble plot-ready summaries. All flags override values from
the --config file. Exit codes: 0 success, 1 stage failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, TripletMetaError
from .pipeline import RunConfig, assemble_report, config_from_dict, load_config_file

_STAGE_COMMANDS = ("ingest", "triplets", "embed", "cluster", "meta", "sensitivity")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH",
                   help="config file (YAML, JSON, or TOML on Python >= 3.11)")
    p.add_argument("--dataset", metavar="PATH", help="study table (CSV or JSON)")
    p.add_argument("--format", choices=["csv", "json"], help="dataset format")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (drives all stage seeds)")

    p.add_argument("--lambda", dest="lam", type=int, help="triplet multiplier")
    p.add_argument("--dim", type=int, help="embedding dimension (budget and training)")
    p.add_argument("--budget", type=int, help="explicit triplet budget override")
    p.add_argument("--log-base", choices=["natural", "base2", "base10"],
                   help="log base in the budget formula")
    p.add_argument("--pairs-per-anchor", type=int, help="candidate pairs judged per anchor")

    p.add_argument("--margin", type=float, help="triplet loss margin")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="mini-batch size in triplets")

    p.add_argument("--k", type=int, help="cluster count for the primary analysis")
    p.add_argument("--k-range", metavar="MIN:MAX", help="elbow curve k range")
    p.add_argument("--restarts", type=int, help="k-means restarts")
    p.add_argument("--level", type=float, help="confidence/prediction level")

    p.add_argument("--oracle", choices=["llm", "gower"], help="similarity oracle")
    p.add_argument("--llm-endpoint", metavar="URL", help="chat-completion endpoint")
    p.add_argument("--llm-model", metavar="NAME", help="model name")
    p.add_argument("--llm-temperature", type=float, help="sampling temperature")
    p.add_argument("--prompt-template", metavar="PATH", help="prompt template file")
    p.add_argument("--cache-dir", metavar="DIR", help="oracle judgment cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triplet-meta",
        description="Study-similarity embeddings from oracle-judged triplets, "
                    "k-means subgroups, and random-effects meta-analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the full pipeline",
        "ingest": "load and validate the dataset",
        "triplets": "generate the triplet pool and the budgeted subsample",
        "embed": "train the embedding on the triplet subsample",
        "cluster": "compute the elbow curve and the primary k-means partition",
        "meta": "per-cluster and overall random-effects meta-analysis",
        "sensitivity": "run the seed/lambda/dim/k robustness grid",
        "report": "assemble plot-ready summaries from a completed run",
    }
    for name in ("run", *_STAGE_COMMANDS, "report"):
        p = sub.add_parser(name, help=helps[name])
        _add_common(p)
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.dataset is not None:
        cfg.dataset_path = args.dataset
    if args.format is not None:
        cfg.dataset_format = args.format
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.master_seed = args.seed

    if args.lam is not None:
        cfg.lam = args.lam
    if args.dim is not None:
        cfg.dim = args.dim
        cfg.train_dim = args.dim
    if args.budget is not None:
        cfg.budget_override = args.budget
    if args.log_base is not None:
        cfg.log_base = args.log_base
    if args.pairs_per_anchor is not None:
        cfg.pairs_per_anchor = args.pairs_per_anchor

    if args.margin is not None:
        cfg.margin = args.margin
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size

    if args.k is not None:
        cfg.k = args.k
    if args.k_range is not None:
        try:
            lo, _, hi = args.k_range.partition(":")
            cfg.k_min, cfg.k_max = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"--k-range expects MIN:MAX, got {args.k_range!r}")
    if args.restarts is not None:
        cfg.restarts = args.restarts
    if args.level is not None:
        cfg.level = args.level

    if args.oracle is not None:
        cfg.oracle.kind = args.oracle
    if args.llm_endpoint is not None:
        cfg.oracle.endpoint = args.llm_endpoint
    if args.llm_model is not None:
        cfg.oracle.model = args.llm_model
    if args.llm_temperature is not None:
        cfg.oracle.temperature = args.llm_temperature
    if args.prompt_template is not None:
        cfg.oracle.prompt_template = args.prompt_template
    if args.cache_dir is not None:
        cfg.oracle.cache_dir = args.cache_dir
    return cfg


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = load_config_file(args.config) if args.config else {}
    cfg = config_from_dict(doc)
    return _apply_overrides(cfg, args)


def _error_line(kind: str, exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


def cli(argv: list[str] | None = None) -> int:
    """Parse argv, execute the requested command, and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)

    try:
        if args.command == "report":
            cfg = _resolve_config(args)
            assemble_report(cfg.out_dir)
            print(f"report written to {cfg.out_dir}/report.json")
            return 0
        cfg = _resolve_config(args)
        from .pipeline import run_pipeline

        stages = None if args.command == "run" else [args.command]
        manifest = run_pipeline(cfg, stages=stages)
        ran = [s["name"] for s in manifest.stages if not s["skipped"]]
        skipped = [s["name"] for s in manifest.stages if s["skipped"]]
        parts = [f"completed: {', '.join(ran) or 'nothing'}"]
        if skipped:
            parts.append(f"cached: {', '.join(skipped)}")
        print("; ".join(parts) + f" -> {cfg.out_dir}")
        return 0
    except ConfigError as exc:
        _error_line("config", exc)
        return 2
    except TripletMetaError as exc:
        _error_line("stage", exc)
        return 1
    except (ValueError, OSError) as exc:
        _error_line("stage", exc)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
