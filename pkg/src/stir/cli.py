"""``stir`` command-line driver.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck
from .autodiff import NumericalError
from .data import DataError, SyntheticSpec, read_embeddings, write_embeddings
from .index import RetrievalError, write_ranked_csv
from .metrics import MetricsError, report_csv, report_text
from .mining import MiningError, SamplingError
from .pipeline import (
    Dataset,
    RunConfig,
    ablation_rows,
    apply_overrides,
    embed,
    load_config,
    load_dataset,
    parse_yaml,
    read_dataset,
    report_rows,
    retrieve,
    run_pipeline,
    synthesize,
    train_stir,
    train_triplet,
    write_dataset,
)
from .rerank import ResolutionError, STIRScorer
from .vit import CheckpointError, ConfigError, EncoderWeights, load_checkpoint, save_checkpoint

log = logging.getLogger("stir")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------------------------
def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data", None) is not None:
        overrides.append(f"data_dir={args.data}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if args.config is None:
        return RunConfig.from_dict(apply_overrides({}, overrides))
    return load_config(args.config, overrides)


def _out_dir(args, config: RunConfig) -> Path:
    out = Path(args.out or config.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.replace(out_dir=str(out)).to_yaml(), encoding="utf-8")
    return out


def _checkpointer(out: Path, stage: str, every: int, total: int):
    def hook(epoch, loss, weights):
        if every and (epoch + 1) % every == 0 and epoch + 1 < total:
            save_checkpoint(out / f"{stage}_epoch{epoch + 1:04d}.stirw", weights)

    return hook


def _dataset(config: RunConfig, manifest: str | None = None) -> Dataset:
    if manifest is not None:
        return read_dataset(Path(manifest).parent)
    return load_dataset(config)


def _checkpoint(path: str, config: RunConfig) -> EncoderWeights:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    weights = load_checkpoint(path)
    if weights.config != config.encoder:
        raise ConfigError(f"{path} was saved with a different encoder config than the run config")
    return weights


def _write_report(out: Path, stem: str, rows) -> None:
    (out / f"{stem}.csv").write_text(report_csv(rows), encoding="utf-8")
    text = report_text(rows)
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_").replace("=", "")


def _embedding_map(path: str) -> dict[str, np.ndarray]:
    if not Path(path).is_file():
        raise DataError(f"embedding file {path} not found")
    ids, matrix = read_embeddings(path)
    return dict(zip(ids, matrix))


def _n_values(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad n list {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("n values must be positive integers")
    return values


# -- commands ----------------------------------------------------------------------------------
def cmd_synth_data(args) -> int:
    raw = {}
    if args.spec:
        if not Path(args.spec).is_file():
            raise UsageError(f"spec file {args.spec} not found")
        raw = parse_yaml(Path(args.spec).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("spec file must hold a mapping")
    # either a full run config or a bare synthetic spec
    if set(raw) <= {f for f in SyntheticSpec.__dataclass_fields__}:
        raw = {"synthetic": raw}
    config = RunConfig.from_dict(apply_overrides(raw, args.set or []))
    data = synthesize(config)
    write_dataset(data, args.out)
    s = data.split
    n_classes = len(set(data.labels.tolist()))
    print(
        f"classes={n_classes} items={len(data.manifest)} train={len(s.train)} "
        f"query={len(s.query)} gallery={len(s.gallery)} protocol={s.protocol}"
    )
    return EXIT_OK


def cmd_train_triplet(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = load_dataset(config)
    hook = _checkpointer(out, "triplet", config.checkpoint_every, config.triplet.epochs)
    weights, history = train_triplet(config, data, hook)
    save_checkpoint(out / "triplet.stirw", weights)
    (out / "triplet_loss.csv").write_text(history.csv(), encoding="utf-8")
    print(f"triplet: {len(history.losses)} epochs, final loss {history.losses[-1] if history.losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_train_stir(args) -> int:
    if args.init is None and not args.from_scratch:
        raise UsageError("train-stir needs --init <triplet checkpoint> or --from-scratch")
    config = _config(args)
    init = None if args.from_scratch else _checkpoint(args.init, config)
    out = _out_dir(args, config)
    data = load_dataset(config)
    hook = _checkpointer(out, "stir", config.checkpoint_every, config.stir.epochs)
    weights, history = train_stir(config, data, init, hook)
    save_checkpoint(out / "stir.stirw", weights)
    (out / "stir_loss.csv").write_text(history.csv(), encoding="utf-8")
    print(f"stir: {len(history.losses)} epochs, final loss {history.losses[-1] if history.losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    config = _config(args)
    weights = _checkpoint(args.checkpoint, config)
    data = _dataset(config, args.manifest)
    out = _out_dir(args, config)
    records = data.manifest.select(None if args.split == "all" else args.split)
    if not records:
        raise DataError(f"no records in split {args.split!r}")
    ids, matrix = embed(weights, data, records)
    write_embeddings(out / "embeddings.stire", ids, matrix)
    print(f"embedded {len(ids)} items, dim {matrix.shape[1]}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    if args.rerank_n is not None and args.stir_checkpoint is None:
        raise UsageError("--rerank-n needs --stir-checkpoint")
    if args.symmetric and args.stir_checkpoint is None:
        raise UsageError("--symmetric needs --stir-checkpoint")
    if args.rerank_n is not None:
        config = config.replace(rerank_n=args.rerank_n)
    scorer = STIRScorer(_checkpoint(args.stir_checkpoint, config)) if args.stir_checkpoint else None
    data = _dataset(config, args.manifest)
    out = _out_dir(args, config)
    retrieval = retrieve(config, data, _embedding_map(args.embeddings))
    rows, lists = report_rows(config, data, retrieval, scorer, symmetric=args.symmetric)
    _write_report(out, "report", rows)
    for name, ranked in lists.items():
        write_ranked_csv(out / f"ranked_{_slug(name)}.csv", ranked, rescored_column=scorer is not None)
    return EXIT_OK


def cmd_ablate_n(args) -> int:
    config = _config(args)
    n_values = args.n_values or config.ablation_n
    config = config.replace(ablation_n=tuple(n_values))
    scorer = STIRScorer(_checkpoint(args.stir_checkpoint, config))
    data = _dataset(config, args.manifest)
    out = _out_dir(args, config)
    retrieval = retrieve(config, data, _embedding_map(args.embeddings))
    rows, _ = report_rows(config, data, retrieval)
    _write_report(out, "ablation", rows + ablation_rows(config, data, retrieval, scorer, n_values))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _config(args) if args.config else None
    seed = args.seed if args.seed is not None else (config.seed if config else 0)
    results = gradcheck.run_all(seed, config.encoder if config else None)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<28} max_rel_error={r.max_rel_error:.3e} entries={r.checked} {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_run(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    every = config.checkpoint_every
    result = run_pipeline(
        config,
        on_triplet_epoch=_checkpointer(out, "triplet", every, config.triplet.epochs),
        on_stir_epoch=_checkpointer(out, "stir", every, config.stir.epochs),
    )
    save_checkpoint(out / "triplet.stirw", result.triplet_weights)
    save_checkpoint(out / "stir.stirw", result.stir_weights)
    (out / "triplet_loss.csv").write_text(result.triplet_log.csv(), encoding="utf-8")
    (out / "stir_loss.csv").write_text(result.stir_log.csv(), encoding="utf-8")
    _write_report(out, "report", result.rows)
    _write_report(out, "ablation", result.rows[:1] + result.ablation)
    for name, ranked in result.lists.items():
        write_ranked_csv(out / f"ranked_{_slug(name)}.csv", ranked, rescored_column=True)
    timing = "  ".join(f"{k}={v:.1f}s" for k, v in result.seconds.items())
    log.info("untrained CMC@1 %.4f; %s", result.untrained.cmc[min(result.untrained.k_values)], timing)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stir", description="Pair-transformer reranking for image retrieval.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True, data=True, config_required=True):
        p.add_argument("--config", required=config_required, help="run config (YAML)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. triplet.epochs=5")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory (default: out_dir from the config)")
        if data:
            p.add_argument("--data", help="dataset directory holding manifest.jsonl; overrides data_dir")
            p.add_argument("--workers", type=int)

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="synthetic spec or run config (YAML); defaults apply when omitted")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-triplet", help="train the embedding encoder")
    common(p)
    p.set_defaults(func=cmd_train_triplet)

    p = sub.add_parser("train-stir", help="train the pair reranker")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--init", help="triplet checkpoint to start from")
    g.add_argument("--from-scratch", action="store_true", help="start from fresh weights instead")
    p.set_defaults(func=cmd_train_stir)

    p = sub.add_parser("embed", help="write embeddings for a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="manifest.jsonl to embed (payload paths resolve beside it)")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", help="retrieve, optionally rerank, report metrics")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest")
    p.add_argument("--stir-checkpoint")
    p.add_argument("--rerank-n", type=int)
    p.add_argument("--symmetric", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-n", help="rerank at several depths n")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest")
    p.add_argument("--stir-checkpoint", required=True)
    p.add_argument("--n-values", type=_n_values, help="comma-separated depths, e.g. 1,3,5")
    p.set_defaults(func=cmd_ablate_n)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(p, out=False, data=False, config_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="full pipeline: data, both trainings, reports, ablation")
    common(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed by the parser
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        # overflow is reported as a NumericalError by the engine; the raw numpy warning adds nothing
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"stir: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, RetrievalError, MetricsError, ResolutionError, SamplingError, MiningError) as exc:
        print(f"stir: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"stir: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, yaml.YAMLError) as exc:
        print(f"stir: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
