"""Run configuration and the end-to-end pipeline: data, two training stages, retrieval, reranking, reports."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from .autodiff import NumericalError
from .data import (
    DataError,
    Manifest,
    Split,
    SyntheticSpec,
    generate_synthetic,
    load_images,
    split_from_manifest,
    split_protocol,
)
from .index import RankedList, build_index, run_protocol
from .metrics import MetricsReport, RelevanceJudgment, evaluate, judgments_from_labels, report_csv, report_text
from .rerank import PairwiseScorer, RerankConfig, STIRScorer, rerank_all
from .training import AdamW, FrozenPairCache, TrainHyper, TrainLog, train_stir_epoch, train_triplet_epoch
from .vit import ConfigError, EncoderConfig, EncoderWeights, encode_batch, init_weights, pair_init_from_triplet

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
IMAGES_NAME = "images.npy"


# -- configuration ----------------------------------------------------------------------------
class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-5`` style floats (YAML 1.1 wants ``1.0e-5``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _tupled(d: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, raw: Mapping | None, section: str):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}")
    try:
        return cls(**_tupled(raw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str | None = None  # manifest.jsonl + payloads; None means generate from `synthetic`
    out_dir: str | None = None
    protocol: str = "fixed"
    query_fraction: float = 1 / 3
    metric: str = "cosine"
    k_values: tuple[int, ...] = (1, 5, 10)
    rerank_n: int = 5
    symmetric: bool = True
    ablation_n: tuple[int, ...] = (1, 3, 5)
    workers: int = 1
    checkpoint_every: int = 1  # epochs between checkpoints; 0 keeps only the final one
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    triplet: TrainHyper = field(default_factory=TrainHyper)
    stir: TrainHyper = field(default_factory=TrainHyper)

    SECTIONS = {"synthetic": SyntheticSpec, "encoder": EncoderConfig, "triplet": TrainHyper, "stir": TrainHyper}

    def __post_init__(self):
        if self.protocol not in ("fixed", "leave_one_out"):
            raise ConfigError("protocol must be 'fixed' or 'leave_one_out'")
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError("metric must be 'cosine' or 'euclidean'")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ConfigError("k_values must be a nonempty list of positive integers")
        if self.rerank_n < 1 or any(n < 1 for n in self.ablation_n):
            raise ConfigError("rerank depths must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} does not exist")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> RunConfig:
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, value in raw.items():
            if key in cls.SECTIONS:
                kwargs[key] = _build(cls.SECTIONS[key], value, key)
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(value).items()}
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def effective_workers(self) -> int:
        """``workers`` bounded by the STIR_THREADS environment variable when set."""
        env = os.environ.get("STIR_THREADS")
        if env:
            try:
                return max(1, min(self.workers, int(env)))
            except ValueError as exc:
                raise ConfigError(f"STIR_THREADS must be an integer, got {env!r}") from exc
        return self.workers


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML run config and apply ``section.key=value`` overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = parse_yaml(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def apply_overrides(raw: Mapping, overrides: Sequence[str]) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        value = parse_yaml(text)
        parts = key.split(".")
        if len(parts) == 1:
            out[key] = value
        elif len(parts) == 2:
            section = out.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"{parts[0]} is not a section")
            section[parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} nests too deeply")
    return out


# -- data ---------------------------------------------------------------------------------------
@dataclass
class Dataset:
    manifest: Manifest
    images: np.ndarray  # aligned with manifest.records
    split: Split

    def __post_init__(self):
        self.row_of = {r.item_id: i for i, r in enumerate(self.manifest.records)}
        self.labels = np.array([r.label_id for r in self.manifest.records])

    def rows(self, records) -> np.ndarray:
        return np.array([self.row_of[r.item_id] for r in records], dtype=np.int64)

    def resolver(self) -> dict[str, np.ndarray]:
        return {r.item_id: self.images[i] for i, r in enumerate(self.manifest.records)}


def synthesize(config: RunConfig) -> Dataset:
    """Generate the synthetic set and fix its query/gallery roles with the data seed."""
    manifest, images = generate_synthetic(config.synthetic)
    split = split_protocol(manifest, config.protocol, np.random.default_rng(config.synthetic.seed), config.query_fraction)
    return Dataset(split.manifest, images, split)


def write_dataset(data: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.manifest.save(out / MANIFEST_NAME)
    np.save(out / IMAGES_NAME, data.images)


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    if not (root / MANIFEST_NAME).is_file():
        raise DataError(f"{root / MANIFEST_NAME} not found")
    manifest = Manifest.load(root / MANIFEST_NAME)
    by_id = load_images(manifest, root)
    images = np.stack([by_id[r.item_id] for r in manifest.records])
    return Dataset(manifest, images, split_from_manifest(manifest))


def load_dataset(config: RunConfig) -> Dataset:
    return read_dataset(config.data_dir) if config.data_dir else synthesize(config)


# -- training -----------------------------------------------------------------------------------
EpochHook = Callable[[int, float, EncoderWeights], None]


def _check_loss(stage: str, epoch: int, loss: float) -> None:
    if not math.isfinite(loss):
        raise NumericalError(f"{stage} epoch {epoch}: loss is {loss}")


def _hyper(h: TrainHyper, seed: int) -> TrainHyper:
    return dataclasses.replace(h, seed=seed)


def train_triplet(config: RunConfig, data: Dataset, on_epoch: EpochHook | None = None) -> tuple[EncoderWeights, TrainLog]:
    hyper = _hyper(config.triplet, config.seed)
    train = data.rows(data.split.train)
    weights = init_weights(config.encoder, config.seed)
    optimizer = AdamW(hyper.lr, weight_decay=hyper.weight_decay)
    history = TrainLog()
    for epoch in range(hyper.epochs):
        loss = train_triplet_epoch(data.images[train], data.labels[train], weights, optimizer, hyper, epoch)
        _check_loss("triplet", epoch, loss)
        history.losses.append(loss)
        log.info("triplet epoch %d loss %.6f", epoch, loss)
        if on_epoch:
            on_epoch(epoch, loss, weights)
    return weights, history


def train_stir(
    config: RunConfig,
    data: Dataset,
    init: EncoderWeights | None,
    on_epoch: EpochHook | None = None,
) -> tuple[EncoderWeights, TrainLog]:
    """Pair reranker training.  ``init=None`` means from scratch."""
    hyper = _hyper(config.stir, config.seed)
    train = data.rows(data.split.train)
    if init is not None:
        if init.config != config.encoder:
            raise ConfigError("initial checkpoint was trained with a different encoder config")
        weights = pair_init_from_triplet(init)
    else:
        weights = init_weights(config.encoder, config.seed)
    images, labels = data.images[train], data.labels[train]
    cache = None
    if hyper.head_only_epochs > 0 and hyper.epochs > 0:
        pool_rng = np.random.default_rng([hyper.seed, 2])
        cache = FrozenPairCache(images, labels, weights, hyper.views, pool_rng, hyper.flip, hyper.crop_scale)
    optimizer = AdamW(hyper.lr, weight_decay=hyper.weight_decay)
    history = TrainLog()
    for epoch in range(hyper.epochs):
        loss = train_stir_epoch(images, labels, weights, optimizer, hyper, epoch, cache)
        _check_loss("stir", epoch, loss)
        history.losses.append(loss)
        log.info("stir epoch %d loss %.6f", epoch, loss)
        if epoch + 1 == hyper.head_only_epochs:
            cache = None  # encoder starts moving; cached features go stale
        if on_epoch:
            on_epoch(epoch, loss, weights)
    return weights, history


# -- retrieval and evaluation -------------------------------------------------------------------
def embed(weights: EncoderWeights, data: Dataset, records) -> tuple[list[str], np.ndarray]:
    rows = data.rows(records)
    return [r.item_id for r in records], encode_batch(data.images[rows], weights)


@dataclass
class Retrieval:
    lists: list[RankedList]
    judgments: dict[str, RelevanceJudgment]


def retrieve(config: RunConfig, data: Dataset, embeddings: Mapping[str, np.ndarray], depth: int | None = None) -> Retrieval:
    """Ranked lists for every query under the configured protocol and metric.

    Lists are cut at ``depth`` (default: deep enough for every k and rerank n
    in the config), clipped to the gallery size.
    """
    split = data.split
    if split.protocol != config.protocol:
        raise ConfigError(f"config asks for the {config.protocol} protocol but the dataset is split for {split.protocol}")
    missing = [r.item_id for r in split.query + split.gallery if r.item_id not in embeddings]
    if missing:
        raise DataError(f"{len(missing)} test items have no embedding (first: {missing[0]})")
    gids = [r.item_id for r in split.gallery]
    index = build_index(gids, np.stack([embeddings[g] for g in gids]), [r.label_id for r in split.gallery], config.metric)
    qids = [r.item_id for r in split.query]
    if depth is None:
        depth = max(max(config.k_values), config.rerank_n, max(config.ablation_n))
    depth = min(depth, len(index) - (1 if split.protocol == "leave_one_out" else 0))
    lists = run_protocol(
        qids, np.stack([embeddings[q] for q in qids]), index, split.protocol, depth, workers=config.effective_workers()
    )
    judgments = judgments_from_labels(qids, [r.label_id for r in split.query], gids, [r.label_id for r in split.gallery])
    return Retrieval(lists, judgments)


def reranked(config: RunConfig, data: Dataset, retrieval: Retrieval, scorer: PairwiseScorer, n: int, symmetric: bool) -> list[RankedList]:
    return rerank_all(retrieval.lists, scorer, RerankConfig(n, symmetric), data.resolver(), config.effective_workers())


def report_rows(
    config: RunConfig,
    data: Dataset,
    retrieval: Retrieval,
    scorer: PairwiseScorer | None = None,
    n: int | None = None,
    symmetric: bool | None = None,
) -> tuple[list[tuple[str, MetricsReport]], dict[str, list[RankedList]]]:
    """Baseline row, plus STIR (and STIR-Symmetric) rows when a scorer is given."""
    n = config.rerank_n if n is None else n
    symmetric = config.symmetric if symmetric is None else symmetric
    ks = config.k_values
    rows = [("ViT-Triplet", evaluate(retrieval.lists, retrieval.judgments, ks))]
    lists = {"ViT-Triplet": retrieval.lists}
    if scorer is not None:
        variants = [("STIR", False)] + ([("STIR-Symmetric", True)] if symmetric else [])
        for name, sym in variants:
            out = reranked(config, data, retrieval, scorer, n, sym)
            rows.append((f"{name} n={n}", evaluate(out, retrieval.judgments, ks)))
            lists[f"{name} n={n}"] = out
    return rows, lists


def ablation_rows(
    config: RunConfig, data: Dataset, retrieval: Retrieval, scorer: PairwiseScorer, n_values: Sequence[int] | None = None
) -> list[tuple[str, MetricsReport]]:
    n_values = config.ablation_n if n_values is None else n_values
    rows = []
    for n in n_values:
        out = reranked(config, data, retrieval, scorer, n, False)
        rows.append((f"STIR n={n}", evaluate(out, retrieval.judgments, config.k_values)))
    return rows


# -- end to end ---------------------------------------------------------------------------------
@dataclass
class RunResult:
    config: RunConfig
    untrained: MetricsReport
    rows: list[tuple[str, MetricsReport]]
    ablation: list[tuple[str, MetricsReport]]
    triplet_log: TrainLog
    stir_log: TrainLog
    triplet_weights: EncoderWeights
    stir_weights: EncoderWeights
    lists: dict[str, list[RankedList]]
    seconds: dict[str, float]

    def report_text(self) -> str:
        return report_text(self.rows) + "\n" + report_text(self.ablation, ("cmc", "map"))

    def report_csv(self) -> str:
        return report_csv(self.rows)

    def ablation_csv(self) -> str:
        return report_csv(self.ablation)

    def row(self, prefix: str) -> MetricsReport:
        for name, rep in self.rows:
            if name == prefix or name.startswith(prefix + " "):
                return rep
        raise KeyError(prefix)


def _embeddings_for(weights: EncoderWeights, data: Dataset) -> dict[str, np.ndarray]:
    seen = {r.item_id for r in data.split.query}
    records = data.split.query + [r for r in data.split.gallery if r.item_id not in seen]
    ids, matrix = embed(weights, data, records)
    return dict(zip(ids, matrix))


def run_pipeline(
    config: RunConfig,
    data: Dataset | None = None,
    on_triplet_epoch: EpochHook | None = None,
    on_stir_epoch: EpochHook | None = None,
) -> RunResult:
    """Data, triplet stage, STIR stage, baseline and reranked reports, ablation over n."""
    seconds = {}
    t0 = time.perf_counter()
    data = data if data is not None else load_dataset(config)
    chance = retrieve(config, data, _embeddings_for(init_weights(config.encoder, config.seed), data))
    untrained = evaluate(chance.lists, chance.judgments, config.k_values)
    seconds["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    triplet_weights, triplet_log = train_triplet(config, data, on_triplet_epoch)
    seconds["triplet"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stir_weights, stir_log = train_stir(config, data, triplet_weights, on_stir_epoch)
    seconds["stir"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    retrieval = retrieve(config, data, _embeddings_for(triplet_weights, data))
    scorer = STIRScorer(stir_weights)
    rows, lists = report_rows(config, data, retrieval, scorer)
    ablation = ablation_rows(config, data, retrieval, scorer)
    seconds["evaluate"] = time.perf_counter() - t0
    return RunResult(config, untrained, rows, ablation, triplet_log, stir_log, triplet_weights, stir_weights, lists, seconds)
