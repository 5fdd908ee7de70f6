"""End-to-end orchestration shared by the CLI subcommands."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .dataset import (
    Dataset,
    FileCatalogClient,
    Interaction,
    MetadataCache,
    TMDBCatalogClient,
    build_item_text,
    fetch_all_metadata,
    load_interactions,
    load_item_titles,
)
from .embedder import EmbeddingTable, HashingProvider, RemoteEncoderProvider, build_embedding_table
from .evaluator import (
    SLICE_ALL,
    SLICE_COLD,
    TSV_HEADER,
    MetricsReport,
    evaluate,
    kfold_split,
    mean_report,
)
from .graph import BipartiteGraph, build_graph
from .model import InitMode, TrainedModel, init_params, load_checkpoint, save_checkpoint
from .plots import plot_metrics_at_k, plot_training_curves
from .profiler import (
    FallbackProfileGenerator,
    RemoteProfileGenerator,
    UserProfile,
    build_profiles,
    read_profiles,
    write_profiles,
)
from .trainer import train

log = logging.getLogger(__name__)


@dataclass
class Clients:
    """Injectable external clients; ``None`` means "build from config/env"."""

    catalog: object = None
    profile_generator: object = None
    embed_provider: object = None


def make_clients(cfg: RunConfig, clients: Optional[Clients] = None) -> Clients:
    clients = clients or Clients()
    catalog = clients.catalog
    if catalog is None:
        if cfg.catalog is not None:
            catalog = FileCatalogClient(cfg.catalog)
        elif not cfg.offline:
            catalog = TMDBCatalogClient()
    if cfg.offline and getattr(catalog, "remote", False):
        catalog = FileCatalogClient(cfg.catalog) if cfg.catalog is not None else None
    gen = clients.profile_generator
    if gen is None or (cfg.offline and getattr(gen, "remote", False)):
        gen = RemoteProfileGenerator() if cfg.effective_profile_provider() == "remote" else FallbackProfileGenerator()
    prov = clients.embed_provider
    if prov is None or (cfg.offline and getattr(prov, "remote", False)):
        if cfg.effective_embed_provider() == "remote":
            prov = RemoteEncoderProvider(dim=cfg.embed_dim)
        else:
            prov = HashingProvider(cfg.embed_dim)
    return Clients(catalog, gen, prov)


def ingest(cfg: RunConfig, clients: Clients) -> Dataset:
    interactions = load_interactions(cfg.ratings, cfg.format)
    titles = load_item_titles(cfg.items, cfg.format) if cfg.items else {}
    dataset = Dataset.from_interactions(interactions)
    cache = MetadataCache(Path(cfg.cache_dir) / "metadata.tsv")
    metas = fetch_all_metadata(dataset.item_ids, clients.catalog, cache, titles, workers=cfg.workers)
    if len(cache):
        cache.compact()
    return Dataset(dataset.interactions, metas, dataset.user_ids, dataset.item_ids)


def splits(cfg: RunConfig, dataset: Dataset):
    return kfold_split(list(dataset.interactions), cfg.eval.folds, cfg.eval.split_seed)


def _tag(cfg: RunConfig, fold: Optional[int]) -> str:
    return "all" if fold is None or cfg.profile_scope == "all" else f"fold{fold}"


def profiles_for(cfg: RunConfig, dataset: Dataset, train_part: Sequence[Interaction], fold: Optional[int],
                 clients: Clients) -> dict[int, UserProfile]:
    tag = _tag(cfg, fold)
    source = dataset.interactions if tag == "all" else train_part
    path = Path(cfg.cache_dir) / f"profiles-{cfg.effective_profile_provider()}-{tag}.tsv"
    cached = read_profiles(path)
    profiles = build_profiles(source, dataset.items, clients.profile_generator, cached, user_ids=dataset.user_ids)
    if profiles != cached:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_profiles(path, profiles.values())
    return profiles


def embeddings_for(cfg: RunConfig, dataset: Dataset, profiles, fold: Optional[int], clients: Clients) -> EmbeddingTable:
    tag = _tag(cfg, fold)
    prov = clients.embed_provider
    name = f"embeddings-{cfg.effective_profile_provider()}-{prov.name}-{prov.dim}-{tag}.bin"
    return build_embedding_table(
        {u: p.text for u, p in profiles.items()},
        {i: build_item_text(m) for i, m in dataset.items.items()},
        prov,
        dataset.user_ids,
        dataset.item_ids,
        cache_file=Path(cfg.cache_dir) / name,
    )


def build_train_graph(cfg: RunConfig, dataset: Dataset, train_part: Sequence[Interaction]) -> BipartiteGraph:
    graph = build_graph(train_part, dataset.user_ids, dataset.item_ids)
    return graph.positive_only() if cfg.positive_only_edges else graph


def neutral_items(graph: BipartiteGraph, train_part: Sequence[Interaction]) -> dict[int, list[int]]:
    ni = graph.node_index
    out = defaultdict(list)
    for x in train_part:
        if x.rating == 3:
            out[ni.user(x.user_id)].append(ni.item(x.item_id))
    return dict(out)


def fold_dir(cfg: RunConfig, fold: Optional[int]) -> Path:
    return Path(cfg.out_dir) if fold is None else Path(cfg.out_dir) / f"fold{fold}"


def train_model(cfg: RunConfig, dataset: Dataset, train_part: Sequence[Interaction], fold: Optional[int],
                clients: Clients) -> TrainedModel:
    graph = build_train_graph(cfg, dataset, train_part)
    ni = graph.node_index
    if cfg.init_mode is InitMode.TEXT:
        profiles = profiles_for(cfg, dataset, train_part, fold, clients)
        table = embeddings_for(cfg, dataset, profiles, fold, clients)
        params, features = init_params(cfg.train.seed, cfg.model, InitMode.TEXT,
                                       text_features=table.matrix(ni.user_ids, ni.item_ids))
    else:
        params, features = init_params(cfg.train.seed, cfg.model, InitMode.RANDOM, n_nodes=graph.n_nodes)
    out = fold_dir(cfg, fold)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.tsv", "w", encoding="utf-8", newline="\n") as fh:
        model = train(graph, features, cfg.train, cfg.model, params=params,
                      neutral=neutral_items(graph, train_part), log_file=fh)
    save_checkpoint(out / "model.ckpt", model)
    return model


def evaluate_model(cfg: RunConfig, model, train_part, test_part) -> tuple[MetricsReport, MetricsReport]:
    return (
        evaluate(model, test_part, cfg.eval, SLICE_ALL, train_fold=train_part),
        evaluate(model, test_part, cfg.eval, SLICE_COLD, train_fold=train_part),
    )


def write_reports(path_dir: Path, fold_label, reports: Sequence[MetricsReport]) -> list[str]:
    path_dir.mkdir(parents=True, exist_ok=True)
    text = "\n".join(r.to_text(str(fold_label)) for r in reports)
    (path_dir / "report.txt").write_text(text, encoding="utf-8")
    rows = [row for r in reports for row in r.tsv_rows(fold_label)]
    (path_dir / "metrics.tsv").write_text(TSV_HEADER + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return rows


@dataclass
class PipelineResult:
    fold_reports: list[tuple[MetricsReport, MetricsReport]] = field(default_factory=list)
    mean_all: Optional[MetricsReport] = None
    mean_cold: Optional[MetricsReport] = None
    histories: dict = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, clients: Optional[Clients] = None, figures: bool = True) -> PipelineResult:
    clients = make_clients(cfg, clients)
    dataset = ingest(cfg, clients)
    if cfg.profile_scope == "all" and cfg.init_mode is InitMode.TEXT:
        profiles = profiles_for(cfg, dataset, dataset.interactions, None, clients)
        embeddings_for(cfg, dataset, profiles, None, clients)
    result = PipelineResult()
    rows = []
    for k, (tr, te) in enumerate(splits(cfg, dataset)):
        log.info("fold %d: %d train / %d test interactions", k, len(tr), len(te))
        model = train_model(cfg, dataset, tr, k, clients)
        # score with the stored (float32) embeddings so CLI `evaluate` reproduces these numbers
        reports = evaluate_model(cfg, load_model(cfg, k), tr, te)
        rows += write_reports(fold_dir(cfg, k), k, reports)
        result.fold_reports.append(reports)
        result.histories[f"fold {k}"] = model.meta["history"]
    result.mean_all = mean_report([r[0] for r in result.fold_reports])
    result.mean_cold = mean_report([r[1] for r in result.fold_reports])
    out = Path(cfg.out_dir)
    (out / "report.txt").write_text(result.mean_all.to_text("mean") + "\n" + result.mean_cold.to_text("mean"),
                                    encoding="utf-8")
    rows += result.mean_all.tsv_rows("mean") + result.mean_cold.tsv_rows("mean")
    (out / "metrics.tsv").write_text(TSV_HEADER + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    if figures:
        plot_metrics_at_k({"all users": result.mean_all, "cold start": result.mean_cold},
                          out / "figures" / "metrics_at_k.png")
        plot_training_curves(result.histories, out / "figures" / "training_curves.png")
    return result


def recommend(model: TrainedModel, user_id: int, k: int, exclude: Sequence[int] = ()) -> list[tuple[int, float]]:
    """Top-``k`` catalog items by score, skipping ``exclude``; ties by ascending item id."""
    ni = model.node_index
    excl = set(exclude)
    items = [i for i in ni.item_ids if i not in excl]
    scores = model.score_items(user_id, items)
    order = np.lexsort((np.asarray(items), -scores))[:k]
    return [(items[j], float(scores[j])) for j in order]


def load_model(cfg: RunConfig, fold: Optional[int]) -> TrainedModel:
    return load_checkpoint(fold_dir(cfg, fold) / "model.ckpt")
