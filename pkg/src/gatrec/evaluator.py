"""Top-K ranking metrics over explicitly rated test items, k-fold splitting, cold-start slicing."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset import Interaction

SLICE_ALL = "all"
SLICE_COLD = "cold_start"


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = (5, 10, 20)
    relevance_threshold: int = 4
    cold_start_max: int = 5
    folds: int = 5
    split_seed: int = 0

    def __post_init__(self):
        ks = tuple(int(k) for k in self.k_values)
        if not ks or any(k <= 0 for k in ks):
            raise ValueError("k_values must be positive")
        object.__setattr__(self, "k_values", tuple(sorted(set(ks))))
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


@dataclass(frozen=True)
class KMetrics:
    precision: float
    recall: float
    ndcg: float
    map: float
    coverage: float


@dataclass
class MetricsReport:
    slice: str
    users_evaluated: int
    at_k: dict[int, Optional[KMetrics]] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.users_evaluated == 0

    def to_text(self, label: str = "") -> str:
        lines = [f"slice = {self.slice}", f"users_evaluated = {self.users_evaluated}"]
        if label:
            lines.insert(0, f"run = {label}")
        for k, m in self.at_k.items():
            if m is None:
                lines.append(f"k{k}.metrics = absent")
                continue
            for name in ("precision", "recall", "ndcg", "map", "coverage"):
                lines.append(f"k{k}.{name} = {getattr(m, name):.6f}")
        return "\n".join(lines) + "\n"

    def tsv_rows(self, fold) -> list[str]:
        rows = []
        for k, m in self.at_k.items():
            vals = ["NA"] * 5 if m is None else [f"{v:.10f}" for v in (m.precision, m.recall, m.ndcg, m.map, m.coverage)]
            rows.append("\t".join([str(fold), self.slice, str(k), *vals, str(self.users_evaluated)]))
        return rows


TSV_HEADER = "fold\tslice\tk\tprecision\trecall\tndcg\tmap\tcoverage\tusers"


def kfold_split(interactions: Sequence, folds: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    n = len(interactions)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"{n} interactions cannot fill {folds} folds")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    parts = np.array_split(order, folds)
    out = []
    for k in range(folds):
        test_idx = np.sort(parts[k])
        train_idx = np.sort(np.concatenate([parts[j] for j in range(folds) if j != k]))
        out.append(([interactions[i] for i in train_idx], [interactions[i] for i in test_idx]))
    return out


def rank_test_items(model, user_id: int, test_items: Sequence[int]) -> list[int]:
    """Rated test items by descending score; equal scores fall back to ascending item id."""
    items = sorted(set(test_items))
    if not items:
        return []
    scores = np.asarray(model.score_items(user_id, items), dtype=np.float64)
    order = np.lexsort((np.asarray(items), -scores))
    return [items[k] for k in order]


def metrics_at_k(ranked: Sequence[int], relevant, k: int) -> tuple[float, float, float, float]:
    if k <= 0:
        raise ValueError("k must be positive")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("metrics need at least one relevant item")
    top = list(ranked[:k])
    kk = len(top)
    rel = np.array([1.0 if i in relevant else 0.0 for i in top])
    hits = float(rel.sum())
    precision = hits / kk if kk else 0.0
    recall = hits / len(relevant)
    discounts = 1.0 / np.log2(np.arange(2, kk + 2))
    dcg = float(rel @ discounts)
    idcg = float(discounts[: min(kk, len(relevant))].sum())
    # dot product vs plain sum can round DCG a hair above IDCG
    ndcg = min(1.0, dcg / idcg) if idcg > 0 else 0.0
    prec_at = np.cumsum(rel) / np.arange(1, kk + 1)
    ap = float((prec_at * rel).sum()) / min(k, len(relevant))
    return precision, recall, ndcg, ap


def item_coverage(topk_lists: Iterable[Sequence[int]], catalog_size: int) -> float:
    if catalog_size < 1:
        raise ValueError("catalog_size must be >= 1")
    seen = set()
    for lst in topk_lists:
        seen.update(lst)
    return len(seen) / catalog_size


def training_counts(train: Iterable[Interaction]) -> Counter:
    """Per-user interaction counts after dropping neutral ratings."""
    return Counter(x.user_id for x in train if x.rating != 3)


def evaluate(
    model,
    test_fold: Sequence[Interaction],
    config: EvalConfig = EvalConfig(),
    slice: str = SLICE_ALL,
    train_fold: Optional[Sequence[Interaction]] = None,
    catalog_size: Optional[int] = None,
) -> MetricsReport:
    """Rank each user's rated test items and average the metrics over users with a relevant item.

    The cold-start slice needs ``train_fold`` to count training interactions.
    """
    if slice not in (SLICE_ALL, SLICE_COLD):
        raise ValueError(f"unknown slice {slice!r}")
    by_user: dict[int, dict[int, int]] = defaultdict(dict)
    for x in test_fold:
        by_user[x.user_id][x.item_id] = x.rating
    users = sorted(by_user)
    if slice == SLICE_COLD:
        if train_fold is None:
            raise ValueError("cold-start slice needs the training fold")
        counts = training_counts(train_fold)
        users = [u for u in users if counts.get(u, 0) < config.cold_start_max]
    if catalog_size is None:
        catalog_size = model.node_index.n_items

    sums = {k: np.zeros(4) for k in config.k_values}
    tops = {k: [] for k in config.k_values}
    n_eval = 0
    for u in users:
        ratings = by_user[u]
        relevant = {i for i, r in ratings.items() if r >= config.relevance_threshold}
        if not relevant:
            continue
        ranked = rank_test_items(model, u, list(ratings))
        n_eval += 1
        for k in config.k_values:
            sums[k] += metrics_at_k(ranked, relevant, k)
            tops[k].append(ranked[:k])
    report = MetricsReport(slice, n_eval)
    for k in config.k_values:
        if n_eval == 0:
            report.at_k[k] = None
        else:
            p, r, nd, ap = sums[k] / n_eval
            report.at_k[k] = KMetrics(float(p), float(r), float(nd), float(ap),
                                      item_coverage(tops[k], catalog_size))
    return report


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average per-fold reports (folds with no evaluable users are skipped)."""
    if not reports:
        raise ValueError("no reports to average")
    slice_ = reports[0].slice
    filled = [r for r in reports if not r.empty]
    out = MetricsReport(slice_, sum(r.users_evaluated for r in reports))
    for k in reports[0].at_k:
        if not filled:
            out.at_k[k] = None
            continue
        vals = np.array([[getattr(r.at_k[k], f) for f in ("precision", "recall", "ndcg", "map", "coverage")]
                         for r in filled])
        out.at_k[k] = KMetrics(*(float(v) for v in vals.mean(axis=0)))
    return out


class PopularityRanker:
    """Scores an item by its number of positive training ratings (baseline)."""

    def __init__(self, train: Iterable[Interaction], node_index, threshold: int = 4):
        self.node_index = node_index
        self.counts = Counter(x.item_id for x in train if x.rating >= threshold)

    def score_items(self, user_id: int, item_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.counts.get(i, 0) for i in item_ids], dtype=np.float64)
