"""Ranking metrics over binary click labels.

List-level functions return ``None`` for lists on which a metric is undefined
(no positives, or for AUC no negatives either); the aggregate skips those and
counts how many lists each metric actually used.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .core import ContractError, Dataset, as_positions, length_groups, ranked_items
from .model import Reranker, make_batch, rank_positions

K_VALUES = (5, 10, 15, 20)


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (n,):
        raise ContractError(f"labels length {y.shape} does not match list length {n}")
    return y


def list_auc(scores, labels) -> float | None:
    """Fraction of (positive, negative) pairs ordered correctly; ties count half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels, s.shape[0]) > 0
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


def pooled_auc(scores_per_list, labels_per_list) -> float | None:
    """AUC over all items of all lists pooled together (Mann-Whitney form)."""
    s = np.concatenate([np.asarray(x, dtype=np.float64) for x in scores_per_list])
    y = np.concatenate([np.asarray(x, dtype=np.float64) for x in labels_per_list]) > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _ranked_labels(ranking, labels) -> np.ndarray:
    ranking = as_positions(ranking)
    return _labels(labels, ranking.size)[ranked_items(ranking)]


def list_ndcg(ranking, labels) -> float | None:
    gains = _ranked_labels(ranking, labels)
    if gains.sum() == 0:
        return None
    discounts = 1.0 / np.log2(np.arange(2, gains.size + 2))
    ideal = np.sort(gains)[::-1]
    return float((gains * discounts).sum() / (ideal * discounts).sum())


def list_map_at_k(ranking, labels, k: int) -> float | None:
    if k < 1:
        raise ContractError("K must be >= 1")
    rel = _ranked_labels(ranking, labels)
    total = rel.sum()
    if total == 0:
        return None
    kk = min(k, rel.size)
    top = rel[:kk]
    prec = np.cumsum(top) / np.arange(1, kk + 1)
    return float((prec * top).sum() / min(kk, total))


def list_precision_at_k(ranking, labels, k: int) -> float:
    if k < 1:
        raise ContractError("K must be >= 1")
    rel = _ranked_labels(ranking, labels)
    kk = min(k, rel.size)
    return float(rel[:kk].sum() / kk)


@dataclass
class MetricsReport:
    auc: float | None
    ndcg: float | None
    map_at: dict[int, float | None]
    precision_at: dict[int, float | None]
    n_lists_evaluated: dict[str, int] = field(default_factory=dict)
    n_lists: int = 0

    def columns(self) -> list[tuple[str, float | None]]:
        """Values in table order: AUC, NDCG, MAP@5..20, Precision@5..20."""
        cols = [("AUC", self.auc), ("NDCG", self.ndcg)]
        cols += [(f"MAP@{k}", self.map_at[k]) for k in sorted(self.map_at)]
        cols += [(f"Precision@{k}", self.precision_at[k]) for k in sorted(self.precision_at)]
        return cols

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ndcg": self.ndcg,
            "map_at": {str(k): v for k, v in sorted(self.map_at.items())},
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "n_lists": self.n_lists,
            "n_lists_evaluated": dict(sorted(self.n_lists_evaluated.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow([c for c, _ in cols])
        w.writerow(["" if v is None else repr(v) for _, v in cols])
        return buf.getvalue()


def aggregate(
    scores_per_list, rankings, labels_per_list, ks=K_VALUES, pooled: bool = False
) -> MetricsReport:
    """Mean of each list metric over the lists where it is defined."""
    per: dict[str, list[float]] = {"auc": [], "ndcg": []}
    for k in ks:
        per[f"map@{k}"] = []
        per[f"precision@{k}"] = []
    for s, r, y in zip(scores_per_list, rankings, labels_per_list):
        values = {"auc": list_auc(s, y), "ndcg": list_ndcg(r, y)}
        for k in ks:
            values[f"map@{k}"] = list_map_at_k(r, y, k)
            values[f"precision@{k}"] = list_precision_at_k(r, y, k)
        for key, v in values.items():
            if v is not None:
                per[key].append(v)

    def mean(key):
        return float(np.mean(per[key])) if per[key] else None

    counts = {key: len(v) for key, v in per.items()}
    auc = mean("auc")
    if pooled:
        auc = pooled_auc(scores_per_list, labels_per_list)
        counts["auc"] = len(labels_per_list) if auc is not None else 0
    return MetricsReport(
        auc=auc,
        ndcg=mean("ndcg"),
        map_at={k: mean(f"map@{k}") for k in ks},
        precision_at={k: mean(f"precision@{k}") for k in ks},
        n_lists_evaluated=counts,
        n_lists=len(labels_per_list),
    )


def predict_lists(model: Reranker, data: Dataset, batch_size: int = 256):
    """Scores and re-ranked orders for every list, in dataset order."""
    scores: list[np.ndarray] = [None] * len(data)  # type: ignore[list-item]
    ranks: list[np.ndarray] = [None] * len(data)  # type: ignore[list-item]
    for idx in length_groups(data, batch_size):
        batch = make_batch([data[i] for i in idx])
        with torch.no_grad():
            s = model(batch.X, batch.U, batch.P)
            r = rank_positions(s, batch.P)
        for j, i in enumerate(idx):
            scores[i] = s[j].numpy().copy()
            ranks[i] = r[j].numpy().copy()
    return scores, ranks


def evaluate(model: Reranker, data: Dataset, ks=K_VALUES, pooled_auc_mode: bool = False) -> MetricsReport:
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    scores, ranks = predict_lists(model, data)
    return aggregate(scores, ranks, [s.labels for s in data], ks, pooled=pooled_auc_mode)
