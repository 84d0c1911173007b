"""Euclidean retrieval ranking and mean average precision."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class LabeledSample:
    id: int
    label: str
    feature: np.ndarray


@dataclass
class RankedList:
    query_id: int
    ids: list[int]


def _order(dist: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # ascending distance, ties by lower id
    return np.lexsort((ids, dist))


def rank(query: LabeledSample, corpus: list[LabeledSample]) -> RankedList:
    others = [s for s in corpus if s.id != query.id]
    q = np.asarray(query.feature, dtype=np.float64)
    if not others:
        return RankedList(query.id, [])
    feats = np.array([np.asarray(s.feature, dtype=np.float64) for s in others])
    if feats.ndim != 2 or feats.shape[1] != q.size:
        raise ValueError(f"feature dimension mismatch: query has {q.size}, corpus has {feats.shape[1:]}")
    ids = np.array([s.id for s in others])
    dist = ((feats - q) ** 2).sum(axis=1)
    return RankedList(query.id, [int(i) for i in ids[_order(dist, ids)]])


def average_precision(ranked: RankedList, labels: dict) -> float:
    """Mean of precision@p over the positions p holding relevant items."""
    target = labels[ranked.query_id]
    rel = np.array([labels[i] == target for i in ranked.ids], dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError(f"query {ranked.query_id} has no relevant items")
    hits = np.cumsum(rel)
    pos = np.flatnonzero(rel) + 1
    return float((hits[rel] / pos).sum() / n_rel)


def _check_labels(labels) -> None:
    counts = Counter(labels)
    lonely = {k: v for k, v in counts.items() if v < 2}
    if lonely:
        raise ValueError(f"every label needs at least two samples; counts: {dict(counts)}")


def per_query_ap(features, labels, ids=None) -> np.ndarray:
    """AP of every sample used once as the query against all the others."""
    x = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    _check_labels(labels)
    n = x.shape[0]
    ids = np.arange(1, n + 1) if ids is None else np.asarray(ids)
    _, lab = np.unique(np.array(labels, dtype=object).astype(str), return_inverse=True)
    out = np.empty(n)
    for qi in range(n):
        dist = ((x - x[qi]) ** 2).sum(1)
        order = _order(dist, ids)
        order = order[order != qi]
        rel = lab[order] == lab[qi]
        hits = np.cumsum(rel)
        out[qi] = (hits[rel] / (np.flatnonzero(rel) + 1)).sum() / rel.sum()
    return out


def mean_average_precision(samples: list[LabeledSample]) -> float:
    """MAP in percent, every sample acting once as the query."""
    feats = np.array([np.asarray(s.feature, dtype=np.float64) for s in samples])
    return map_score(feats, [s.label for s in samples], [s.id for s in samples])


def map_score(features, labels, ids=None) -> float:
    return float(100.0 * per_query_ap(features, labels, ids).mean())


def write_map_report(path, ids, aps) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "ap"])
        for i, ap in zip(ids, aps):
            w.writerow([int(i), format(float(ap), ".17g")])
        w.writerow(["MAP", format(100.0 * float(np.mean(aps)), ".17g")])
