"""Retrieval metrics (CMC Rank-1, mAP) and the three evaluation protocols:
per-stage adaptation, anti-forgetting over past domains, and unseen-domain
generalization.

Ranking uses cosine similarity on embeddings, ties broken by ascending
gallery index, so results are deterministic for a fixed model snapshot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from .data import evaluation_access
from .errors import ProtocolError
from .model import ModelParams, forward_batch
from .stream import RetrievalSplit


@dataclass(frozen=True)
class MetricRecord:
    method: str
    seed: int
    stage: int
    split: str
    rank1: float
    map: float

    def __post_init__(self):
        if not (0.0 <= self.rank1 <= 1.0 and 0.0 <= self.map <= 1.0):
            raise ProtocolError(f"metrics out of [0,1]: {self}")


def _embed(params: ModelParams, samples) -> np.ndarray:
    x = np.stack([s.x for s in samples])
    return forward_batch(params, x)["emb"]


def rank_gallery(params: ModelParams, split: RetrievalSplit) -> np.ndarray:
    """Per-query gallery indices sorted by descending cosine similarity."""
    q = _embed(params, split.queries)
    g = _embed(params, split.gallery)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    sim = qn @ gn.T
    return np.argsort(-sim, axis=1, kind="stable")


def _id_arrays(split: RetrievalSplit):
    with evaluation_access():
        q_ids = np.array([s.true_id for s in split.queries])
        g_ids = np.array([s.true_id for s in split.gallery])
    return q_ids, g_ids


def cmc_rank1(rankings: np.ndarray, split: RetrievalSplit) -> float:
    """Fraction of queries whose top-ranked gallery item shares the identity."""
    q_ids, g_ids = _id_arrays(split)
    return float((g_ids[rankings[:, 0]] == q_ids).mean())


def mean_average_precision(rankings: np.ndarray, split: RetrievalSplit) -> float:
    """Mean over queries of average precision over that query's positives."""
    q_ids, g_ids = _id_arrays(split)
    aps = []
    for qi in range(len(q_ids)):
        rel = g_ids[rankings[qi]] == q_ids[qi]
        n_pos = int(rel.sum())
        if n_pos == 0:
            raise ProtocolError(
                f"query {qi} has no gallery positive (split invariant violated)"
            )
        hits = np.flatnonzero(rel)
        precisions = (np.arange(1, n_pos + 1)) / (hits + 1)
        aps.append(precisions.mean())
    return float(np.mean(aps))


def evaluate_split(params: ModelParams, split: RetrievalSplit):
    rankings = rank_gallery(params, split)
    return cmc_rank1(rankings, split), mean_average_precision(rankings, split)


def evaluate_checkpoint(params: ModelParams, splits: Dict[str, RetrievalSplit],
                        method: str, seed: int, stage: int):
    """One MetricRecord per split, in the splits' given order."""
    records = []
    for name, split in splits.items():
        r1, ap = evaluate_split(params, split)
        records.append(MetricRecord(method, seed, stage, name, r1, ap))
    return records


def run_protocol(checkpoints: Dict[int, ModelParams], splits: Dict[str, RetrievalSplit],
                 protocol: str, method: str, seed: int):
    """Protocols: 'adaptation' tests each stage checkpoint on its own split,
    'anti_forgetting' tests checkpoints on the source and all stage splits,
    'generalization' tests checkpoints on the held-out domain."""
    records = []
    stages = sorted(checkpoints)
    if protocol == "adaptation":
        for t in stages:
            name = f"stage_{t}"
            if name not in splits:
                raise ProtocolError(f"no split for stage {t}")
            records.extend(evaluate_checkpoint(
                checkpoints[t], {name: splits[name]}, method, seed, t))
    elif protocol == "anti_forgetting":
        wanted = {k: v for k, v in splits.items() if k == "source" or k.startswith("stage_")}
        for t in stages:
            records.extend(evaluate_checkpoint(checkpoints[t], wanted, method, seed, t))
    elif protocol == "generalization":
        if "unseen" not in splits:
            raise ProtocolError("generalization protocol needs an 'unseen' split")
        for t in stages:
            records.extend(evaluate_checkpoint(
                checkpoints[t], {"unseen": splits["unseen"]}, method, seed, t))
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    return records


def write_metrics_csv(records: Sequence[MetricRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "seed", "stage", "split", "rank1", "map"])
        for r in records:
            writer.writerow([r.method, r.seed, r.stage, r.split,
                             f"{r.rank1:.10f}", f"{r.map:.10f}"])


def read_metrics_csv(path):
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricRecord(
                method=row["method"], seed=int(row["seed"]), stage=int(row["stage"]),
                split=row["split"], rank1=float(row["rank1"]), map=float(row["map"]),
            ))
    return records
