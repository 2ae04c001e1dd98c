"""Density-based clustering used to refresh surrogate identity labels.

Classic DBSCAN with a deterministic ordering rule: clusters are connected
components of the core-point adjacency graph, numbered by ascending minimal
core index; a border point joins the cluster of its lowest-index core
neighbour. Points reachable from no core are marked NOISE and excluded from
supervised training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClusteringFailure, ConfigurationError
from .losses import l2_normalize
from .model import ModelParams, forward_batch

NOISE = -1


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 0.45
    min_pts: int = 4
    refresh_period_epochs: int = 2
    distance: str = "euclidean_on_l2_normalized"

    def __post_init__(self):
        if not (self.eps > 0):
            raise ConfigurationError(f"eps must be > 0, got {self.eps}")
        if self.min_pts < 2:
            raise ConfigurationError(f"min_pts must be >= 2, got {self.min_pts}")
        if self.refresh_period_epochs < 1:
            raise ConfigurationError("refresh_period_epochs must be positive")


@dataclass
class LabelAssignment:
    """labels[i] is a global label id, or NOISE. Cluster ids are contiguous
    starting at namespace_offset."""

    labels: np.ndarray
    num_new_clusters: int
    namespace_offset: int


def cluster(points: np.ndarray, cfg: ClusterConfig) -> LabelAssignment:
    """DBSCAN over the given points (Euclidean, neighborhood includes self).

    Raises ClusteringFailure when every point ends up as noise."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    nb = d2 <= cfg.eps ** 2
    core = nb.sum(axis=1) >= cfg.min_pts

    labels = np.full(n, NOISE, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        labels[seed] = next_id
        stack = [seed]
        while stack:
            j = stack.pop()
            for k in np.flatnonzero(nb[j] & core):
                if labels[k] == NOISE:
                    labels[k] = next_id
                    stack.append(int(k))
        next_id += 1

    for i in np.flatnonzero(~core):
        near_cores = np.flatnonzero(nb[i] & core)
        if near_cores.size:
            labels[i] = labels[near_cores[0]]

    if next_id == 0:
        raise ClusteringFailure(
            f"no core points (n={n}, eps={cfg.eps}, min_pts={cfg.min_pts}); "
            "caller should fall back to previous labels"
        )
    return LabelAssignment(labels=labels, num_new_clusters=next_id, namespace_offset=0)


def refresh_labels(stage_x: np.ndarray, params: ModelParams, cfg: ClusterConfig,
                   namespace_offset: int) -> LabelAssignment:
    """Embed the stage's samples with the current model, cluster, and allocate
    fresh global label ids starting at namespace_offset. Ids are never reused:
    each refresh claims a new block, and the classifier must grow to
    namespace_offset + num_new_clusters rows afterwards."""
    emb = forward_batch(params, stage_x)["emb"]
    assign = cluster(l2_normalize(emb), cfg)
    labels = np.where(assign.labels >= 0, assign.labels + namespace_offset, NOISE)
    return LabelAssignment(labels=labels, num_new_clusters=assign.num_new_clusters,
                           namespace_offset=namespace_offset)
