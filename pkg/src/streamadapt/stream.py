"""Synthetic generative benchmark: labeled source data plus staged target
streams under stationary or dynamic domain schedules, and the PK batch sampler.

Every identity has a Gaussian prototype; a domain is an invertible affine map
(controlled condition number) plus isotropic noise. Stages draw fresh
identities without replacement; a recurring schedule entry reuses the exact
same transform. Generation is a pure function of (config, seed): every block
of identities, every split and every domain has its own derived RNG stream,
so regeneration is bit-identical and order-independent.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Batch, Sample, batch_from_samples, evaluation_access
from .errors import ConfigurationError, ProtocolError

_UNSEEN_BLOCK = 9999


@dataclass(frozen=True)
class DomainSpec:
    name: str
    matrix: np.ndarray
    offset: np.ndarray
    noise_scale: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigurationError(f"domain matrix must be square, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-9:
            raise ConfigurationError(f"domain transform {self.name!r} is not invertible")
        if not (self.noise_scale > 0):
            raise ConfigurationError("noise_scale must be > 0")

    def apply(self, prototypes: np.ndarray) -> np.ndarray:
        return prototypes @ self.matrix.T + self.offset


@dataclass(frozen=True)
class StreamConfig:
    input_dim: int = 32
    num_source_ids: int = 50
    source_samples_per_id: int = 16
    ids_per_stage: int = 20
    samples_per_id: int = 16
    num_stages: int = 5
    scenario: str = "stationary"
    domain_schedule: tuple = ("t0", "t0", "t0", "t0", "t0")
    seed: int = 1
    query_per_id: int = 2
    gallery_per_id: int = 4
    prototype_scale: float = 1.0
    source_noise: float = 0.35
    target_noise: float = 0.35
    transform_cond_max: float = 4.0
    offset_scale: float = 0.6

    def __post_init__(self):
        if self.scenario not in ("stationary", "dynamic"):
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if len(self.domain_schedule) != self.num_stages:
            raise ConfigurationError(
                f"schedule length {len(self.domain_schedule)} != num_stages {self.num_stages}"
            )
        if self.scenario == "stationary" and len(set(self.domain_schedule)) != 1:
            raise ConfigurationError("stationary scenario needs a constant schedule")
        if "source" in self.domain_schedule or "unseen" in self.domain_schedule:
            raise ConfigurationError("schedule may not reuse the source/unseen domains")


@dataclass
class RetrievalSplit:
    """Query/gallery pools over disjoint instances of the same identities."""

    name: str
    queries: list = field(default_factory=list)
    gallery: list = field(default_factory=list)

    def __post_init__(self):
        if not self.queries or not self.gallery:
            raise ProtocolError(f"split {self.name!r} needs queries and gallery")
        keys = {(s.stage, s.index, s.domain) for s in self.queries}
        if any((s.stage, s.index, s.domain) in keys for s in self.gallery):
            raise ProtocolError(f"split {self.name!r}: query instance found in gallery")
        with evaluation_access():
            gallery_ids = {s.true_id for s in self.gallery}
            for q in self.queries:
                if q.true_id not in gallery_ids:
                    raise ProtocolError(
                        f"split {self.name!r}: query id {q.true_id} has no gallery positive"
                    )


@dataclass
class StageStream:
    """One stage's unlabeled training split plus its held-out retrieval split."""

    stage: int
    domain: str
    samples: list
    split: RetrievalSplit


def _orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _make_domain(name, seed_key, dim, cond_max, offset_scale, noise_scale) -> DomainSpec:
    if name == "source":
        return DomainSpec(name, np.eye(dim), np.zeros(dim), noise_scale)
    rng = np.random.default_rng(seed_key)
    lo = 1.0 / np.sqrt(cond_max)
    s = rng.uniform(lo, lo * cond_max, size=dim)
    matrix = _orthogonal(rng, dim) @ np.diag(s) @ _orthogonal(rng, dim)
    offset = offset_scale * rng.standard_normal(dim)
    return DomainSpec(name, matrix, offset, noise_scale)


class SyntheticStream:
    """Deterministic generator for the source set, staged target splits and
    the held-out (never trained) domain."""

    def __init__(self, cfg: StreamConfig):
        self.cfg = cfg
        names = ["source", "unseen"] + sorted(set(cfg.domain_schedule))
        self.domains = {}
        for i, name in enumerate(sorted(names)):
            noise = cfg.source_noise if name == "source" else cfg.target_noise
            self.domains[name] = _make_domain(
                name, [cfg.seed, 77, i], cfg.input_dim,
                cfg.transform_cond_max, cfg.offset_scale, noise,
            )

    # -- identity blocks -----------------------------------------------------

    def _prototypes(self, block: int, count: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 50, block])
        return self.cfg.prototype_scale * rng.standard_normal((count, self.cfg.input_dim))

    def stage_id_range(self, t: int):
        base = self.cfg.num_source_ids + (t - 1) * self.cfg.ids_per_stage
        return range(base, base + self.cfg.ids_per_stage)

    def unseen_id_range(self):
        base = self.cfg.num_source_ids + self.cfg.num_stages * self.cfg.ids_per_stage
        return range(base, base + self.cfg.ids_per_stage)

    # -- generation -------------------------------------------------------------

    def _draw(self, prototypes, ids, domain: DomainSpec, rng, per_id, stage,
              start_index, labeled):
        centers = domain.apply(prototypes)
        samples = []
        idx = start_index
        for row, true_id in enumerate(ids):
            noise = domain.noise_scale * rng.standard_normal((per_id, self.cfg.input_dim))
            for j in range(per_id):
                samples.append(Sample(
                    x=centers[row] + noise[j],
                    true_id=true_id,
                    domain=domain.name,
                    stage=stage,
                    index=idx,
                    assigned_label=true_id if labeled else None,
                ))
                idx += 1
        return samples

    def _split(self, name, prototypes, ids, domain, rng, stage, start_index):
        cfg = self.cfg
        queries = self._draw(prototypes, ids, domain, rng, cfg.query_per_id,
                             stage, start_index, labeled=False)
        gallery = self._draw(prototypes, ids, domain, rng, cfg.gallery_per_id,
                             stage, start_index + len(queries), labeled=False)
        return RetrievalSplit(name=name, queries=queries, gallery=gallery)

    def source_train(self) -> list:
        cfg = self.cfg
        protos = self._prototypes(0, cfg.num_source_ids)
        rng = np.random.default_rng([cfg.seed, 101, 0])
        return self._draw(protos, range(cfg.num_source_ids), self.domains["source"],
                          rng, cfg.source_samples_per_id, stage=0, start_index=0,
                          labeled=True)

    def source_split(self) -> RetrievalSplit:
        cfg = self.cfg
        protos = self._prototypes(0, cfg.num_source_ids)
        rng = np.random.default_rng([cfg.seed, 102, 0])
        start = cfg.num_source_ids * cfg.source_samples_per_id
        return self._split("source", protos, range(cfg.num_source_ids),
                           self.domains["source"], rng, stage=0, start_index=start)

    def generate_stage(self, t: int) -> StageStream:
        cfg = self.cfg
        if not (1 <= t <= cfg.num_stages):
            raise ProtocolError(f"stage {t} outside 1..{cfg.num_stages}")
        domain = self.domains[cfg.domain_schedule[t - 1]]
        ids = self.stage_id_range(t)
        protos = self._prototypes(t, cfg.ids_per_stage)
        rng_train = np.random.default_rng([cfg.seed, 101, t])
        rng_test = np.random.default_rng([cfg.seed, 102, t])
        samples = self._draw(protos, ids, domain, rng_train, cfg.samples_per_id,
                             stage=t, start_index=0, labeled=False)
        split = self._split(f"stage_{t}", protos, ids, domain, rng_test,
                            stage=t, start_index=len(samples))
        return StageStream(stage=t, domain=domain.name, samples=samples, split=split)

    def unseen_split(self) -> RetrievalSplit:
        cfg = self.cfg
        protos = self._prototypes(_UNSEEN_BLOCK, cfg.ids_per_stage)
        rng = np.random.default_rng([cfg.seed, 102, _UNSEEN_BLOCK])
        return self._split("unseen", protos, self.unseen_id_range(),
                           self.domains["unseen"], rng,
                           stage=cfg.num_stages + 1, start_index=0)

    def all_splits(self) -> dict:
        splits = {"source": self.source_split()}
        for t in range(1, self.cfg.num_stages + 1):
            splits[f"stage_{t}"] = self.generate_stage(t).split
        splits["unseen"] = self.unseen_split()
        return splits

    def sample_x(self, stage: int, index: int) -> np.ndarray:
        """Regenerate one training sample's input vector (buffer restore)."""
        if stage == 0:
            pool = self.source_train()
        else:
            pool = self.generate_stage(stage).samples
        return pool[index].x


def sample_pk_batch(samples: Sequence[Sample], p: int, k: int,
                    rng: random.Random) -> Batch:
    """P distinct labels uniformly without replacement, K instances each
    (with replacement if a label is short). Noise/unlabeled samples excluded."""
    by_label: dict[int, list[Sample]] = {}
    for s in samples:
        if s.assigned_label is None or s.assigned_label < 0:
            continue
        by_label.setdefault(s.assigned_label, []).append(s)
    labels = sorted(by_label)
    if len(labels) < p:
        raise ProtocolError(
            f"only {len(labels)} usable labels, need {p}; refresh clustering"
        )
    chosen = rng.sample(labels, p)
    picked = []
    for lab in chosen:
        slot = by_label[lab]
        if len(slot) >= k:
            picked.extend(rng.sample(slot, k))
        else:
            picked.extend(list(slot) + rng.choices(slot, k=k - len(slot)))
    return batch_from_samples(picked, kind="new")


def export_samples_csv(samples: Sequence[Sample], path) -> None:
    """Inspection artifact: one row per sample with ground truth and features."""
    with evaluation_access(), open(path, "w", newline="") as f:
        writer = csv.writer(f)
        dim = len(samples[0].x) if samples else 0
        writer.writerow(["stage", "domain", "true_id", "index", "assigned_label"]
                        + [f"x{i}" for i in range(dim)])
        for s in samples:
            label = "" if s.assigned_label is None else s.assigned_label
            writer.writerow([s.stage, s.domain, s.true_id, s.index, label]
                            + [f"{v:.10f}" for v in s.x])
