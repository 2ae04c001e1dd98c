"""Bounded replay memory over past samples.

The main policy runs reservoir sampling at identity granularity: once the
buffer holds its maximum number of identities, a newly offered identity is
admitted with probability capacity/ids_seen and evicts one uniformly chosen
resident identity, so every identity ever offered is retained with equal
probability while slots stay identity-pure and balanced. First-in-first-out
and classic per-sample reservoir variants exist for ablations.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Batch, Sample
from .errors import ConfigurationError, ProtocolError

POLICIES = ("id_rs", "fifo", "instance_rs")


@dataclass(frozen=True)
class BufferEntry:
    """An admitted sample, frozen at storage time (label never rewritten)."""

    x: np.ndarray
    label: int
    domain: str
    stage: int
    index: int

    @classmethod
    def from_sample(cls, s: Sample) -> "BufferEntry":
        if s.assigned_label is None or s.assigned_label < 0:
            raise ProtocolError(
                f"cannot store unlabeled sample stage={s.stage} index={s.index}"
            )
        return cls(x=np.array(s.x, dtype=np.float64), label=int(s.assigned_label),
                   domain=s.domain, stage=s.stage, index=s.index)


class MemoryBuffer:
    """ID-keyed reservoir memory: at most capacity_ids slots of <= per_id_cap
    samples each."""

    policy = "id_rs"

    def __init__(self, capacity_ids: int, per_id_cap: int, seed=0):
        if capacity_ids <= 0 or per_id_cap <= 0:
            raise ConfigurationError("capacity_ids and per_id_cap must be positive")
        self.capacity_ids = int(capacity_ids)
        self.per_id_cap = int(per_id_cap)
        self.slots: dict[int, list[BufferEntry]] = {}
        self.resident_ids: list[int] = []
        self.ids_seen_count = 0
        self.rng = random.Random(seed)
        self.duplicate_merges = 0

    # -- admission -----------------------------------------------------------

    def _subsample(self, entries):
        if len(entries) <= self.per_id_cap:
            return list(entries)
        return self.rng.sample(entries, self.per_id_cap)

    def offer_id(self, id_: int, samples) -> bool:
        """Offer one identity's samples; returns True when admitted/merged."""
        if not samples:
            raise ProtocolError(f"offer for id {id_} carries no samples")
        entries = [s if isinstance(s, BufferEntry) else BufferEntry.from_sample(s)
                   for s in samples]
        if id_ in self.slots:
            self.duplicate_merges += 1
            self.slots[id_] = self._subsample(self.slots[id_] + entries)
            return True
        self.ids_seen_count += 1
        if len(self.resident_ids) < self.capacity_ids:
            self.slots[id_] = self._subsample(entries)
            self.resident_ids.append(id_)
            return True
        if self.rng.random() < self.capacity_ids / self.ids_seen_count:
            victim_pos = self.rng.randrange(self.capacity_ids)
            victim = self.resident_ids[victim_pos]
            del self.slots[victim]
            self.resident_ids[victim_pos] = id_
            self.slots[id_] = self._subsample(entries)
            return True
        return False

    # -- sampling --------------------------------------------------------------

    def sample_old_batch(self, p: int, k: int) -> Optional[Batch]:
        """PK replay batch: p distinct resident identities, k samples each
        (with replacement when a slot is short). None while warming up."""
        if len(self.resident_ids) < p:
            return None
        ids = self.rng.sample(self.resident_ids, p)
        xs, labels = [], []
        for id_ in ids:
            slot = self.slots[id_]
            if len(slot) >= k:
                chosen = self.rng.sample(slot, k)
            else:
                chosen = list(slot) + self.rng.choices(slot, k=k - len(slot))
            for e in chosen:
                xs.append(e.x)
                labels.append(e.label)
        return Batch(np.stack(xs), labels, kind="old")

    # -- bookkeeping -------------------------------------------------------------

    def __len__(self):
        return sum(len(v) for v in self.slots.values())

    @property
    def num_ids(self) -> int:
        return len(self.resident_ids)

    def snapshot(self) -> dict:
        return {
            "policy": self.policy,
            "capacity_ids": self.capacity_ids,
            "per_id_cap": self.per_id_cap,
            "ids_seen_count": self.ids_seen_count,
            "duplicate_merges": self.duplicate_merges,
            "resident_ids": list(self.resident_ids),
            "slots": {
                str(id_): [
                    {"stage": e.stage, "index": e.index, "label": e.label,
                     "domain": e.domain}
                    for e in entries
                ]
                for id_, entries in self.slots.items()
            },
            "rng_state": _encode_rng_state(self.rng.getstate()),
        }

    def save_snapshot(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.snapshot(), f)

    @classmethod
    def restore(cls, snap: dict, sample_lookup):
        """Rebuild a buffer from a snapshot; sample_lookup(stage, index) -> x."""
        policy = snap.get("policy", "id_rs")
        if policy == "instance_rs":
            return InstanceBuffer.restore(snap, sample_lookup)
        buf = make_buffer(policy, snap["capacity_ids"], snap["per_id_cap"], seed=0)
        buf.ids_seen_count = snap["ids_seen_count"]
        buf.duplicate_merges = snap.get("duplicate_merges", 0)
        buf.resident_ids = list(snap["resident_ids"])
        buf.slots = {
            int(id_): [
                BufferEntry(
                    x=np.asarray(sample_lookup(e["stage"], e["index"]), dtype=np.float64),
                    label=e["label"], domain=e["domain"],
                    stage=e["stage"], index=e["index"],
                )
                for e in entries
            ]
            for id_, entries in snap["slots"].items()
        }
        buf.rng.setstate(_decode_rng_state(snap["rng_state"]))
        return buf


class FifoBuffer(MemoryBuffer):
    """Ablation policy: evicts the oldest resident identity when full."""

    policy = "fifo"

    def offer_id(self, id_: int, samples) -> bool:
        if not samples:
            raise ProtocolError(f"offer for id {id_} carries no samples")
        entries = [s if isinstance(s, BufferEntry) else BufferEntry.from_sample(s)
                   for s in samples]
        if id_ in self.slots:
            self.duplicate_merges += 1
            self.slots[id_] = self._subsample(self.slots[id_] + entries)
            return True
        self.ids_seen_count += 1
        if len(self.resident_ids) >= self.capacity_ids:
            oldest = self.resident_ids.pop(0)
            del self.slots[oldest]
        self.slots[id_] = self._subsample(entries)
        self.resident_ids.append(id_)
        return True


class InstanceBuffer(MemoryBuffer):
    """Ablation policy: classic per-sample reservoir ignoring identities.

    Total capacity equals capacity_ids * per_id_cap samples; identity balance
    is not maintained, so slots may end up skewed or singleton.
    """

    policy = "instance_rs"

    def __init__(self, capacity_ids: int, per_id_cap: int, seed=0):
        super().__init__(capacity_ids, per_id_cap, seed)
        self.capacity_samples = self.capacity_ids * self.per_id_cap
        self.entries: list[BufferEntry] = []
        self.samples_seen = 0

    def offer_sample(self, sample) -> bool:
        entry = (sample if isinstance(sample, BufferEntry)
                 else BufferEntry.from_sample(sample))
        self.samples_seen += 1
        if len(self.entries) < self.capacity_samples:
            self.entries.append(entry)
            return True
        j = self.rng.randrange(self.samples_seen)
        if j < self.capacity_samples:
            self.entries[j] = entry
            return True
        return False

    def offer_id(self, id_: int, samples) -> bool:
        if not samples:
            raise ProtocolError(f"offer for id {id_} carries no samples")
        self.ids_seen_count += 1
        admitted = False
        for s in samples:
            admitted |= self.offer_sample(s)
        return admitted

    def _by_label(self):
        groups: dict[int, list[BufferEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.label, []).append(e)
        return groups

    @property
    def num_ids(self) -> int:
        return len(self._by_label())

    def __len__(self):
        return len(self.entries)

    def sample_old_batch(self, p: int, k: int) -> Optional[Batch]:
        groups = self._by_label()
        labels = sorted(groups)
        if len(labels) < p:
            return None
        chosen_labels = self.rng.sample(labels, p)
        xs, out_labels = [], []
        for lab in chosen_labels:
            slot = groups[lab]
            if len(slot) >= k:
                chosen = self.rng.sample(slot, k)
            else:
                chosen = list(slot) + self.rng.choices(slot, k=k - len(slot))
            for e in chosen:
                xs.append(e.x)
                out_labels.append(e.label)
        return Batch(np.stack(xs), out_labels, kind="old")

    def snapshot(self) -> dict:
        snap = {
            "policy": self.policy,
            "capacity_ids": self.capacity_ids,
            "per_id_cap": self.per_id_cap,
            "ids_seen_count": self.ids_seen_count,
            "samples_seen": self.samples_seen,
            "entries": [
                {"stage": e.stage, "index": e.index, "label": e.label,
                 "domain": e.domain}
                for e in self.entries
            ],
            "rng_state": _encode_rng_state(self.rng.getstate()),
        }
        return snap

    @classmethod
    def restore(cls, snap: dict, sample_lookup):
        buf = cls(snap["capacity_ids"], snap["per_id_cap"], seed=0)
        buf.ids_seen_count = snap["ids_seen_count"]
        buf.samples_seen = snap["samples_seen"]
        buf.entries = [
            BufferEntry(
                x=np.asarray(sample_lookup(e["stage"], e["index"]), dtype=np.float64),
                label=e["label"], domain=e["domain"],
                stage=e["stage"], index=e["index"],
            )
            for e in snap["entries"]
        ]
        buf.rng.setstate(_decode_rng_state(snap["rng_state"]))
        return buf


def make_buffer(policy: str, capacity_ids: int, per_id_cap: int, seed=0) -> MemoryBuffer:
    if policy == "id_rs":
        return MemoryBuffer(capacity_ids, per_id_cap, seed)
    if policy == "fifo":
        return FifoBuffer(capacity_ids, per_id_cap, seed)
    if policy == "instance_rs":
        return InstanceBuffer(capacity_ids, per_id_cap, seed)
    raise ConfigurationError(f"unknown memory policy {policy!r}; want one of {POLICIES}")


def _encode_rng_state(state):
    version, internal, gauss = state
    return {"version": version, "internal": list(internal), "gauss": gauss}


def _decode_rng_state(enc):
    return (enc["version"], tuple(enc["internal"]), enc["gauss"])
