"""Sample and batch containers plus the evaluation-only gate for ground truth.

Training code must never branch on a sample's true identity. The attribute is
readable only inside an ``evaluation_access()`` block, which the retrieval
metrics (and the CSV inspection exporter) use.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np

from .errors import ProtocolError

_GATE_DEPTH = 0


@contextlib.contextmanager
def evaluation_access():
    """Allow reading ``Sample.true_id`` inside the block."""
    global _GATE_DEPTH
    _GATE_DEPTH += 1
    try:
        yield
    finally:
        _GATE_DEPTH -= 1


def gate_open() -> bool:
    return _GATE_DEPTH > 0


class Sample:
    """One observation: input vector plus bookkeeping.

    ``true_id`` is generative ground truth, gated to evaluation code.
    Training reads ``assigned_label`` only (a global label-namespace id,
    or None before labelling / a negative noise marker after clustering).
    """

    __slots__ = ("x", "domain", "stage", "index", "assigned_label", "_true_id")

    def __init__(self, x, true_id, domain, stage, index, assigned_label=None):
        self.x = np.asarray(x, dtype=np.float64)
        self._true_id = int(true_id)
        self.domain = domain
        self.stage = int(stage)
        self.index = int(index)
        self.assigned_label = assigned_label

    @property
    def true_id(self) -> int:
        if not gate_open():
            raise ProtocolError(
                "true_id is evaluation-only; wrap access in evaluation_access()"
            )
        return self._true_id

    def __repr__(self):
        return f"Sample(stage={self.stage}, index={self.index}, domain={self.domain!r})"


class Batch:
    """A stacked training batch; kind is 'new' (current stream) or 'old' (replay)."""

    __slots__ = ("x", "labels", "kind")

    def __init__(self, x, labels, kind):
        if kind not in ("new", "old"):
            raise ProtocolError(f"unknown batch kind {kind!r}")
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.x.ndim != 2 or self.labels.shape[0] != self.x.shape[0]:
            raise ProtocolError("batch inputs and labels disagree in length")
        if self.labels.shape[0] == 0:
            raise ProtocolError("empty batch")
        self.kind = kind

    def __len__(self):
        return self.x.shape[0]


def batch_from_samples(samples: Iterable[Sample], kind: str) -> Batch:
    samples = list(samples)
    labels = []
    for s in samples:
        if s.assigned_label is None or s.assigned_label < 0:
            raise ProtocolError(
                f"sample stage={s.stage} index={s.index} has no usable label"
            )
        labels.append(s.assigned_label)
    return Batch(np.stack([s.x for s in samples]), labels, kind)
