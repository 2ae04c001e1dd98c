"""Loss surface: batch-hard triplet, cross-entropy, affinity and KL consistency,
and the adaptation / anti-forgetting composites used by the replay optimizer.

Every loss comes with an exact gradient with respect to the current model's
embeddings/logits; the historical model is a teacher, so no gradient ever
flows into its outputs. Composites are strict sums of their parts: one code
path computes the parts, the composite only adds them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Batch
from .errors import NumericError, ProtocolError
from .model import ModelParams, backward_batch, forward_batch

_PROB_FLOOR = 1e-12


# -- small numeric helpers ---------------------------------------------------


def l2_normalize(emb: np.ndarray) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise NumericError(f"zero-norm embedding at sample index {int(bad[0])}")
    return emb / norms[:, None]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    source_model: str = "current"


def affinity_matrix(embeddings: np.ndarray, source_model: str = "current") -> AffinityMatrix:
    """Pairwise cosine similarities of a batch of embeddings."""
    u = l2_normalize(embeddings)
    return AffinityMatrix(u @ u.T, source_model)


# -- triplet -----------------------------------------------------------------


def _batch_hard(embeddings, labels, margin):
    """Hardest-positive / hardest-negative mining on L2-normalized embeddings.

    Returns (per-anchor hinge terms, distances, pos index, neg index, U, norms).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms < 1e-12):
        raise NumericError("zero-norm embedding in triplet batch")
    u = emb / norms[:, None]
    sim = u @ u.T
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sim))

    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    missing_pos = np.flatnonzero(~pos_mask.any(axis=1))
    if missing_pos.size:
        raise ProtocolError(
            f"label {int(labels[missing_pos[0]])} has a single instance; "
            "PK sampling should guarantee >=2"
        )
    if not neg_mask.all(axis=1).any() and not neg_mask.any():
        raise ProtocolError("batch holds a single label; no negatives exist")
    if np.any(~neg_mask.any(axis=1)):
        raise ProtocolError("an anchor has no negative in the batch")

    d_pos = np.where(pos_mask, dist, -np.inf)
    d_neg = np.where(neg_mask, dist, np.inf)
    pos_idx = d_pos.argmax(axis=1)
    neg_idx = d_neg.argmin(axis=1)
    per_anchor = np.maximum(
        0.0, dist[np.arange(n), pos_idx] - dist[np.arange(n), neg_idx] + margin
    )
    return per_anchor, dist, pos_idx, neg_idx, u, norms


def triplet_loss(embeddings, labels, margin: float = 0.3) -> float:
    """Batch-hard triplet loss: mean over anchors of
    max(0, d(a, hardest positive) - d(a, hardest negative) + margin)."""
    per_anchor, *_ = _batch_hard(embeddings, labels, margin)
    return float(per_anchor.mean())


def triplet_loss_grad(embeddings, labels, margin: float = 0.3):
    """(value, gradient wrt raw embeddings)."""
    per_anchor, dist, pos_idx, neg_idx, u, norms = _batch_hard(embeddings, labels, margin)
    n = len(per_anchor)
    du = np.zeros_like(u)
    coef = 1.0 / n
    for i in np.flatnonzero(per_anchor > 0.0):
        for j, sign in ((pos_idx[i], coef), (neg_idx[i], -coef)):
            d = dist[i, j]
            if d < 1e-12:
                continue  # coincident pair: distance subgradient taken as 0
            g = sign * (u[i] - u[j]) / d
            du[i] += g
            du[j] -= g
    proj = (du * u).sum(axis=1, keepdims=True)
    d_emb = (du - proj * u) / norms[:, None]
    return float(per_anchor.mean()), d_emb


# -- cross-entropy -----------------------------------------------------------


def classification_loss(logits, labels) -> float:
    """Mean negative log softmax probability of the true label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ProtocolError(
            f"label {int(labels.max())} outside class range {logits.shape[1]} "
            "(label namespace out of sync)"
        )
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def classification_loss_grad(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ProtocolError(
            f"label {int(labels.max())} outside class range {logits.shape[1]} "
            "(label namespace out of sync)"
        )
    logp = log_softmax(logits)
    n = logits.shape[0]
    p = np.exp(logp)
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(-logp[np.arange(n), labels].mean()), d / n


# -- consistency to the historical model --------------------------------------


def _rel_pair_term(emb_cur, emb_hist, normalize_pairs):
    """Per-batch affinity matching: sum over unordered pairs of squared
    cosine-affinity differences. Returns (value, grad wrt raw current emb)."""
    norms = np.linalg.norm(np.asarray(emb_cur, dtype=np.float64), axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise NumericError(f"zero-norm embedding at sample index {int(bad[0])}")
    ua = np.asarray(emb_cur, dtype=np.float64) / norms[:, None]
    ub = l2_normalize(emb_hist)
    delta = ua @ ua.T - ub @ ub.T
    np.fill_diagonal(delta, 0.0)
    n = ua.shape[0]
    npairs = n * (n - 1) // 2
    scale = 1.0 / npairs if (normalize_pairs and npairs > 0) else 1.0
    value = 0.5 * float((delta ** 2).sum()) * scale
    dua = 2.0 * scale * delta @ ua
    proj = (dua * ua).sum(axis=1, keepdims=True)
    d_emb = (dua - proj * ua) / norms[:, None]
    return value, d_emb


def relational_consistency_loss(
    batch_new_cur,
    batch_new_hist,
    batch_old_cur,
    batch_old_hist,
    normalize_pairs: bool = False,
) -> float:
    """Affinity-consistency between current and historical models, computed
    per batch (new and old separately) and summed. Pass None to skip a batch."""
    total = 0.0
    for cur, hist in ((batch_new_cur, batch_new_hist), (batch_old_cur, batch_old_hist)):
        if cur is None:
            continue
        if hist is None or len(cur) != len(hist):
            raise ProtocolError("paired embedding lists must have equal lengths")
        value, _ = _rel_pair_term(cur, hist, normalize_pairs)
        total += value
    return float(total)


def kl_consistency_loss(logits_cur, logits_hist) -> float:
    """Mean KL(softmax(current) || softmax(historical)) over the given samples."""
    value, _ = kl_consistency_loss_grad(logits_cur, logits_hist)
    return value


def kl_consistency_loss_grad(logits_cur, logits_hist):
    lc = np.asarray(logits_cur, dtype=np.float64)
    lh = np.asarray(logits_hist, dtype=np.float64)
    if lc.shape != lh.shape:
        raise ProtocolError(
            f"class-count mismatch {lc.shape} vs {lh.shape}: grow_classifier "
            "did not run on the historical model"
        )
    logp = np.maximum(log_softmax(lc), np.log(_PROB_FLOOR))
    logq = np.maximum(log_softmax(lh), np.log(_PROB_FLOOR))
    p = np.exp(log_softmax(lc))
    a = logp - logq
    per_sample = (p * a).sum(axis=1)
    n = lc.shape[0]
    d = p * (a - per_sample[:, None]) / n
    return float(per_sample.mean()), d


# -- composites ---------------------------------------------------------------


@dataclass(frozen=True)
class LossPlan:
    """Which terms are active and where the distillation terms sit.

    kd_new_in_antif / kd_old_in_antif place consistency terms inside the
    anti-forgetting objective; kd_new_in_adap moves the new-batch consistency
    into the adaptation objective instead (the data-split ablation).
    """

    margin: float = 0.3
    normalize_rel_pairs: bool = False
    use_kl: bool = False
    use_rel: bool = False
    kd_new_in_antif: bool = True
    kd_old_in_antif: bool = True
    kd_new_in_adap: bool = False
    kl_new_in_antif: bool = True

    @classmethod
    def for_placement(cls, use_kl, use_rel, meta_test_data="union",
                      margin=0.3, normalize_rel_pairs=False, kl_old_only=False):
        if meta_test_data not in ("union", "old_only", "new_only", "data_split"):
            raise ProtocolError(f"unknown meta_test_data {meta_test_data!r}")
        kd_new_antif = meta_test_data in ("union", "new_only")
        kd_old_antif = meta_test_data in ("union", "old_only", "data_split")
        return cls(
            margin=margin,
            normalize_rel_pairs=normalize_rel_pairs,
            use_kl=use_kl,
            use_rel=use_rel,
            kd_new_in_antif=kd_new_antif,
            kd_old_in_antif=kd_old_antif,
            kd_new_in_adap=meta_test_data == "data_split",
            # kl_old_only is the narrow reading of the distillation index set
            kl_new_in_antif=kd_new_antif and not kl_old_only,
        )

    @property
    def needs_teacher(self) -> bool:
        return self.use_kl or self.use_rel


@dataclass
class TeacherOutputs:
    """Historical-model outputs for the two batches of one step (constants)."""

    new_emb: Optional[np.ndarray] = None
    new_logits: Optional[np.ndarray] = None
    old_emb: Optional[np.ndarray] = None
    old_logits: Optional[np.ndarray] = None


def teacher_outputs(hist: ModelParams, new_batch: Optional[Batch],
                    old_batch: Optional[Batch]) -> TeacherOutputs:
    out = TeacherOutputs()
    if new_batch is not None:
        cache = forward_batch(hist, new_batch.x)
        out.new_emb, out.new_logits = cache["emb"], cache["logits"]
    if old_batch is not None:
        cache = forward_batch(hist, old_batch.x)
        out.old_emb, out.old_logits = cache["emb"], cache["logits"]
    return out


@dataclass
class LossReport:
    """Per-step loss values; composites are exact sums of their parts."""

    l_tri: float = 0.0
    l_cls: float = 0.0
    l_rel: float = 0.0
    l_kl: float = 0.0
    l_tri_old: float = 0.0
    l_cls_old: float = 0.0
    l_adap: float = 0.0
    l_antif: float = 0.0
    gradients: dict = field(default_factory=dict)

    @classmethod
    def from_parts(cls, adap_parts, antif_parts, gradients=None):
        a = adap_parts or {}
        f = antif_parts or {}
        rep = cls(
            l_tri=a.get("tri", 0.0),
            l_cls=a.get("cls", 0.0),
            l_rel=a.get("rel", 0.0) + f.get("rel", 0.0),
            l_kl=a.get("kl", 0.0) + f.get("kl", 0.0),
            l_tri_old=f.get("tri", 0.0),
            l_cls_old=f.get("cls", 0.0),
            l_adap=sum(a.values()),
            l_antif=sum(f.values()),
            gradients=gradients or {},
        )
        return rep


def _require_labels(batch: Batch, what: str):
    if np.any(batch.labels < 0):
        raise ProtocolError(f"{what} batch contains unlabeled (noise) samples")


def adaptation_terms(params: ModelParams, new_batch: Batch, plan: LossPlan,
                     teacher: Optional[TeacherOutputs] = None, with_grad: bool = True):
    """Adaptation objective on the new batch: triplet + cross-entropy
    (+ new-batch consistency in the data-split placement).

    Returns (parts dict, flat gradient or None)."""
    if new_batch.kind != "new":
        raise ProtocolError(f"adaptation expects a 'new' batch, got {new_batch.kind!r}")
    _require_labels(new_batch, "new")
    cache = forward_batch(params, new_batch.x)
    parts = {}
    d_emb = np.zeros_like(cache["emb"])
    d_log = np.zeros_like(cache["logits"])

    tri, d_tri = triplet_loss_grad(cache["emb"], new_batch.labels, plan.margin)
    cls, d_cls = classification_loss_grad(cache["logits"], new_batch.labels)
    parts["tri"], parts["cls"] = tri, cls
    d_emb += d_tri
    d_log += d_cls

    if plan.kd_new_in_adap and plan.needs_teacher:
        if teacher is None or teacher.new_emb is None:
            raise ProtocolError("data-split placement needs teacher outputs for the new batch")
        if plan.use_rel:
            v, g = _rel_pair_term(cache["emb"], teacher.new_emb, plan.normalize_rel_pairs)
            parts["rel"] = v
            d_emb += g
        if plan.use_kl:
            v, g = kl_consistency_loss_grad(cache["logits"], teacher.new_logits)
            parts["kl"] = v
            d_log += g

    grad = backward_batch(params, cache, d_emb, d_log) if with_grad else None
    return parts, grad


def antiforgetting_terms(params: ModelParams, new_batch: Optional[Batch],
                         old_batch: Optional[Batch], teacher: Optional[TeacherOutputs],
                         plan: LossPlan, with_grad: bool = True):
    """Anti-forgetting objective: replayed triplet + cross-entropy on the old
    batch, plus consistency terms to the historical model per the placement.

    Returns (parts dict, flat gradient or None)."""
    if old_batch is None:
        raise ProtocolError(
            "replay memory produced no old batch; run adaptation-only warm-up steps"
        )
    if old_batch.kind != "old":
        raise ProtocolError(f"anti-forgetting expects an 'old' batch, got {old_batch.kind!r}")
    _require_labels(old_batch, "old")
    cache_old = forward_batch(params, old_batch.x)
    parts = {}
    d_emb_old = np.zeros_like(cache_old["emb"])
    d_log_old = np.zeros_like(cache_old["logits"])

    tri, d_tri = triplet_loss_grad(cache_old["emb"], old_batch.labels, plan.margin)
    cls, d_cls = classification_loss_grad(cache_old["logits"], old_batch.labels)
    parts["tri"], parts["cls"] = tri, cls
    d_emb_old += d_tri
    d_log_old += d_cls

    rel_on_new = plan.use_rel and plan.kd_new_in_antif and new_batch is not None
    kl_on_new = plan.use_kl and plan.kl_new_in_antif and new_batch is not None
    rel_on_old = plan.use_rel and plan.kd_old_in_antif
    kl_on_old = plan.use_kl and plan.kd_old_in_antif

    cache_new = None
    d_emb_new = d_log_new = None
    if rel_on_new or kl_on_new:
        cache_new = forward_batch(params, new_batch.x)
        d_emb_new = np.zeros_like(cache_new["emb"])
        d_log_new = np.zeros_like(cache_new["logits"])

    if plan.needs_teacher and (rel_on_new or kl_on_new or rel_on_old or kl_on_old):
        if teacher is None:
            raise ProtocolError("consistency terms need historical-model outputs")

    if plan.use_rel:
        rel_total = 0.0
        if rel_on_new:
            v, g = _rel_pair_term(cache_new["emb"], teacher.new_emb, plan.normalize_rel_pairs)
            rel_total += v
            d_emb_new += g
        if rel_on_old:
            v, g = _rel_pair_term(cache_old["emb"], teacher.old_emb, plan.normalize_rel_pairs)
            rel_total += v
            d_emb_old += g
        parts["rel"] = rel_total

    if plan.use_kl:
        cur_blocks, hist_blocks, sinks = [], [], []
        if kl_on_new:
            cur_blocks.append(cache_new["logits"])
            hist_blocks.append(teacher.new_logits)
            sinks.append(("new", len(cache_new["logits"])))
        if kl_on_old:
            cur_blocks.append(cache_old["logits"])
            hist_blocks.append(teacher.old_logits)
            sinks.append(("old", len(cache_old["logits"])))
        if cur_blocks:
            v, g = kl_consistency_loss_grad(np.vstack(cur_blocks), np.vstack(hist_blocks))
            parts["kl"] = v
            off = 0
            for name, count in sinks:
                block = g[off:off + count]
                if name == "new":
                    d_log_new += block
                else:
                    d_log_old += block
                off += count
        else:
            parts["kl"] = 0.0

    grad = None
    if with_grad:
        grad = backward_batch(params, cache_old, d_emb_old, d_log_old)
        if cache_new is not None:
            grad = grad + backward_batch(params, cache_new, d_emb_new, d_log_new)
    return parts, grad


def adaptation_loss(params: ModelParams, new_batch: Batch, plan: LossPlan,
                    teacher: Optional[TeacherOutputs] = None) -> float:
    parts, _ = adaptation_terms(params, new_batch, plan, teacher, with_grad=False)
    return float(sum(parts.values()))


def antiforgetting_loss(params: ModelParams, new_batch, old_batch, teacher,
                        plan: LossPlan) -> float:
    parts, _ = antiforgetting_terms(params, new_batch, old_batch, teacher, plan,
                                    with_grad=False)
    return float(sum(parts.values()))
