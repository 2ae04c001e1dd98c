"""Training engine: source pre-training and the staged adaptation loop.

Per stage: refresh pseudo labels every few epochs (growing the classifier for
each fresh block of cluster ids), take method-gated optimizer steps, store the
stage's samples in the replay memory at the stage end, checkpoint, and
evaluate on every split. All randomness is derived from the run seed, so a
(config, seed, method) triple determines every output byte.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import NOISE, refresh_labels
from .config import RunConfig
from .errors import ClusteringFailure, ConfigurationError, ProtocolError
from .evaluation import MetricRecord, evaluate_checkpoint, write_metrics_csv
from .losses import LossPlan
from .memory import make_buffer
from .model import ModelParams, ema_update, grow_classifier, save_checkpoint
from .optim import OptimizerState, adaptation_step, joint_step, meta_step
from .stream import SyntheticStream, sample_pk_batch


@dataclass(frozen=True)
class MethodSpec:
    """Resolved behavior of one ablation-ladder entry."""

    label: str
    base: str
    uses_buffer: bool
    uses_meta: bool
    uses_hist: bool
    use_kl: bool
    use_rel: bool
    memory_policy: str
    union_training: bool = False


def resolve_method(method: str, memory_policy: str = "id_rs",
                   distill: str = "method_default") -> MethodSpec:
    base_flags = {
        # method: (buffer, meta, hist, kl, rel)
        "stagewise": (False, False, False, False, False),
        "replay_joint": (True, False, False, False, False),
        "cdr": (True, True, False, False, False),
        "cdr_kl": (True, True, True, True, False),
        "cdr_rcl": (True, True, True, True, True),
        "all_in_one": (False, False, False, False, False),
    }
    if method not in base_flags:
        raise ConfigurationError(f"unknown method {method!r}")
    buffer_, meta, hist, kl, rel = base_flags[method]
    label = method
    if distill != "method_default":
        if not meta:
            raise ConfigurationError(f"distill toggle needs a meta method, got {method!r}")
        kl, rel = {
            "none": (False, False),
            "only_kl": (True, False),
            "only_rel": (False, True),
            "both": (True, True),
        }[distill]
        hist = kl or rel
        label = f"{method}_{distill}"
    if buffer_ and memory_policy != "id_rs":
        label = f"{label}_{memory_policy}"
    return MethodSpec(
        label=label, base=method, uses_buffer=buffer_, uses_meta=meta,
        uses_hist=hist, use_kl=kl, use_rel=rel, memory_policy=memory_policy,
        union_training=method == "all_in_one",
    )


def build_plan(cfg: RunConfig, spec: MethodSpec) -> LossPlan:
    return LossPlan.for_placement(
        use_kl=spec.use_kl,
        use_rel=spec.use_rel,
        meta_test_data=cfg.optim.meta_test_data,
        margin=cfg.triplet_margin,
        normalize_rel_pairs=cfg.normalize_rel_pairs,
        kl_old_only=cfg.kl_old_only,
    )


@dataclass
class RunResult:
    records: list
    diagnostics: list
    checkpoints: dict
    events: list


def _steps_per_epoch(n_samples: int, p: int, k: int) -> int:
    return max(1, round(n_samples / (p * k)))


def pretrain_source(cfg: RunConfig, seed: int, stream: Optional[SyntheticStream] = None):
    """Supervised pre-training on the labeled source set (true ids as classes).

    Returns (params, records): the checkpoint and its evaluation on every split."""
    stream = stream or SyntheticStream(cfg.stream_config(seed))
    source = stream.source_train()
    n_classes = cfg.stream["num_source_ids"]
    params = ModelParams.init(cfg.model, n_classes, seed=[seed, 11])
    state = OptimizerState.zeros(params.size)
    rng = random.Random(f"{seed}:pretrain")
    plan = LossPlan(margin=cfg.triplet_margin)
    opt = replace(cfg.optim, outer_lr=cfg.pretrain_lr)
    steps = _steps_per_epoch(len(source), cfg.batch_p, cfg.batch_k)
    for _ in range(cfg.pretrain_epochs):
        for _ in range(steps):
            batch = sample_pk_batch(source, cfg.batch_p, cfg.batch_k, rng)
            params, _, _ = adaptation_step(params, batch, opt, state, plan)
    records = evaluate_checkpoint(params, stream.all_splits(), "pretrained", seed, 0)
    return params, records


class LudaRunner:
    """Runs one (method, seed) adaptation pass over the staged target stream."""

    def __init__(self, cfg: RunConfig, seed: int, spec: MethodSpec,
                 source_params: ModelParams,
                 stream: Optional[SyntheticStream] = None):
        self.cfg = cfg
        self.seed = seed
        self.spec = spec
        self.stream = stream or SyntheticStream(cfg.stream_config(seed))
        self.plan = build_plan(cfg, spec)
        self.params = source_params.copy()
        self.hist = source_params.copy() if spec.uses_hist else None
        self.buffer = (make_buffer(spec.memory_policy, cfg.capacity_ids,
                                   cfg.per_id_cap, seed=f"{seed}:buffer")
                       if spec.uses_buffer else None)
        self.batch_rng = random.Random(f"{seed}:batches")
        self.growth_rng = np.random.default_rng([seed, 13])
        self.num_classes = source_params.num_classes
        self.diagnostics = []
        self.events = []
        self.stage_samples = {}
        self.global_step = 0

    # -- pieces ---------------------------------------------------------------

    def _seed_buffer_with_source(self):
        by_id = {}
        for s in self.stream.source_train():
            by_id.setdefault(s.assigned_label, []).append(s)
        for label in sorted(by_id):
            self.buffer.offer_id(label, by_id[label])

    def _store_stage(self, samples, stage):
        by_label = {}
        for s in samples:
            if s.assigned_label is None or s.assigned_label < 0:
                continue
            by_label.setdefault(s.assigned_label, []).append(s)
        for label in sorted(by_label):
            self.buffer.offer_id(label, by_label[label])
        self.events.append({"type": "event", "stage": stage, "event": "buffer_update",
                            "resident_ids": self.buffer.num_ids,
                            "stored_samples": len(self.buffer)})

    # a refresh is usable only if it yields enough clusters for PK batches;
    # the configured eps is tried alongside a fixed rescale ladder and the
    # usable assignment covering the most samples wins (noise shrinks the
    # effective training set); with no usable assignment, fall back to the
    # previous one
    _EPS_SCALES = (0.65, 0.8, 1.0, 1.25, 1.5, 1.75)

    def _refresh(self, samples, stage, epoch):
        x = np.stack([s.x for s in samples])
        assign = None
        used_scale = None
        best_usable = -1
        for scale in self._EPS_SCALES:
            ccfg = replace(self.cfg.cluster, eps=self.cfg.cluster.eps * scale)
            try:
                cand = refresh_labels(x, self.params, ccfg, self.num_classes)
            except ClusteringFailure:
                continue
            if cand.num_new_clusters < self.cfg.batch_p:
                continue
            usable = int((cand.labels >= 0).sum())
            if usable > best_usable:
                assign, used_scale, best_usable = cand, scale, usable
        if assign is None:
            have_labels = any(s.assigned_label is not None for s in samples)
            self.events.append({"type": "event", "stage": stage, "epoch": epoch,
                                "event": "clustering_failure"})
            if have_labels:
                return  # keep the previous assignment
            raise ClusteringFailure(
                f"stage {stage}: no eps rescale produced >= {self.cfg.batch_p} clusters"
            )
        if used_scale != 1.0:
            self.events.append({"type": "event", "stage": stage, "epoch": epoch,
                                "event": "eps_rescale", "scale": used_scale})
        for s, lab in zip(samples, assign.labels):
            s.assigned_label = int(lab) if lab != NOISE else NOISE
        new_total = self.num_classes + assign.num_new_clusters
        old_params = self.params
        self.params, self.hist = grow_classifier(self.params, self.hist, new_total,
                                                 self.growth_rng)
        self.state = self.state.grown(old_params, self.params)
        self.num_classes = new_total
        self.events.append({"type": "event", "stage": stage, "epoch": epoch,
                            "event": "label_refresh",
                            "clusters": assign.num_new_clusters,
                            "num_classes": new_total})

    def _step(self, stage, new_batch):
        cfg = self.cfg
        opt = replace(cfg.optim, mode=self.spec.base if self.spec.base != "all_in_one"
                      else "stagewise")
        old_batch = None
        if self.spec.uses_buffer:
            old_batch = self.buffer.sample_old_batch(cfg.batch_p, cfg.batch_k)
        if not self.spec.uses_buffer:
            new_params, report, diag = adaptation_step(self.params, new_batch, opt,
                                                       self.state, self.plan)
        elif self.spec.uses_meta:
            new_params, report, diag = meta_step(self.params, self.hist, new_batch,
                                                 old_batch, opt, self.state, self.plan)
        else:
            new_params, report, diag = joint_step(self.params, self.hist, new_batch,
                                                  old_batch, opt, self.state, self.plan)
        self.params = new_params
        if self.hist is not None:
            self.hist = ema_update(self.hist, self.params, cfg.ema_beta)
        self.global_step += 1
        self.diagnostics.append({
            "type": "step",
            "step": self.global_step,
            "stage": stage,
            "mode": self.spec.label,
            "l_adap": report.l_adap,
            "l_antif": report.l_antif,
            "dot_product": diag["dot_product"],
            "grad_norms": {"adap": diag["grad_norm_adap"],
                           "antif": diag["grad_norm_antif"]},
            "warmup": diag["warmup"],
        })
        if diag["warmup"]:
            self.events.append({"type": "event", "stage": stage, "event": "warmup_step",
                                "step": self.global_step})

    def _train_phase(self, samples, stage, epochs):
        cfg = self.cfg
        self.state = OptimizerState.zeros(self.params.size)
        steps = _steps_per_epoch(len(samples), cfg.batch_p, cfg.batch_k)
        for epoch in range(epochs):
            if epoch % cfg.cluster.refresh_period_epochs == 0:
                self._refresh(samples, stage, epoch)
            for _ in range(steps):
                batch = sample_pk_batch(samples, cfg.batch_p, cfg.batch_k, self.batch_rng)
                self._step(stage, batch)

    # -- entry points -------------------------------------------------------------

    def run(self, out_dir=None) -> RunResult:
        cfg = self.cfg
        records: list[MetricRecord] = []
        checkpoints = {}
        splits = self.stream.all_splits()
        if self.buffer is not None:
            self._seed_buffer_with_source()

        if self.spec.union_training:
            union = []
            for t in range(1, self.stream.cfg.num_stages + 1):
                union.extend(self.stream.generate_stage(t).samples)
            self._train_phase(union, self.stream.cfg.num_stages,
                              cfg.epochs_per_stage * self.stream.cfg.num_stages)
            t = self.stream.cfg.num_stages
            checkpoints[t] = self.params.copy()
            records.extend(evaluate_checkpoint(self.params, splits, self.spec.label,
                                               self.seed, t))
        else:
            for t in range(1, self.stream.cfg.num_stages + 1):
                stage = self.stream.generate_stage(t)
                self.stage_samples[t] = stage.samples
                self._train_phase(stage.samples, t, cfg.epochs_per_stage)
                if self.buffer is not None:
                    self._store_stage(stage.samples, t)
                checkpoints[t] = self.params.copy()
                records.extend(evaluate_checkpoint(self.params, splits,
                                                   self.spec.label, self.seed, t))

        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for t, params in checkpoints.items():
                save_checkpoint(params, out / "checkpoints" / f"stage_{t}")
            write_metrics_csv(records, out / "metrics.csv")
            with open(out / "diag.jsonl", "w") as f:
                for row in self.diagnostics + self.events:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
            if self.buffer is not None:
                self.buffer.save_snapshot(out / "buffer.json")
        return RunResult(records=records, diagnostics=self.diagnostics,
                         checkpoints=checkpoints, events=self.events)
