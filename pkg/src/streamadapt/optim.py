"""Replay optimizer: a first-order two-stage meta update, the joint baseline,
Adam, and numeric diagnostics (finite differences, first-order expansion check).

The meta step treats adaptation as the inner task and anti-forgetting as the
outer one: the anti-forgetting gradient is taken at parameters pre-updated by
one plain gradient-descent step on the adaptation loss, then added to the
adaptation gradient and applied with a single Adam step. With inner rate 0 the
update degenerates to the joint objective exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Batch
from .errors import ConfigurationError, NumericError, ProtocolError
from .losses import (
    LossPlan,
    LossReport,
    TeacherOutputs,
    adaptation_terms,
    antiforgetting_terms,
    teacher_outputs,
)
from .model import ModelParams

MODES = ("stagewise", "replay_joint", "cdr", "cdr_kl", "cdr_rcl")


@dataclass
class CdrConfig:
    alpha: float = 3.5e-4
    outer_lr: float = 3.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "cdr_rcl"
    meta_test_data: str = "union"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode.startswith("cdr") and not (self.alpha >= 0):
            raise ConfigurationError("meta modes need alpha >= 0")
        if not (self.outer_lr > 0):
            raise ConfigurationError("outer_lr must be > 0")


class OptimizerState:
    """Adam moments aligned with the flat parameter vector."""

    __slots__ = ("m", "v", "step_count")

    def __init__(self, m, v, step_count=0):
        self.m = np.asarray(m, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        self.step_count = int(step_count)

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0)

    def grown(self, old_params: ModelParams, new_params: ModelParams) -> "OptimizerState":
        """Remap moments to a grown classifier layout; new rows get zero moments."""
        if self.m.shape[0] != old_params.size:
            raise ConfigurationError("optimizer state does not match the old layout")
        m2 = np.zeros(new_params.size)
        v2 = np.zeros(new_params.size)
        for (name, off_old, shape_old), (_, off_new, _) in zip(
            old_params.segments, new_params.segments
        ):
            size_old = int(np.prod(shape_old))
            if name == "phi_w":
                d = old_params.cfg.embed_dim
                rows = shape_old[0]
                m2[off_new:off_new + rows * d] = self.m[off_old:off_old + rows * d]
                v2[off_new:off_new + rows * d] = self.v[off_old:off_old + rows * d]
            else:
                m2[off_new:off_new + size_old] = self.m[off_old:off_old + size_old]
                v2[off_new:off_new + size_old] = self.v[off_old:off_old + size_old]
        return OptimizerState(m2, v2, self.step_count)


def adam_apply(state: OptimizerState, params: ModelParams, gradient: np.ndarray,
               lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> ModelParams:
    """One bias-corrected Adam step; mutates state, returns the new parameters."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.vec.shape:
        raise ProtocolError(
            f"gradient shape {g.shape} does not match parameters {params.vec.shape}"
        )
    t = state.step_count + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_vec = params.vec - lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.all(np.isfinite(new_vec)):
        raise NumericError("non-finite parameter after Adam step")
    state.m, state.v, state.step_count = m, v, t
    return params.with_vector(new_vec)


# -- step rules ----------------------------------------------------------------


def first_order_meta_gradient(grad_adap: Callable, grad_antif: Callable,
                              vec: np.ndarray, alpha: float):
    """Two-stage rule: g1 at vec, g2 at the pre-updated point vec - alpha*g1.

    Higher-order terms are dropped: g2 is applied directly. Returns
    (g1 + g2, g1, g2)."""
    g1 = grad_adap(vec)
    g2 = grad_antif(vec - alpha * g1)
    return g1 + g2, g1, g2


def adaptation_step(params: ModelParams, new_batch: Batch, cfg: CdrConfig,
                    state: OptimizerState, plan: LossPlan,
                    teacher: Optional[TeacherOutputs] = None):
    """Plain Adam step on the adaptation objective (stagewise mode / warm-up)."""
    parts, g = adaptation_terms(params, new_batch, plan, teacher)
    new_params = adam_apply(state, params, g, cfg.outer_lr,
                            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    report = LossReport.from_parts(parts, None)
    diag = {"warmup": False, "dot_product": 0.0,
            "grad_norm_adap": float(np.linalg.norm(g)), "grad_norm_antif": 0.0}
    return new_params, report, diag


def meta_step(params: ModelParams, hist: Optional[ModelParams], new_batch: Batch,
              old_batch: Optional[Batch], cfg: CdrConfig, state: OptimizerState,
              plan: LossPlan):
    """Coordinated update: adaptation as inner task, anti-forgetting as outer.

    Reads the original parameters once and replaces them atomically; any error
    raised before the Adam commit leaves parameters and state untouched.
    Falls back to an adaptation-only step when the replay memory is empty.
    """
    teacher = None
    if plan.needs_teacher:
        if hist is None:
            raise ProtocolError("consistency terms need a historical model")
        teacher = teacher_outputs(hist, new_batch, old_batch)
    if old_batch is None:
        new_params, report, diag = adaptation_step(params, new_batch, cfg, state, plan,
                                                   teacher)
        diag["warmup"] = True
        return new_params, report, diag

    a_parts, g1 = adaptation_terms(params, new_batch, plan, teacher)
    pre = params.with_vector(params.vec - cfg.alpha * g1)
    f_parts, g2 = antiforgetting_terms(pre, new_batch, old_batch, teacher, plan)
    g = g1 + g2
    new_params = adam_apply(state, params, g, cfg.outer_lr,
                            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    report = LossReport.from_parts(a_parts, f_parts)
    diag = {
        "warmup": False,
        "dot_product": float(g1 @ g2),
        "grad_norm_adap": float(np.linalg.norm(g1)),
        "grad_norm_antif": float(np.linalg.norm(g2)),
    }
    return new_params, report, diag


def joint_step(params: ModelParams, hist: Optional[ModelParams], new_batch: Batch,
               old_batch: Optional[Batch], cfg: CdrConfig, state: OptimizerState,
               plan: LossPlan):
    """One Adam step on the sum of both objectives at the unperturbed parameters."""
    teacher = None
    if plan.needs_teacher:
        if hist is None:
            raise ProtocolError("consistency terms need a historical model")
        teacher = teacher_outputs(hist, new_batch, old_batch)
    if old_batch is None:
        new_params, report, diag = adaptation_step(params, new_batch, cfg, state, plan,
                                                   teacher)
        diag["warmup"] = True
        return new_params, report, diag

    a_parts, g1 = adaptation_terms(params, new_batch, plan, teacher)
    f_parts, g2 = antiforgetting_terms(params, new_batch, old_batch, teacher, plan)
    g = g1 + g2
    new_params = adam_apply(state, params, g, cfg.outer_lr,
                            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    report = LossReport.from_parts(a_parts, f_parts)
    diag = {
        "warmup": False,
        "dot_product": float(g1 @ g2),
        "grad_norm_adap": float(np.linalg.norm(g1)),
        "grad_norm_antif": float(np.linalg.norm(g2)),
    }
    return new_params, report, diag


# -- diagnostics ----------------------------------------------------------------


def taylor_records(value_antif: Callable, grad_adap: Callable, grad_antif: Callable,
                   vec: np.ndarray, alphas):
    """First-order expansion check of the outer objective along the inner step.

    For each alpha: lhs is the anti-forgetting loss at the pre-updated point,
    rhs its first-order expansion value_antif(vec) - alpha * <g_adap, g_antif>;
    the remainder should shrink quadratically in alpha."""
    g1 = grad_adap(vec)
    f0 = value_antif(vec)
    ga = grad_antif(vec)
    dot = float(g1 @ ga)
    records = []
    for a in alphas:
        pert = vec - a * g1
        if not np.all(np.isfinite(pert)):
            raise NumericError(f"non-finite perturbed parameters at alpha={a}")
        lhs = value_antif(pert)
        if not np.isfinite(lhs):
            raise NumericError(f"non-finite loss at perturbed point, alpha={a}")
        rhs = f0 - a * dot
        records.append({
            "alpha": float(a),
            "lhs": float(lhs),
            "first_order_rhs": float(rhs),
            "remainder": float(abs(lhs - rhs)),
            "dot_product": dot,
        })
    return records


def taylor_alignment_diagnostic(params: ModelParams, hist: ModelParams,
                                new_batch: Batch, old_batch: Batch,
                                plan: LossPlan, alpha_list):
    """taylor_records over the real adaptation / anti-forgetting pair."""
    teacher = teacher_outputs(hist, new_batch, old_batch) if plan.needs_teacher else None

    def value_antif(vec):
        parts, _ = antiforgetting_terms(params.with_vector(vec), new_batch, old_batch,
                                        teacher, plan, with_grad=False)
        return float(sum(parts.values()))

    def grad_adap(vec):
        _, g = adaptation_terms(params.with_vector(vec), new_batch, plan, teacher)
        return g

    def grad_antif(vec):
        _, g = antiforgetting_terms(params.with_vector(vec), new_batch, old_batch,
                                    teacher, plan)
        return g

    return taylor_records(value_antif, grad_adap, grad_antif, params.vec, alpha_list)


def fd_max_rel_error(value_fn: Callable, grad: np.ndarray, vec: np.ndarray,
                     h: float = 1e-4, min_coords: int = 200, rng=None) -> float:
    """Central finite differences on a random coordinate subset vs the analytic
    gradient; returns max over coordinates of |analytic-numeric|/(|numeric|+1e-8)."""
    n = vec.shape[0]
    if n <= min_coords:
        coords = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=min_coords, replace=False)
    worst = 0.0
    for c in coords:
        vp = vec.copy()
        vp[c] += h
        vm = vec.copy()
        vm[c] -= h
        numeric = (value_fn(vp) - value_fn(vm)) / (2.0 * h)
        err = abs(grad[c] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return float(worst)


def finite_difference_check(params: ModelParams, hist: Optional[ModelParams],
                            new_batch: Batch, old_batch: Optional[Batch],
                            plan: LossPlan, which: str = "antif",
                            h: float = 1e-4, min_coords: int = 200,
                            seed: int = 0) -> float:
    """Gradient check of the adaptation or anti-forgetting composite."""
    if not (1e-6 <= h <= 1e-3):
        raise ConfigurationError(f"step h should lie in [1e-6, 1e-3], got {h}")
    teacher = None
    if plan.needs_teacher:
        teacher = teacher_outputs(hist, new_batch, old_batch)

    if which == "adap":
        def value_fn(vec):
            parts, _ = adaptation_terms(params.with_vector(vec), new_batch, plan,
                                        teacher, with_grad=False)
            return float(sum(parts.values()))
        _, grad = adaptation_terms(params, new_batch, plan, teacher)
    elif which == "antif":
        def value_fn(vec):
            parts, _ = antiforgetting_terms(params.with_vector(vec), new_batch,
                                            old_batch, teacher, plan, with_grad=False)
            return float(sum(parts.values()))
        _, grad = antiforgetting_terms(params, new_batch, old_batch, teacher, plan)
    else:
        raise ConfigurationError(f"which must be 'adap' or 'antif', got {which!r}")
    return fd_max_rel_error(value_fn, grad, params.vec, h, min_coords,
                            np.random.default_rng(seed))
