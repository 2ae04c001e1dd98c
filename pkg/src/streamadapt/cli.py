"""Command-line orchestration: pretrain, run, ablate, diagnose, eval.

Outputs land under --out as <method>/<seed>/{checkpoints/, metrics.csv,
diag.jsonl, resolved-config.ini}. On failure a machine-readable marker
(failure.json) is written next to whatever partial outputs exist and the
exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import METHODS, RunConfig, dump_config, load_config
from .data import Batch
from .errors import ProtocolError
from .evaluation import evaluate_checkpoint, read_metrics_csv, write_metrics_csv
from .losses import LossPlan
from .model import ModelParams, load_checkpoint, save_checkpoint
from .optim import finite_difference_check, taylor_alignment_diagnostic
from .runner import LudaRunner, pretrain_source, resolve_method
from .stream import SyntheticStream


def _pretrain_dir(out: Path, seed: int) -> Path:
    return out / "pretrain" / f"seed{seed}"


def _run_dir(out: Path, label: str, seed: int) -> Path:
    return out / label / str(seed)


def cmd_pretrain(cfg: RunConfig, seed: int, out: Path) -> Path:
    """Train the source checkpoint for one seed; writes checkpoint + metrics."""
    pdir = _pretrain_dir(out, seed)
    pdir.mkdir(parents=True, exist_ok=True)
    params, records = pretrain_source(cfg, seed)
    save_checkpoint(params, pdir / "checkpoint")
    write_metrics_csv(records, pdir / "metrics.csv")
    dump_config(cfg, pdir / "resolved-config.ini")
    return pdir


def _load_or_pretrain(cfg: RunConfig, seed: int, out: Path, method: str) -> ModelParams:
    pdir = _pretrain_dir(out, seed)
    ckpt = pdir / "checkpoint"
    if not ckpt.with_suffix(".json").exists():
        if method == "all_in_one":
            cmd_pretrain(cfg, seed, out)
        else:
            raise ProtocolError(
                f"no source checkpoint for seed {seed}; run `pretrain` first"
            )
    return load_checkpoint(ckpt)


def cmd_run(cfg: RunConfig, seed: int, out: Path, method: str | None = None,
            memory_policy: str | None = None, distill: str | None = None) -> Path:
    """One (method, seed) staged run: checkpoints, metrics.csv, diag.jsonl."""
    method = method or cfg.method
    spec = resolve_method(method, memory_policy or cfg.memory_policy,
                          distill or cfg.distill)
    source_params = _load_or_pretrain(cfg, seed, out, method)
    rdir = _run_dir(out, spec.label, seed)
    runner = LudaRunner(cfg, seed, spec, source_params)
    runner.run(out_dir=rdir)
    dump_config(cfg.with_overrides(method=method, memory_policy=spec.memory_policy),
                rdir / "resolved-config.ini")
    return rdir


def cmd_ablate(cfg: RunConfig, out: Path, methods=None, memory_policies=None,
               distill_toggles=None) -> Path:
    """Full ladder x seeds, plus memory-policy and distillation toggles;
    merges every run's metrics into one tidy CSV."""
    methods = list(methods) if methods is not None else \
        ["stagewise", "replay_joint", "cdr", "cdr_kl", "cdr_rcl"]
    memory_policies = list(memory_policies) if memory_policies is not None else \
        ["fifo", "instance_rs"]
    distill_toggles = list(distill_toggles) if distill_toggles is not None else \
        ["only_rel"]
    merged = []
    for seed in cfg.seeds:
        cmd_pretrain(cfg, seed, out)
        variants = [(m, cfg.memory_policy, "method_default") for m in methods]
        variants += [("cdr_rcl", pol, "method_default") for pol in memory_policies]
        variants += [("cdr_rcl", cfg.memory_policy, d) for d in distill_toggles]
        for method, policy, distill in variants:
            rdir = cmd_run(cfg, seed, out, method=method, memory_policy=policy,
                           distill=distill)
            merged.extend(read_metrics_csv(rdir / "metrics.csv"))
    write_metrics_csv(merged, out / "ablation.csv")
    return out / "ablation.csv"


def _random_instance(cfg: RunConfig, seed: int, params: ModelParams | None = None):
    """A small random (model, hist, batches) tuple for diagnostics."""
    rng = np.random.default_rng([seed, 3])
    if params is None:
        params = ModelParams.init(cfg.model, 12, seed=[seed, 4])
    hist = params.with_vector(params.vec + 0.05 * rng.standard_normal(params.size))
    p, k = 4, 3
    labels = np.repeat(np.arange(p), k)
    new_batch = Batch(rng.standard_normal((p * k, cfg.model.input_dim)), labels, "new")
    old_batch = Batch(rng.standard_normal((p * k, cfg.model.input_dim)), labels, "old")
    return params, hist, new_batch, old_batch


def cmd_diagnose(cfg: RunConfig, seed: int, out: Path,
                 checkpoint: Path | None = None) -> Path:
    """Gradient-check errors, expansion remainders and alignment dot products."""
    params = load_checkpoint(checkpoint) if checkpoint else None
    plan = LossPlan.for_placement(True, True, cfg.optim.meta_test_data,
                                  margin=cfg.triplet_margin,
                                  normalize_rel_pairs=cfg.normalize_rel_pairs)
    grad_checks = []
    for i in range(3):
        p, h, nb, ob = _random_instance(cfg, seed + i, params)
        grad_checks.append({
            "instance": i,
            "adaptation": finite_difference_check(p, h, nb, ob, plan, "adap",
                                                  min_coords=120, seed=seed + i),
            "anti_forgetting": finite_difference_check(p, h, nb, ob, plan, "antif",
                                                       min_coords=120, seed=seed + i),
        })
    alphas = [1e-2, 5e-3, 2.5e-3]
    ratios = []
    taylor = []
    for i in range(10):
        p, h, nb, ob = _random_instance(cfg, seed + 100 + i, params)
        recs = taylor_alignment_diagnostic(p, h, nb, ob, plan, alphas)
        taylor.append(recs)
        r = [recs[j]["remainder"] for j in range(len(alphas))]
        if min(r) > 0:
            ratios.append([r[j] / r[j + 1] for j in range(len(r) - 1)])
    report = {
        "gradient_checks": grad_checks,
        "max_gradient_error": max(max(g["adaptation"], g["anti_forgetting"])
                                  for g in grad_checks),
        "alphas": alphas,
        "taylor_records": taylor,
        "median_remainder_ratios": [float(np.median([r[j] for r in ratios]))
                                    for j in range(len(alphas) - 1)] if ratios else [],
        "alignment_dot_products": [t[0]["dot_product"] for t in taylor],
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnose.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path


def cmd_eval(cfg: RunConfig, seed: int, out: Path, checkpoint: Path,
             method: str, stage: int) -> Path:
    """Evaluate one checkpoint on every split of the configured stream."""
    params = load_checkpoint(checkpoint)
    stream = SyntheticStream(cfg.stream_config(seed))
    records = evaluate_checkpoint(params, stream.all_splits(), method, seed, stage)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    write_metrics_csv(records, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamadapt",
        description="Lifelong unsupervised domain adaptation on synthetic retrieval streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "run", "ablate", "diagnose", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--method", type=str, default=None, choices=METHODS)
        p.add_argument("--scenario", type=str, default=None,
                       choices=("stationary", "dynamic"))
        p.add_argument("--out", type=Path, default=Path("runs"))
        if name == "run":
            p.add_argument("--memory-policy", type=str, default=None,
                           choices=("id_rs", "fifo", "instance_rs"))
            p.add_argument("--distill", type=str, default=None,
                           choices=("method_default", "none", "only_kl",
                                    "only_rel", "both"))
        if name == "ablate":
            p.add_argument("--methods", type=str, default=None,
                           help="comma list; default: full ladder")
            p.add_argument("--memory-policies", type=str, default=None,
                           help="comma list of extra policies (default fifo,instance_rs)")
            p.add_argument("--distill-toggles", type=str, default=None,
                           help="comma list (default only_rel); 'none' for no toggles")
        if name in ("diagnose", "eval"):
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="checkpoint prefix (without .bin/.json)")
        if name == "eval":
            p.add_argument("--stage", type=int, default=0)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {}
    if args.method:
        overrides.setdefault("run", {})["method"] = args.method
    if args.scenario:
        overrides.setdefault("run", {})["scenario"] = args.scenario
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _resolve(args)
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        if args.command == "pretrain":
            path = cmd_pretrain(cfg, seed, out)
        elif args.command == "run":
            path = cmd_run(cfg, seed, out, method=args.method,
                           memory_policy=args.memory_policy, distill=args.distill)
        elif args.command == "ablate":
            methods = args.methods.split(",") if args.methods else None
            policies = ([] if args.memory_policies == "none"
                        else args.memory_policies.split(",")
                        if args.memory_policies else None)
            toggles = ([] if args.distill_toggles == "none"
                       else args.distill_toggles.split(",")
                       if args.distill_toggles else None)
            path = cmd_ablate(cfg, out, methods, policies, toggles)
        elif args.command == "diagnose":
            path = cmd_diagnose(cfg, seed, out, args.checkpoint)
        elif args.command == "eval":
            ckpt = args.checkpoint
            if ckpt is None:
                raise ProtocolError("eval needs --checkpoint")
            path = cmd_eval(cfg, seed, out, ckpt, args.method or "eval", args.stage)
        else:  # pragma: no cover
            raise ProtocolError(f"unknown command {args.command}")
        print(f"{args.command}: wrote {path}")
        return 0
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        marker = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        (out / "failure.json").write_text(json.dumps(marker, indent=2) + "\n")
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
