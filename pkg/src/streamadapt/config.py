"""Run configuration: a flat key-value file with one section per subsystem.

Every run materializes all defaults up front and writes the resolved file
into its output directory, so runs are self-describing and reproducible from
(config file, seed) alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .clustering import ClusterConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .optim import CdrConfig
from .stream import StreamConfig

METHODS = ("stagewise", "replay_joint", "cdr", "cdr_kl", "cdr_rcl", "all_in_one")
DISTILL_CHOICES = ("method_default", "none", "only_kl", "only_rel", "both")

# Desk-scale defaults, tuned once on the synthetic benchmark and frozen.
DEFAULTS = {
    "model": {
        "input_dim": "32",
        "hidden_dims": "64",
        "grid_size": "4",
        "embed_dim": "16",
        "gem_p": "3.0",
        "ema_beta": "0.999",
    },
    "losses": {
        "triplet_margin": "0.3",
        "normalize_rel_pairs": "true",
        "kl_old_only": "false",
    },
    "optimizer": {
        "alpha": "0.1",
        "outer_lr": "0.004",
        "adam_beta1": "0.9",
        "adam_beta2": "0.999",
        "adam_eps": "1e-8",
        "meta_test_data": "union",
    },
    "memory": {
        "capacity_ids": "32",
        "per_id_cap": "4",
        "policy": "id_rs",
    },
    "clustering": {
        "eps": "0.45",
        "min_pts": "4",
        "refresh_period_epochs": "2",
    },
    "stream": {
        "num_source_ids": "50",
        "source_samples_per_id": "16",
        "ids_per_stage": "20",
        "samples_per_id": "16",
        "stationary_stages": "5",
        "dynamic_stages": "6",
        "stationary_schedule": "t0",
        "dynamic_schedule": "a,b,c",
        "query_per_id": "2",
        "gallery_per_id": "4",
        "prototype_scale": "1.0",
        "source_noise": "0.35",
        "target_noise": "0.35",
        "transform_cond_max": "4.0",
        "offset_scale": "0.6",
    },
    "run": {
        "method": "cdr_rcl",
        "scenario": "stationary",
        "epochs_per_stage": "6",
        "batch_p": "8",
        "batch_k": "4",
        "pretrain_epochs": "15",
        "pretrain_lr": "0.004",
        "seeds": "1,2,3,4,5",
        "memory_policy": "id_rs",
        "distill": "method_default",
    },
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    ema_beta: float
    triplet_margin: float
    normalize_rel_pairs: bool
    kl_old_only: bool
    optim: CdrConfig
    capacity_ids: int
    per_id_cap: int
    memory_policy: str
    cluster: ClusterConfig
    stream: dict = field(default_factory=dict)
    method: str = "cdr_rcl"
    scenario: str = "stationary"
    epochs_per_stage: int = 6
    batch_p: int = 8
    batch_k: int = 4
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.004
    seeds: tuple = (1, 2, 3, 4, 5)
    distill: str = "method_default"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.scenario not in ("stationary", "dynamic"):
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if self.distill not in DISTILL_CHOICES:
            raise ConfigurationError(f"distill must be one of {DISTILL_CHOICES}")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def stream_config(self, seed: int, scenario: str | None = None) -> StreamConfig:
        s = self.stream
        scenario = scenario or self.scenario
        if scenario == "stationary":
            stages = s["stationary_stages"]
            schedule = tuple([s["stationary_schedule"][0]] * stages) \
                if len(s["stationary_schedule"]) == 1 else tuple(s["stationary_schedule"])
        else:
            base = s["dynamic_schedule"]
            stages = s["dynamic_stages"]
            schedule = tuple((base * ((stages + len(base) - 1) // len(base)))[:stages])
        return StreamConfig(
            input_dim=self.model.input_dim,
            num_source_ids=s["num_source_ids"],
            source_samples_per_id=s["source_samples_per_id"],
            ids_per_stage=s["ids_per_stage"],
            samples_per_id=s["samples_per_id"],
            num_stages=stages,
            scenario=scenario,
            domain_schedule=schedule,
            seed=seed,
            query_per_id=s["query_per_id"],
            gallery_per_id=s["gallery_per_id"],
            prototype_scale=s["prototype_scale"],
            source_noise=s["source_noise"],
            target_noise=s["target_noise"],
            transform_cond_max=s["transform_cond_max"],
            offset_scale=s["offset_scale"],
        )


def _parser_with_defaults() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse an INI config (missing keys fall back to defaults); overrides is
    a {section: {key: value-string}} mapping applied on top."""
    cp = _parser_with_defaults()
    if path is not None:
        read = cp.read(str(path))
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
    for section, kv in (overrides or {}).items():
        for key, value in kv.items():
            cp.set(section, key, str(value))

    m = cp["model"]
    model = ModelConfig(
        input_dim=m.getint("input_dim"),
        hidden_dims=tuple(int(v) for v in m.get("hidden_dims").split(",") if v.strip()),
        grid_size=m.getint("grid_size"),
        embed_dim=m.getint("embed_dim"),
        gem_p=m.getfloat("gem_p"),
    )
    o = cp["optimizer"]
    optim = CdrConfig(
        alpha=o.getfloat("alpha"),
        outer_lr=o.getfloat("outer_lr"),
        adam_beta1=o.getfloat("adam_beta1"),
        adam_beta2=o.getfloat("adam_beta2"),
        adam_eps=o.getfloat("adam_eps"),
        meta_test_data=o.get("meta_test_data"),
    )
    c = cp["clustering"]
    cluster = ClusterConfig(
        eps=c.getfloat("eps"),
        min_pts=c.getint("min_pts"),
        refresh_period_epochs=c.getint("refresh_period_epochs"),
    )
    s = cp["stream"]
    stream = {
        "num_source_ids": s.getint("num_source_ids"),
        "source_samples_per_id": s.getint("source_samples_per_id"),
        "ids_per_stage": s.getint("ids_per_stage"),
        "samples_per_id": s.getint("samples_per_id"),
        "stationary_stages": s.getint("stationary_stages"),
        "dynamic_stages": s.getint("dynamic_stages"),
        "stationary_schedule": [v.strip() for v in s.get("stationary_schedule").split(",")],
        "dynamic_schedule": [v.strip() for v in s.get("dynamic_schedule").split(",")],
        "query_per_id": s.getint("query_per_id"),
        "gallery_per_id": s.getint("gallery_per_id"),
        "prototype_scale": s.getfloat("prototype_scale"),
        "source_noise": s.getfloat("source_noise"),
        "target_noise": s.getfloat("target_noise"),
        "transform_cond_max": s.getfloat("transform_cond_max"),
        "offset_scale": s.getfloat("offset_scale"),
    }
    r = cp["run"]
    mem = cp["memory"]
    lo = cp["losses"]
    return RunConfig(
        model=model,
        ema_beta=m.getfloat("ema_beta"),
        triplet_margin=lo.getfloat("triplet_margin"),
        normalize_rel_pairs=lo.getboolean("normalize_rel_pairs"),
        kl_old_only=lo.getboolean("kl_old_only"),
        optim=optim,
        capacity_ids=mem.getint("capacity_ids"),
        per_id_cap=mem.getint("per_id_cap"),
        memory_policy=mem.get("policy"),
        cluster=cluster,
        stream=stream,
        method=r.get("method"),
        scenario=r.get("scenario"),
        epochs_per_stage=r.getint("epochs_per_stage"),
        batch_p=r.getint("batch_p"),
        batch_k=r.getint("batch_k"),
        pretrain_epochs=r.getint("pretrain_epochs"),
        pretrain_lr=r.getfloat("pretrain_lr"),
        seeds=tuple(int(v) for v in r.get("seeds").split(",") if v.strip()),
        distill=r.get("distill"),
    )


def dump_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration back out (self-describing runs)."""
    cp = configparser.ConfigParser()
    cp.read_dict({
        "model": {
            "input_dim": cfg.model.input_dim,
            "hidden_dims": ",".join(str(h) for h in cfg.model.hidden_dims),
            "grid_size": cfg.model.grid_size,
            "embed_dim": cfg.model.embed_dim,
            "gem_p": cfg.model.gem_p,
            "ema_beta": cfg.ema_beta,
        },
        "losses": {
            "triplet_margin": cfg.triplet_margin,
            "normalize_rel_pairs": cfg.normalize_rel_pairs,
            "kl_old_only": cfg.kl_old_only,
        },
        "optimizer": {
            "alpha": cfg.optim.alpha,
            "outer_lr": cfg.optim.outer_lr,
            "adam_beta1": cfg.optim.adam_beta1,
            "adam_beta2": cfg.optim.adam_beta2,
            "adam_eps": cfg.optim.adam_eps,
            "meta_test_data": cfg.optim.meta_test_data,
        },
        "memory": {
            "capacity_ids": cfg.capacity_ids,
            "per_id_cap": cfg.per_id_cap,
            "policy": cfg.memory_policy,
        },
        "clustering": {
            "eps": cfg.cluster.eps,
            "min_pts": cfg.cluster.min_pts,
            "refresh_period_epochs": cfg.cluster.refresh_period_epochs,
        },
        "stream": {
            **{k: (",".join(v) if isinstance(v, list) else v)
               for k, v in cfg.stream.items()},
        },
        "run": {
            "method": cfg.method,
            "scenario": cfg.scenario,
            "epochs_per_stage": cfg.epochs_per_stage,
            "batch_p": cfg.batch_p,
            "batch_k": cfg.batch_k,
            "pretrain_epochs": cfg.pretrain_epochs,
            "pretrain_lr": cfg.pretrain_lr,
            "seeds": ",".join(str(s) for s in cfg.seeds),
            "memory_policy": cfg.memory_policy,
            "distill": cfg.distill,
        },
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        cp.write(f)
