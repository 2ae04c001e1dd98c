"""Feature extractor (MLP -> generalized-mean pooling) with a growable classifier.

All parameters live in one flat float64 vector with explicit slicing metadata,
so the optimizer, the two-stage replay update and the finite-difference
harness can treat a model as a plain point in R^n. Hidden layers use tanh;
the final backbone layer uses softplus so pooled activations stay strictly
positive (a requirement of generalized-mean pooling).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple
    grid_size: int
    embed_dim: int
    gem_p: float = 3.0

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.grid_size, self.embed_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigurationError(f"all dimensions must be positive: {self}")
        if not (self.gem_p > 0):
            raise ConfigurationError(f"gem_p must be > 0, got {self.gem_p}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def backbone_out(self) -> int:
        return self.grid_size * self.embed_dim

    def layer_dims(self):
        """(fan_in, fan_out) pairs for every backbone layer, last one included."""
        dims = [self.input_dim, *self.hidden_dims, self.backbone_out]
        return list(zip(dims[:-1], dims[1:]))


def _segments(cfg: ModelConfig, num_classes: int):
    """Slicing metadata: list of (name, offset, shape) partitioning the vector."""
    segs = []
    off = 0
    for i, (din, dout) in enumerate(cfg.layer_dims()):
        segs.append((f"w{i}", off, (din, dout)))
        off += din * dout
        segs.append((f"b{i}", off, (dout,)))
        off += dout
    segs.append(("phi_w", off, (num_classes, cfg.embed_dim)))
    off += num_classes * cfg.embed_dim
    segs.append(("phi_b", off, (num_classes,)))
    off += num_classes
    return segs, off


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source_model: str = "current"


@dataclass(frozen=True)
class Logits:
    values: np.ndarray
    source_model: str = "current"


class ModelParams:
    """Backbone (theta) and classifier (phi) as one flat float64 vector.

    The theta region is everything before the classifier weights; views into
    the vector are exposed per segment so forward/backward read and write
    without copies.
    """

    __slots__ = ("cfg", "num_classes", "vec", "_segs", "_by_name", "_phi_offset")

    def __init__(self, cfg: ModelConfig, num_classes: int, vec: np.ndarray):
        if num_classes < 0:
            raise ConfigurationError("num_classes must be non-negative")
        segs, total = _segments(cfg, num_classes)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != total:
            raise ConfigurationError(
                f"parameter vector has {vec.shape} entries, layout needs {total}"
            )
        self.cfg = cfg
        self.num_classes = int(num_classes)
        self.vec = vec
        self._segs = segs
        self._by_name = {name: (off, shape) for name, off, shape in segs}
        self._phi_offset = self._by_name["phi_w"][0]

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, cfg: ModelConfig, num_classes: int, seed) -> "ModelParams":
        """Seeded uniform init in [-s, s] with s = 1/sqrt(fan_in) per segment."""
        segs, total = _segments(cfg, num_classes)
        rng = np.random.default_rng(seed)
        vec = np.empty(total, dtype=np.float64)
        for name, off, shape in segs:
            size = int(np.prod(shape))
            if name.startswith("w"):
                s = 1.0 / np.sqrt(shape[0])
            elif name == "phi_w":
                s = 1.0 / np.sqrt(cfg.embed_dim)
            elif name == "phi_b":
                s = 1.0 / np.sqrt(cfg.embed_dim)
            else:  # backbone bias: fan_in of its layer
                s = 1.0 / np.sqrt(cls._bias_fan_in(cfg, name))
            vec[off:off + size] = rng.uniform(-s, s, size=size)
        return cls(cfg, num_classes, vec)

    @staticmethod
    def _bias_fan_in(cfg: ModelConfig, bias_name: str) -> int:
        i = int(bias_name[1:])
        return cfg.layer_dims()[i][0]

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        return ModelParams(self.cfg, self.num_classes, vec)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.num_classes, self.vec.copy())

    # -- views -------------------------------------------------------------

    def segment(self, name: str) -> np.ndarray:
        off, shape = self._by_name[name]
        size = int(np.prod(shape))
        return self.vec[off:off + size].reshape(shape)

    @property
    def theta(self) -> np.ndarray:
        return self.vec[: self._phi_offset]

    @property
    def phi_w(self) -> np.ndarray:
        return self.segment("phi_w")

    @property
    def phi_b(self) -> np.ndarray:
        return self.segment("phi_b")

    @property
    def size(self) -> int:
        return self.vec.shape[0]

    @property
    def segments(self):
        return list(self._segs)

    def num_backbone_layers(self) -> int:
        return len(self.cfg.layer_dims())


# -- forward / backward ----------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gem_pool(grid: np.ndarray, p: float) -> np.ndarray:
    """Generalized mean over the grid axis: ((1/G) sum_g v_g^p)^(1/p) per dim.

    p=1 is the arithmetic mean; large p approaches the per-dimension max.
    Requires non-negative entries and p > 0.
    """
    if not (p > 0):
        raise ConfigurationError(f"gem exponent must be > 0, got {p}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigurationError(f"grid must be G x D, got shape {grid.shape}")
    if np.any(grid < 0):
        raise NumericError("gem_pool requires non-negative grid entries")
    return np.mean(grid ** p, axis=0) ** (1.0 / p)


def forward_batch(params: ModelParams, x: np.ndarray) -> dict:
    """Run the network on a batch; returns a cache for the backward pass.

    Cache keys: acts (input + hidden activations), pre_final, grid (n,G,D),
    pool_base (n,D, the mean of p-th powers), emb (n,D), logits (n,C).
    """
    cfg = params.cfg
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != cfg.input_dim:
        raise ConfigurationError(
            f"input has dim {X.shape[1]}, model expects {cfg.input_dim}"
        )
    n_layers = params.num_backbone_layers()
    acts = [X]
    a = X
    for i in range(n_layers - 1):
        a = np.tanh(a @ params.segment(f"w{i}") + params.segment(f"b{i}"))
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation at backbone layer {i}")
        acts.append(a)
    i = n_layers - 1
    pre_final = a @ params.segment(f"w{i}") + params.segment(f"b{i}")
    z = _softplus(pre_final)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite activation at backbone layer {i}")
    grid = z.reshape(X.shape[0], cfg.grid_size, cfg.embed_dim)
    pool_base = np.mean(grid ** cfg.gem_p, axis=1)
    emb = pool_base ** (1.0 / cfg.gem_p)
    logits = emb @ params.phi_w.T + params.phi_b
    if not (np.all(np.isfinite(emb)) and np.all(np.isfinite(logits))):
        raise NumericError("non-finite value in pooling/classifier head")
    return {
        "x": X,
        "acts": acts,
        "pre_final": pre_final,
        "grid": grid,
        "pool_base": pool_base,
        "emb": emb,
        "logits": logits,
    }


def forward(params: ModelParams, x: np.ndarray, source_model: str = "current"):
    """Single-input forward pass returning (grid, Embedding, Logits)."""
    cache = forward_batch(params, np.asarray(x, dtype=np.float64)[None, :])
    return (
        cache["grid"][0],
        Embedding(cache["emb"][0], source_model),
        Logits(cache["logits"][0], source_model),
    )


def embed_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_batch(params, x)["emb"]


def backward_batch(params: ModelParams, cache: dict, d_emb=None, d_logits=None) -> np.ndarray:
    """Vector-Jacobian product: loss gradients at (emb, logits) -> flat param grad."""
    cfg = params.cfg
    n = cache["x"].shape[0]
    grad = np.zeros(params.size, dtype=np.float64)

    def gseg(name):
        off, shape = params._by_name[name]
        size = int(np.prod(shape))
        return grad[off:off + size].reshape(shape)

    dE = np.zeros_like(cache["emb"]) if d_emb is None else np.array(d_emb, dtype=np.float64)
    if d_logits is not None:
        dL = np.asarray(d_logits, dtype=np.float64)
        gseg("phi_w")[...] = dL.T @ cache["emb"]
        gseg("phi_b")[...] = dL.sum(axis=0)
        dE = dE + dL @ params.phi_w

    # GeM pooling: emb = pool_base^(1/p), pool_base = mean_g grid^p
    p = cfg.gem_p
    d_base = dE * (1.0 / p) * cache["pool_base"] ** (1.0 / p - 1.0)
    d_grid = d_base[:, None, :] * p * cache["grid"] ** (p - 1.0) / cfg.grid_size
    d_pre = d_grid.reshape(n, cfg.backbone_out) * _sigmoid(cache["pre_final"])

    n_layers = params.num_backbone_layers()
    for i in range(n_layers - 1, -1, -1):
        a_prev = cache["acts"][i]
        gseg(f"w{i}")[...] = a_prev.T @ d_pre
        gseg(f"b{i}")[...] = d_pre.sum(axis=0)
        if i > 0:
            da = d_pre @ params.segment(f"w{i}").T
            d_pre = da * (1.0 - cache["acts"][i] ** 2)
    if not np.all(np.isfinite(grad)):
        bad = [name for name, off, shape in params.segments
               if not np.all(np.isfinite(grad[off:off + int(np.prod(shape))]))]
        raise NumericError(f"non-finite gradient in segments {bad}")
    return grad


# -- historical model maintenance -------------------------------------------


def ema_update(historical: ModelParams, current: ModelParams, beta: float) -> ModelParams:
    """Momentum update h' = beta*h + (1-beta)*c, entrywise over the flat vectors."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigurationError(f"beta must lie in [0,1], got {beta}")
    if historical.cfg != current.cfg or historical.num_classes != current.num_classes:
        raise ConfigurationError(
            "historical/current models out of sync "
            f"({historical.num_classes} vs {current.num_classes} classes); "
            "grow_classifier must run on both"
        )
    return historical.with_vector(beta * historical.vec + (1.0 - beta) * current.vec)


def grow_classifier(current: ModelParams, historical, new_num_classes: int, rng):
    """Append classifier rows for a grown label namespace.

    The current model gets freshly initialized rows; the historical model (if
    any) receives copies of those same rows so both stay dimension-compatible.
    Existing rows are untouched.
    """
    old = current.num_classes
    if new_num_classes < old:
        raise ConfigurationError(
            f"classifier cannot shrink ({old} -> {new_num_classes})"
        )
    if new_num_classes == old:
        return current, historical
    k = new_num_classes - old
    d = current.cfg.embed_dim
    s = 1.0 / np.sqrt(d)
    new_w = rng.uniform(-s, s, size=(k, d))
    new_b = rng.uniform(-s, s, size=k)

    def rebuild(par: ModelParams, w_rows, b_rows) -> ModelParams:
        grown = ModelParams(
            par.cfg, new_num_classes, np.empty(_segments(par.cfg, new_num_classes)[1])
        )
        grown.theta[...] = par.theta
        grown.phi_w[:old] = par.phi_w
        grown.phi_w[old:] = w_rows
        grown.phi_b[:old] = par.phi_b
        grown.phi_b[old:] = b_rows
        return grown

    cur2 = rebuild(current, new_w, new_b)
    hist2 = rebuild(historical, new_w, new_b) if historical is not None else None
    return cur2, hist2


# -- checkpoint serialization ------------------------------------------------


def save_checkpoint(params: ModelParams, prefix) -> None:
    """Write <prefix>.bin (flat little-endian float64) and <prefix>.json sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".bin").write_bytes(params.vec.astype("<f8").tobytes())
    sidecar = {
        "format": "flat-f8-le",
        "input_dim": params.cfg.input_dim,
        "hidden_dims": list(params.cfg.hidden_dims),
        "grid_size": params.cfg.grid_size,
        "embed_dim": params.cfg.embed_dim,
        "gem_p": params.cfg.gem_p,
        "num_classes": params.num_classes,
        "total": params.size,
        "segments": [
            {"name": name, "offset": off, "shape": list(shape)}
            for name, off, shape in params.segments
        ],
    }
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(prefix) -> ModelParams:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    if meta.get("format") != "flat-f8-le":
        raise ConfigurationError(f"unknown checkpoint format {meta.get('format')!r}")
    cfg = ModelConfig(
        input_dim=meta["input_dim"],
        hidden_dims=tuple(meta["hidden_dims"]),
        grid_size=meta["grid_size"],
        embed_dim=meta["embed_dim"],
        gem_p=meta["gem_p"],
    )
    vec = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    if vec.shape[0] != meta["total"]:
        raise ConfigurationError("checkpoint blob size disagrees with sidecar")
    return ModelParams(cfg, meta["num_classes"], vec)
