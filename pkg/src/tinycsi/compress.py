"""Model compression: magnitude pruning, post-training quantization,
weight clustering, and the two combined pipelines (prune+quantize,
cluster+quantize). Fine-tuning keeps pruning masks and cluster
assignments frozen.

Pruning and clustering target the two dense layers only; the first and
final layers of this architecture are convolutions and are left intact so
accuracy is not disproportionately hit. Quantization covers every conv and
dense weight tensor; biases and batch-norm parameters stay float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import ConvLayer, DenseLayer, Model, _run_training
from .weights import (
    Clustered,
    DenseF16,
    DenseF32,
    QuantizedI8,
    SparseBitmap,
    make_sparse,
)

QUANT_LEVELS = ("i8", "f16")


@dataclass(frozen=True)
class PruneConfig:
    sparsity: float
    fine_tune_epochs: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity ratio must lie in [0, 1), got {self.sparsity}")


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 32
    init: str = "kmeanspp"
    max_iterations: int = 300
    tolerance: float = 1e-6
    fine_tune_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"cluster count must be >= 2, got {self.k}")
        if self.init not in ("kmeanspp", "linear", "random", "density"):
            raise ConfigError(f"unknown centroid init {self.init!r}")


# --- pruning ----------------------------------------------------------------


def prune_order(weights: np.ndarray) -> np.ndarray:
    """Flat indices ordered by pruning priority.

    Smallest magnitude first; among equal magnitudes the higher flat index
    is pruned first, so the lower flat index survives longer.
    """
    flat = np.abs(weights.reshape(-1))
    return np.lexsort((-np.arange(flat.size), flat))


def prune_magnitude(model: Model, cfg: PruneConfig) -> Model:
    """Zero out the smallest-magnitude fraction of each dense layer.

    Exactly floor(T * sparsity) weights per layer are set to 0, so the
    achieved zero fraction is within 1/T of the requested ratio. The
    surviving positions are recorded as a frozen bitmap mask.
    """
    out = model.clone()
    if cfg.sparsity == 0.0:
        return out
    for layer in out.dense_layers():
        dense = layer.store.to_dense()
        total = dense.size
        n_zero = int(np.floor(total * cfg.sparsity))
        order = prune_order(dense)
        mask = np.ones(total, dtype=bool)
        mask[order[:n_zero]] = False
        pruned = dense.reshape(-1).copy()
        pruned[~mask] = 0.0
        layer.store = make_sparse(pruned.reshape(dense.shape), mask.reshape(dense.shape))
    out.technique = "prune"
    return out


def achieved_sparsity(model: Model) -> float:
    """Fraction of dense-layer weights masked out, over all dense layers."""
    total = 0
    zeros = 0
    for layer in model.dense_layers():
        count = int(np.prod(layer.store.shape))
        total += count
        if isinstance(layer.store, SparseBitmap):
            zeros += count - layer.store.nnz
    if total == 0:
        raise ConfigError("model has no dense layers")
    return zeros / total


# --- quantization -----------------------------------------------------------


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8: scale = max|w| / 127, q in [-127, 127].

    Rounds half away from zero. An all-zero tensor maps to scale 1 with all
    q = 0. Re-quantizing an already dequantized tensor reproduces the
    identical int8 values and scale: candidate scales one float32 ulp around
    max|w|/127 are probed and the one whose grid holds the tensor exactly is
    kept, which makes quantize -> dequantize -> quantize a fixed point.
    """
    flat = np.ascontiguousarray(values, dtype=np.float32)
    max_abs = float(np.max(np.abs(flat))) if flat.size else 0.0
    if max_abs == 0.0:
        return np.zeros(values.shape, dtype=np.int8), 1.0
    base = np.float32(np.float64(max_abs) / 127.0)
    for scale in (base, np.nextafter(base, np.float32(0)), np.nextafter(base, np.float32(np.inf))):
        q = _round_half_away(flat.astype(np.float64) / np.float64(scale))
        q = np.clip(q, -127, 127).astype(np.int8)
        if np.array_equal(q.astype(np.float32) * scale, flat):
            return q, float(scale)
    q = _round_half_away(flat.astype(np.float64) / np.float64(base))
    return np.clip(q, -127, 127).astype(np.int8), float(base)


def _quantize_store(store, level: str):
    if level == "f16":
        if isinstance(store, (DenseF32, DenseF16)):
            return DenseF16(store.to_dense().astype(np.float16))
        if isinstance(store, SparseBitmap):
            vals = store.to_dense().reshape(-1)[store.mask().reshape(-1)]
            return SparseBitmap(store.shape, store.bitmap, vals.astype(np.float16))
        if isinstance(store, Clustered):
            # centroid tables are tiny; f16 saves nothing material, keep f32
            return store
        return store
    # dynamic-range int8
    if isinstance(store, QuantizedI8):
        return store
    if isinstance(store, (DenseF32, DenseF16)):
        q, scale = quantize_tensor(store.to_dense())
        return QuantizedI8(q, scale)
    if isinstance(store, SparseBitmap):
        if store.values.dtype == np.int8:
            return store
        dense_vals = store.values.astype(np.float32)
        q, scale = quantize_tensor(dense_vals)
        return SparseBitmap(store.shape, store.bitmap, q, scale)
    if isinstance(store, Clustered):
        if store.centroids.dtype == np.int8:
            return store
        q, scale = quantize_tensor(store.centroids)
        return Clustered(store.shape, q, store.indices, scale)
    raise ConfigError(f"cannot quantize store {type(store).__name__}")


def quantize(model: Model, level: str = "i8") -> Model:
    """Post-training weight quantization; no retraining afterwards.

    ``i8`` stores conv/dense weights (or sparse nonzeros / centroid tables)
    as int8 with a per-tensor scale; ``f16`` stores them as 16-bit floats.
    Zeros of a pruned layer stay exactly zero: only the surviving values are
    quantized and the bitmap is preserved.
    """
    if level not in QUANT_LEVELS:
        raise ConfigError(f"unknown quantization level {level!r}; choose from {QUANT_LEVELS}")
    out = model.clone()
    for layer in out.layers:
        if isinstance(layer, (ConvLayer, DenseLayer)):
            layer.store = _quantize_store(layer.store, level)
    suffix = "quantize-i8" if level == "i8" else "quantize-f16"
    out.technique = suffix if model.technique == "original" else f"{model.technique}+{suffix}"
    return out


# --- clustering -------------------------------------------------------------


def kmeanspp_init(values: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """D^2 seeding over scalars: first centroid uniform, each next drawn with
    probability proportional to squared distance to the nearest chosen one."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ConfigError("cannot seed centroids from an empty weight list")
    if k > np.unique(flat).size:
        raise ConfigError(f"k={k} exceeds the number of distinct values")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1]))
    centroids = np.empty(k)
    centroids[0] = flat[rng.integers(flat.size)]
    d2 = (flat - centroids[0]) ** 2
    for i in range(1, k):
        total = d2.sum()
        probs = d2 / total
        centroids[i] = flat[rng.choice(flat.size, p=probs)]
        d2 = np.minimum(d2, (flat - centroids[i]) ** 2)
    return centroids


def _init_centroids(flat: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    if cfg.init == "kmeanspp":
        return kmeanspp_init(flat, cfg.k, cfg.seed)
    if cfg.init == "linear":
        return np.linspace(flat.min(), flat.max(), cfg.k)
    if cfg.init == "random":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC2]))
        return rng.uniform(flat.min(), flat.max(), cfg.k)
    # density: equal-mass quantiles of the weight distribution
    qs = (np.arange(cfg.k) + 0.5) / cfg.k
    return np.quantile(flat, qs)


def lloyd_iterations(flat: np.ndarray, centroids: np.ndarray, max_iterations: int,
                     tolerance: float) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """1-D Lloyd iterations; returns (centroids, assignments, objective trace).

    The objective (sum of squared distances to the assigned centroid) is
    recorded after each assignment step and is non-increasing. An emptied
    cluster is re-seeded to the point currently farthest from its assigned
    centroid.
    """
    cents = centroids.astype(np.float64).copy()
    objective: list[float] = []
    assign = np.zeros(flat.size, dtype=np.int64)
    for _ in range(max_iterations):
        dist = (flat[:, None] - cents[None, :]) ** 2
        assign = np.argmin(dist, axis=1)
        closest = dist[np.arange(flat.size), assign]
        objective.append(float(closest.sum()))
        new_cents = cents.copy()
        counts = np.bincount(assign, minlength=cents.size)
        sums = np.bincount(assign, weights=flat, minlength=cents.size)
        nonempty = counts > 0
        new_cents[nonempty] = sums[nonempty] / counts[nonempty]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(closest))
            new_cents[j] = flat[far]
            closest[far] = 0.0
        move = float(np.max(np.abs(new_cents - cents)))
        cents = new_cents
        if move < tolerance:
            break
    dist = (flat[:, None] - cents[None, :]) ** 2
    assign = np.argmin(dist, axis=1)
    objective.append(float(dist[np.arange(flat.size), assign].sum()))
    return cents, assign, objective


def cluster_layer(values: np.ndarray, cfg: ClusterConfig) -> Clustered:
    """k-means over a layer's scalar weights; centroids stored ascending."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if cfg.k > flat.size:
        raise ConfigError(f"k={cfg.k} exceeds layer weight count {flat.size}")
    cents, assign, _ = lloyd_iterations(
        flat, _init_centroids(flat, cfg), cfg.max_iterations, cfg.tolerance
    )
    order = np.argsort(cents)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return Clustered(values.shape, cents[order].astype(np.float32), remap[assign])


def cluster_weights(model: Model, cfg: ClusterConfig) -> Model:
    """Replace each dense layer's weights by k shared centroid values."""
    out = model.clone()
    for layer in out.dense_layers():
        layer.store = cluster_layer(layer.store.to_dense(), cfg)
    out.technique = "cluster"
    return out


# --- fine-tuning and pipelines ----------------------------------------------


def fine_tune(model: Model, dataset, epochs: int, batch_size: int = 64,
              lr: float = 1e-4, seed: int = 0) -> Model:
    """Short retraining after pruning or clustering, in place.

    Masked positions receive zero gradient and stay exactly zero; clustered
    layers keep their assignments and move only the shared centroids (each
    by the mean gradient of its member weights).
    """
    constrained = any(
        isinstance(l.store, (SparseBitmap, Clustered)) for l in model.dense_layers()
    )
    if not constrained:
        raise ConfigError("fine_tune requires pruning masks or cluster assignments")
    planes = dataset.planes if hasattr(dataset, "planes") else np.asarray(dataset)
    if planes.shape[0] == 0:
        raise DataError("fine-tuning dataset is empty")
    if epochs < 1:
        raise ConfigError("fine-tune epochs must be positive")
    _run_training(model, planes, epochs, batch_size, lr, seed)
    return model


def prune_quantize(model: Model, dataset, sparsity: float, level: str = "i8",
                   fine_tune_epochs: int = 0, seed: int = 0) -> Model:
    """Prune, fine-tune, then quantize (in that order).

    Quantization of the sparse layers covers only the surviving values and
    preserves the bitmap, so zeros stay exactly zero.
    """
    out = prune_magnitude(model, PruneConfig(sparsity))
    if fine_tune_epochs > 0 and sparsity > 0:
        fine_tune(out, dataset, fine_tune_epochs, seed=seed)
    out = quantize(out, level)
    out.technique = f"prune{int(round(sparsity * 100))}+quantize-{level}"
    return out


def cluster_quantize(model: Model, dataset, cfg: ClusterConfig, level: str = "i8",
                     seed: int = 0) -> Model:
    """Cluster, fine-tune, then quantize the centroid tables and conv layers."""
    out = cluster_weights(model, cfg)
    if cfg.fine_tune_epochs > 0:
        fine_tune(out, dataset, cfg.fine_tune_epochs, seed=seed)
    out = quantize(out, level)
    out.technique = f"cluster{cfg.k}+quantize-{level}"
    return out
