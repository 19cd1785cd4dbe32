"""CSI feedback autoencoder: architecture, forward passes and training.

The network follows the reference layout this toolkit compresses: an
encoder (3x3 conv + batch norm + leaky ReLU, flatten, dense N -> M) and a
decoder (dense M -> N, reshape, two residual refinement blocks with
8/16/2-filter convolutions, final 2-filter conv + sigmoid). The codeword
length M is derived from the compression ratio gamma = M / N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .optim import AdamState, adam_step
from .tensor import BatchNormState, Tensor
from .weights import Clustered, DenseF32, SparseBitmap, WeightStore

LEAKY_SLOPE = 0.3


@dataclass(frozen=True)
class ModelSpec:
    n_delay: int
    n_tx: int
    gamma: float
    planes: int = 2
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if min(self.n_delay, self.n_tx, self.planes) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.code_dim < 1:
            raise ConfigError(
                f"gamma {self.gamma} yields codeword length {self.code_dim} < 1"
            )

    @property
    def input_dim(self) -> int:
        return self.planes * self.n_delay * self.n_tx

    @property
    def code_dim(self) -> int:
        return int(np.floor(self.gamma * self.input_dim + 0.5))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.planes, self.n_delay, self.n_tx)


# --- layers ---------------------------------------------------------------


@dataclass
class ConvLayer:
    store: WeightStore          # kernel [F, C, 3, 3]
    bias: np.ndarray            # [F]

    def __post_init__(self):
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)

    @property
    def out_channels(self) -> int:
        return self.store.shape[0]

    @property
    def in_channels(self) -> int:
        return self.store.shape[1]


@dataclass
class DenseLayer:
    store: WeightStore          # weights [n_in, n_out]
    bias: np.ndarray            # [n_out]

    def __post_init__(self):
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)

    @property
    def n_in(self) -> int:
        return self.store.shape[0]

    @property
    def n_out(self) -> int:
        return self.store.shape[1]


@dataclass
class BatchNormLayer:
    state: BatchNormState


@dataclass
class LeakyReluLayer:
    slope: float = LEAKY_SLOPE


class SigmoidLayer:
    pass


class FlattenLayer:
    pass


@dataclass
class ReshapeLayer:
    shape: tuple[int, int, int]


class SkipBeginLayer:
    pass


class SkipEndLayer:
    pass


Layer = (
    ConvLayer | DenseLayer | BatchNormLayer | LeakyReluLayer | SigmoidLayer
    | FlattenLayer | ReshapeLayer | SkipBeginLayer | SkipEndLayer
)


class Model:
    """Ordered layer list plus training metadata."""

    def __init__(self, spec: ModelSpec, layers: list[Layer], technique: str = "original"):
        self.spec = spec
        self.layers = layers
        self.technique = technique
        self.epochs_seen = 0
        self.loss_history: list[float] = []
        dense_positions = [i for i, l in enumerate(layers) if isinstance(l, DenseLayer)]
        if len(dense_positions) != 2:
            raise ConfigError(f"model must contain exactly two dense layers, found {len(dense_positions)}")
        self._encode_end = dense_positions[0] + 1

    @property
    def encoder_layers(self) -> list[Layer]:
        return self.layers[: self._encode_end]

    @property
    def decoder_layers(self) -> list[Layer]:
        return self.layers[self._encode_end :]

    def dense_layers(self) -> list[DenseLayer]:
        return [l for l in self.layers if isinstance(l, DenseLayer)]

    def conv_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def param_count(self) -> int:
        """Number of trainable scalars (weights, biases, batch-norm affine)."""
        total = 0
        for layer in self.layers:
            if isinstance(layer, (ConvLayer, DenseLayer)):
                total += int(np.prod(layer.store.shape)) + layer.bias.size
            elif isinstance(layer, BatchNormLayer):
                total += 2 * layer.state.channels
        return total

    def clone(self) -> "Model":
        import copy

        dup = Model(self.spec, copy.deepcopy(self.layers), technique=self.technique)
        dup.epochs_seen = self.epochs_seen
        dup.loss_history = list(self.loss_history)
        return dup


def _refinement_block(rng: np.random.Generator, widths: tuple[int, ...], slope: float) -> list[Layer]:
    layers: list[Layer] = [SkipBeginLayer()]
    for cin, cout in zip(widths[:-1], widths[1:]):
        layers.append(ConvLayer(DenseF32(_conv_init(rng, cout, cin)), np.zeros(cout)))
        layers.append(BatchNormLayer(BatchNormState(cout)))
        layers.append(LeakyReluLayer(slope))
    layers.append(SkipEndLayer())
    return layers


def _conv_init(rng: np.random.Generator, out_ch: int, in_ch: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_ch * 9)
    return rng.uniform(-bound, bound, (out_ch, in_ch, 3, 3)).astype(np.float32)


def _dense_init(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, (n_in, n_out)).astype(np.float32)


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Construct the autoencoder with fan-in-scaled uniform init, fixed seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    planes = spec.planes
    n, m = spec.input_dim, spec.code_dim
    slope = spec.leaky_slope

    layers: list[Layer] = [
        ConvLayer(DenseF32(_conv_init(rng, planes, planes)), np.zeros(planes)),
        BatchNormLayer(BatchNormState(planes)),
        LeakyReluLayer(slope),
        FlattenLayer(),
        DenseLayer(DenseF32(_dense_init(rng, n, m)), np.zeros(m)),
        DenseLayer(DenseF32(_dense_init(rng, m, n)), np.zeros(n)),
        ReshapeLayer(spec.input_shape),
    ]
    layers += _refinement_block(rng, (planes, 8, 16, planes), slope)
    layers += _refinement_block(rng, (planes, 8, 16, planes), slope)
    layers.append(ConvLayer(DenseF32(_conv_init(rng, planes, planes)), np.zeros(planes)))
    layers.append(SigmoidLayer())
    return Model(spec, layers)


# --- forward --------------------------------------------------------------


class _LayerTensors:
    """Materialized parameter tensors for one forward/backward session."""

    def __init__(self, model: Model, trainable: bool):
        self.entries: dict[int, tuple[Tensor, Tensor]] = {}
        self.cluster_ties: list[tuple[Tensor, Tensor, np.ndarray]] = []
        self.params: list[Tensor] = []
        for idx, layer in enumerate(model.layers):
            if isinstance(layer, (ConvLayer, DenseLayer)):
                store = layer.store
                if trainable and not isinstance(store, (DenseF32, SparseBitmap, Clustered)):
                    raise ConfigError(
                        f"layer {idx}: cannot train a {type(store).__name__} store"
                    )
                if trainable and isinstance(store, SparseBitmap) and store.values.dtype != np.float32:
                    raise ConfigError(f"layer {idx}: cannot train quantized sparse values")
                if trainable and isinstance(store, Clustered) and store.centroids.dtype != np.float32:
                    raise ConfigError(f"layer {idx}: cannot train quantized centroids")
                weights = Tensor(store.to_dense(), requires_grad=trainable)
                bias = Tensor(layer.bias, requires_grad=trainable)
                self.entries[idx] = (weights, bias)
                if not trainable:
                    continue
                if isinstance(store, SparseBitmap):
                    weights.mask = store.mask().astype(np.float32)
                    self.params += [weights, bias]
                elif isinstance(store, Clustered):
                    cent = Tensor(store.centroid_table(), requires_grad=True)
                    self.cluster_ties.append((weights, cent, store.indices))
                    self.params += [cent, bias]
                else:
                    self.params += [weights, bias]
            elif isinstance(layer, BatchNormLayer) and trainable:
                self.params += [layer.state.scale, layer.state.shift]

    def centroid_grads(self) -> None:
        """Mean gradient of member weights drives each shared centroid."""
        for weights, cent, indices in self.cluster_ties:
            counts = np.bincount(indices, minlength=cent.data.size)
            sums = np.bincount(indices, weights=weights.grad.reshape(-1).astype(np.float64),
                               minlength=cent.data.size)
            cent.grad = (sums / np.maximum(counts, 1)).astype(np.float32)

    def apply_constraints(self) -> None:
        """Re-impose masks and shared centroids after an optimizer step."""
        for weights, _ in self.entries.values():
            if weights.mask is not None:
                weights.data *= weights.mask
        for weights, cent, indices in self.cluster_ties:
            weights.data[:] = cent.data[indices].reshape(weights.data.shape)

    def write_back(self, model: Model) -> None:
        for idx, (weights, bias) in self.entries.items():
            layer = model.layers[idx]
            store = layer.store
            if isinstance(store, SparseBitmap):
                flat_mask = store.mask().reshape(-1)
                layer.store = SparseBitmap(
                    store.shape, store.bitmap, weights.data.reshape(-1)[flat_mask]
                )
            elif isinstance(store, Clustered):
                tie = next(c for w, c, _ in self.cluster_ties if w is weights)
                layer.store = Clustered(store.shape, tie.data.copy(), store.indices)
            else:
                layer.store = DenseF32(weights.data)
            layer.bias = bias.data


def _forward(model: Model, x: Tensor, training: bool, tensors: _LayerTensors,
             start: int = 0, end: int | None = None) -> Tensor:
    skips: list[Tensor] = []
    stop = len(model.layers) if end is None else end
    out = x
    for idx in range(start, stop):
        layer = model.layers[idx]
        if isinstance(layer, ConvLayer):
            w, b = tensors.entries[idx]
            out = T.conv2d(out, w, b)
        elif isinstance(layer, DenseLayer):
            w, b = tensors.entries[idx]
            out = T.dense(out, w, b)
        elif isinstance(layer, BatchNormLayer):
            out = T.batch_norm(out, layer.state, training)
        elif isinstance(layer, LeakyReluLayer):
            out = T.leaky_relu(out, layer.slope)
        elif isinstance(layer, SigmoidLayer):
            out = T.sigmoid(out)
        elif isinstance(layer, FlattenLayer):
            out = T.flatten(out)
        elif isinstance(layer, ReshapeLayer):
            out = T.reshape(out, (out.data.shape[0], *layer.shape))
        elif isinstance(layer, SkipBeginLayer):
            skips.append(out)
        elif isinstance(layer, SkipEndLayer):
            out = T.add(out, skips.pop())
        else:  # pragma: no cover
            raise ConfigError(f"unknown layer type {type(layer).__name__}")
    return out


def _as_batch(planes: np.ndarray, spec: ModelSpec) -> tuple[np.ndarray, bool]:
    arr = np.asarray(planes, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"sample shape {arr.shape[1:]} does not match model input {spec.input_shape}"
        )
    return arr, single


def encode(model: Model, planes: np.ndarray) -> np.ndarray:
    """Deterministic encoder pass; returns codewords of length M."""
    batch, single = _as_batch(planes, model.spec)
    with T.no_grad():
        tensors = _LayerTensors(model, trainable=False)
        out = _forward(model, Tensor(batch), False, tensors, end=model._encode_end)
    return out.data[0] if single else out.data


def decode(model: Model, codewords: np.ndarray) -> np.ndarray:
    """Deterministic decoder pass; outputs lie in (0, 1) via the sigmoid head."""
    arr = np.asarray(codewords, dtype=np.float32)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.shape[1] != model.spec.code_dim:
        raise ShapeError(
            f"codeword length {arr.shape[1]} does not match M={model.spec.code_dim}"
        )
    with T.no_grad():
        tensors = _LayerTensors(model, trainable=False)
        out = _forward(model, Tensor(arr), False, tensors, start=model._encode_end)
    return out.data[0] if single else out.data


def reconstruct(model: Model, planes: np.ndarray) -> np.ndarray:
    """encode followed by decode, batched."""
    return decode(model, encode(model, planes))


def _run_training(model: Model, planes: np.ndarray, epochs: int, batch_size: int,
                  lr: float, seed: int) -> list[float]:
    tensors = _LayerTensors(model, trainable=True)
    sample_count = planes.shape[0]
    state = AdamState(tensors.params, lr) if lr > 0 else None
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17]))
    history: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(sample_count)
        epoch_losses = []
        for start in range(0, sample_count, batch_size):
            batch = planes[order[start : start + batch_size]]
            x = Tensor(batch)
            out = _forward(model, x, True, tensors)
            loss = T.mse_loss(out, Tensor(batch))
            T.backward(loss)
            if state is not None:
                tensors.centroid_grads()
                adam_step(state, tensors.params, [p.grad for p in tensors.params])
                tensors.apply_constraints()
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
    tensors.write_back(model)
    model.epochs_seen += epochs
    model.loss_history.extend(history)
    return history


def train(model: Model, dataset, epochs: int, batch_size: int = 64,
          lr: float = 1e-3, seed: int = 0) -> tuple[Model, list[float]]:
    """Adam on reconstruction MSE; returns the model and per-epoch losses."""
    planes = dataset.planes if hasattr(dataset, "planes") else np.asarray(dataset)
    if planes.shape[0] == 0:
        raise DataError("training dataset is empty")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch size must be positive")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    _as_batch(planes, model.spec)
    history = _run_training(model, planes, epochs, batch_size, lr, seed)
    return model, history
