"""
Minimal differentiable CNN core on numpy arrays.
Activations are NHWC; conv weights are (kh, kw, c_in, c_out), dense weights (in, out).
Computation runs in the dtype of the parameters (float32 unless a caller opts into float64).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ParamsFormatError, RejectedInputError
from src.models import LabeledDataset, LayerSpec, NetworkSpec

logger = logging.getLogger(__name__)

Tensor = np.ndarray
DEFAULT_DTYPE = np.float32

PARAMS_MAGIC = b"FSUP"
PARAMS_VERSION = 1


class RngStream:
    """Deterministic random source identified by (seed, stream id)"""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> "RngStream":
        """Independent stream derived from this one and the given keys"""
        state = np.random.SeedSequence(entropy=[self.stream, *keys]).generate_state(1, np.uint64)
        return RngStream(self.seed, int(state[0]))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


@dataclass(frozen=True)
class ParamEntry:
    layer_index: int
    weight: Tensor
    bias: Tensor


@dataclass(frozen=True)
class ModelParams:
    """Ordered (layer index, weight, bias) entries of one network"""
    entries: Tuple[ParamEntry, ...]

    def tensors(self) -> Iterator[Tensor]:
        for entry in self.entries:
            yield entry.weight
            yield entry.bias

    def shapes(self) -> List[Tuple[int, Tuple[int, ...], Tuple[int, ...]]]:
        return [(e.layer_index, e.weight.shape, e.bias.shape) for e in self.entries]

    @property
    def dtype(self) -> np.dtype:
        return self.entries[0].weight.dtype if self.entries else np.dtype(DEFAULT_DTYPE)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(tuple(
            ParamEntry(e.layer_index, e.weight.astype(dtype), e.bias.astype(dtype))
            for e in self.entries
        ))


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

def build_landmark_net(input_shape: Tuple[int, int, int] = (32, 32, 1),
                       conv_dropout: float = 0.25,
                       dense_dropout: float = 0.5) -> NetworkSpec:
    """Eye landmarks CNN: three conv blocks, two 1024-unit dense layers, 10 outputs"""
    layers = [
        LayerSpec(kind="conv2d", kernel=(3, 3), channels=32),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", pool=2),
        LayerSpec(kind="dropout", rate=conv_dropout),
        LayerSpec(kind="conv2d", kernel=(3, 3), channels=64),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", pool=2),
        LayerSpec(kind="conv2d", kernel=(2, 2), channels=128),
        LayerSpec(kind="relu"),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=1024),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dropout", rate=dense_dropout),
        LayerSpec(kind="dense", units=1024),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dropout", rate=dense_dropout),
        LayerSpec(kind="dense", units=10),
        LayerSpec(kind="softmax"),
    ]
    return NetworkSpec(name="landmark", layers=tuple(layers), input_shape=input_shape, num_classes=10)


def build_blink_net(input_shape: Tuple[int, int, int] = (24, 24, 1),
                    conv_dropout: float = 0.25,
                    dense_dropout: float = 0.5) -> NetworkSpec:
    """Eye feature extraction CNN: two conv blocks, 128-unit dense layer, open/closed output"""
    layers = [
        LayerSpec(kind="conv2d", kernel=(3, 3), channels=32),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", pool=2),
        LayerSpec(kind="dropout", rate=conv_dropout),
        LayerSpec(kind="conv2d", kernel=(3, 3), channels=64),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", pool=2),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=128),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dropout", rate=dense_dropout),
        LayerSpec(kind="dense", units=2),
        LayerSpec(kind="softmax"),
    ]
    return NetworkSpec(name="blink", layers=tuple(layers), input_shape=input_shape, num_classes=2)


def build_network(name: str, input_shape: Tuple[int, int, int],
                  conv_dropout: float = 0.25, dense_dropout: float = 0.5) -> NetworkSpec:
    builders = {"blink": build_blink_net, "landmark": build_landmark_net}
    if name not in builders:
        raise RejectedInputError(f"Unknown network '{name}', expected one of {sorted(builders)}")
    try:
        return builders[name](input_shape, conv_dropout, dense_dropout)
    except ValueError as e:
        raise RejectedInputError(f"Network '{name}' does not fit input {input_shape}: {e}") from e


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    try:
        return spec.layer_shapes()
    except ValueError as e:
        raise RejectedInputError(str(e)) from e


def expected_param_shapes(spec: NetworkSpec) -> List[Tuple[int, Tuple[int, ...], Tuple[int, ...]]]:
    shapes = []
    previous = tuple(spec.input_shape)
    for index, (layer, out_shape) in enumerate(zip(spec.layers, infer_shapes(spec))):
        if layer.kind == "conv2d":
            kh, kw = layer.kernel
            shapes.append((index, (kh, kw, previous[2], layer.channels), (layer.channels,)))
        elif layer.kind == "dense":
            shapes.append((index, (previous[0], layer.units), (layer.units,)))
        previous = out_shape
    return shapes


def init_params(spec: NetworkSpec, rng: RngStream, dtype=DEFAULT_DTYPE) -> ModelParams:
    """He-normal weights with std sqrt(2 / fan_in), zero biases"""
    entries = []
    for index, w_shape, b_shape in expected_param_shapes(spec):
        fan_in = int(np.prod(w_shape[:-1]))
        std = np.sqrt(2.0 / fan_in)
        weight = (rng.generator.standard_normal(w_shape) * std).astype(dtype)
        entries.append(ParamEntry(index, weight, np.zeros(b_shape, dtype=dtype)))
    return ModelParams(tuple(entries))


def check_params(spec: NetworkSpec, params: ModelParams) -> None:
    expected = expected_param_shapes(spec)
    if params.shapes() != expected:
        raise RejectedInputError(
            f"Parameters do not match network '{spec.name}': got {params.shapes()}, expected {expected}"
        )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _conv_forward(x, weight, bias):
    kh, kw = weight.shape[:2]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (B, Ho, Wo, C, kh, kw)
    out = np.tensordot(windows, weight, axes=([3, 4, 5], [2, 0, 1])) + bias
    return out, windows


def _conv_backward(dout, windows, weight):
    kh, kw = weight.shape[:2]
    d_weight = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    d_bias = dout.sum(axis=(0, 1, 2))
    padded = np.pad(dout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    d_windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # (B, H, W, C_out, kh, kw)
    flipped = weight[::-1, ::-1]
    d_x = np.tensordot(d_windows, flipped, axes=([3, 4, 5], [3, 0, 1]))
    return d_x, d_weight, d_bias


def _pool_forward(x, pool):
    b, h, w, c = x.shape
    ho, wo = h // pool, w // pool
    blocks = (x[:, :ho * pool, :wo * pool, :]
              .reshape(b, ho, pool, wo, pool, c)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(b, ho, wo, c, pool * pool))
    winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
    return out, (x.shape, winners)


def _pool_backward(dout, cache, pool):
    in_shape, winners = cache
    b, ho, wo, c = dout.shape
    blocks = np.zeros((b, ho, wo, c, pool * pool), dtype=dout.dtype)
    np.put_along_axis(blocks, winners[..., None], dout[..., None], axis=-1)
    grid = (blocks.reshape(b, ho, wo, c, pool, pool)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, ho * pool, wo * pool, c))
    d_x = np.zeros(in_shape, dtype=dout.dtype)
    d_x[:, :ho * pool, :wo * pool, :] = grid
    return d_x


def _dropout_mask(shape, rate, rng: RngStream, dtype):
    keep = 1.0 - rate
    draws = rng.generator.random(shape)
    return (draws < keep).astype(dtype) / dtype.type(keep)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    # saturated rows stay strictly inside (0, 1)
    one = probs.dtype.type(1)
    return np.clip(probs, np.finfo(probs.dtype).tiny, np.nextafter(one, probs.dtype.type(0)))


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _prepare_batch(spec: NetworkSpec, batch, dtype) -> Tensor:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise RejectedInputError(
            f"Batch shape {batch.shape} does not match (B, {', '.join(map(str, spec.input_shape))})"
        )
    return batch.astype(dtype, copy=False)


def _forward_pass(spec, params, batch, dropout_enabled, rng):
    """Run every layer but the softmax; returns logits and per-layer caches"""
    check_params(spec, params)
    dtype = params.dtype
    x = _prepare_batch(spec, batch, dtype)
    by_layer = {e.layer_index: e for e in params.entries}
    caches = []
    for index, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "softmax":
            caches.append(None)
            break
        if kind == "conv2d":
            entry = by_layer[index]
            x, cache = _conv_forward(x, entry.weight, entry.bias)
        elif kind == "maxpool2d":
            x, cache = _pool_forward(x, layer.pool)
        elif kind == "relu":
            cache = x > 0
            x = x * cache
        elif kind == "dropout":
            cache = None
            if dropout_enabled and layer.rate > 0:
                if rng is None:
                    raise RejectedInputError("Dropout sampling needs an RngStream")
                cache = _dropout_mask(x.shape, layer.rate, rng, x.dtype)
                x = x * cache
        elif kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            entry = by_layer[index]
            cache = x
            x = x @ entry.weight + entry.bias
        caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, params: ModelParams, batch: Tensor,
            dropout_enabled: bool = False, rng: Optional[RngStream] = None) -> Tensor:
    """Class probabilities (B, num_classes); dropout masks are drawn from rng when enabled"""
    logits, _ = _forward_pass(spec, params, batch, dropout_enabled, rng)
    return _softmax(logits)


def loss_and_grads(spec: NetworkSpec, params: ModelParams, batch: Tensor, labels,
                   rng: Optional[RngStream]) -> Tuple[float, ModelParams]:
    """Mean cross-entropy in training mode and its gradient w.r.t. every parameter"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) != len(batch):
        raise RejectedInputError(f"Expected {len(batch)} labels, got shape {labels.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise RejectedInputError(f"Labels must be in [0, {spec.num_classes})")

    logits, caches = _forward_pass(spec, params, batch, True, rng)
    n = len(labels)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(n), labels].mean())

    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    grad /= n

    by_layer = {e.layer_index: e for e in params.entries}
    grads = {}
    for index in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[index]
        cache = caches[index]
        if layer.kind == "dense":
            entry = by_layer[index]
            grads[index] = (cache.T @ grad, grad.sum(axis=0))
            grad = grad @ entry.weight.T
        elif layer.kind == "conv2d":
            entry = by_layer[index]
            grad, d_weight, d_bias = _conv_backward(grad, cache, entry.weight)
            grads[index] = (d_weight, d_bias)
        elif layer.kind == "maxpool2d":
            grad = _pool_backward(grad, cache, layer.pool)
        elif layer.kind == "relu":
            grad = grad * cache
        elif layer.kind == "dropout":
            if cache is not None:
                grad = grad * cache
        elif layer.kind == "flatten":
            grad = grad.reshape(cache)

    dtype = params.dtype
    entries = tuple(
        ParamEntry(e.layer_index, grads[e.layer_index][0].astype(dtype), grads[e.layer_index][1].astype(dtype))
        for e in params.entries
    )
    return loss, ModelParams(entries)


# ---------------------------------------------------------------------------
# Parameter algebra
# ---------------------------------------------------------------------------

def check_compatible(a: ModelParams, b: ModelParams) -> None:
    if a.shapes() != b.shapes():
        raise RejectedInputError(f"Parameter structures differ: {a.shapes()} vs {b.shapes()}")


def sgd_step(params: ModelParams, grads: ModelParams, eta: float) -> ModelParams:
    if eta < 0:
        raise RejectedInputError(f"Learning rate must be >= 0, got {eta}")
    check_compatible(params, grads)
    step = params.dtype.type(eta)
    return ModelParams(tuple(
        ParamEntry(p.layer_index, p.weight - step * g.weight, p.bias - step * g.bias)
        for p, g in zip(params.entries, grads.entries)
    ))


def weighted_sum(params_list: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Σ weights[i] · params_list[i], accumulated in list order in float64"""
    if not params_list:
        raise RejectedInputError("Cannot combine an empty parameter list")
    if len(params_list) != len(weights):
        raise RejectedInputError("One weight per parameter set is required")
    first = params_list[0]
    for other in params_list[1:]:
        check_compatible(first, other)
    entries = []
    for position, entry in enumerate(first.entries):
        weight = np.zeros(entry.weight.shape, dtype=np.float64)
        bias = np.zeros(entry.bias.shape, dtype=np.float64)
        for params, w in zip(params_list, weights):
            weight += w * params.entries[position].weight
            bias += w * params.entries[position].bias
        entries.append(ParamEntry(entry.layer_index, weight.astype(first.dtype), bias.astype(first.dtype)))
    return ModelParams(tuple(entries))


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(tuple(
        ParamEntry(e.layer_index, np.zeros_like(e.weight), np.zeros_like(e.bias)) for e in params.entries
    ))


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of structure and values"""
    return a.shapes() == b.shapes() and all(
        np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors())
    )


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def train_epochs(spec: NetworkSpec, params: ModelParams, images: Tensor, labels,
                 epochs: int, eta: float, batch_size: int, rng: RngStream) -> Tuple[ModelParams, float]:
    """Shuffled mini-batch SGD; returns the new params and the last epoch's mean loss"""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    last_loss = 0.0
    if n == 0:
        return params, last_loss
    for epoch in range(epochs):
        order = rng.generator.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            chosen = order[start:start + batch_size]
            loss, grads = loss_and_grads(spec, params, images[chosen], labels[chosen], rng)
            params = sgd_step(params, grads, eta)
            losses.append(loss * len(chosen))
        last_loss = sum(losses) / n
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss {last_loss:.4f} over {n} samples")
    return params, last_loss


def predict_classes(spec: NetworkSpec, params: ModelParams, images: Tensor, batch_size: int = 256) -> np.ndarray:
    """Deterministic argmax predictions; ties go to the lowest class index"""
    predictions = []
    for start in range(0, len(images), batch_size):
        probs = forward(spec, params, images[start:start + batch_size], dropout_enabled=False)
        predictions.append(probs.argmax(axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def evaluate(spec: NetworkSpec, params: ModelParams, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise RejectedInputError("Cannot evaluate on an empty dataset")
    predictions = predict_classes(spec, params, dataset.images)
    return float(np.mean(predictions == dataset.labels))


# ---------------------------------------------------------------------------
# FSUP serialization
# ---------------------------------------------------------------------------

def serialized_size(params: ModelParams) -> int:
    size = len(PARAMS_MAGIC) + 8
    for tensor in params.tensors():
        size += 8 + 4 * tensor.ndim + 4 * tensor.size
    return size


def params_to_bytes(params: ModelParams) -> bytes:
    chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, 2 * len(params.entries))]
    for entry in params.entries:
        for tensor in (entry.weight, entry.bias):
            chunks.append(struct.pack(f"<II{tensor.ndim}I", entry.layer_index, tensor.ndim, *tensor.shape))
            chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> ModelParams:
    def read_u32(offset: int, count: int = 1):
        end = offset + 4 * count
        if end > len(blob):
            raise ParamsFormatError("Truncated header field", offset)
        return struct.unpack_from(f"<{count}I", blob, offset), end

    if blob[:4] != PARAMS_MAGIC:
        raise ParamsFormatError("Bad magic, expected FSUP", 0)
    (version, count), offset = read_u32(4, 2)
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"Unsupported format version {version}", 4)
    if count % 2:
        raise ParamsFormatError(f"Record count {count} is not weight/bias paired", 8)
    records = []
    for _ in range(count):
        start = offset
        (layer_index, rank), offset = read_u32(offset, 2)
        dims, offset = read_u32(offset, rank) if rank else ((), offset)
        size = int(np.prod(dims)) if dims else 1
        end = offset + 4 * size
        if end > len(blob):
            raise ParamsFormatError(f"Truncated payload for layer {layer_index}", offset)
        tensor = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims).astype(np.float32)
        records.append((start, layer_index, tensor))
        offset = end
    if offset != len(blob):
        raise ParamsFormatError("Trailing bytes after last record", offset)
    entries = []
    for (start, index_w, weight), (_, index_b, bias) in zip(records[::2], records[1::2]):
        if index_w != index_b:
            raise ParamsFormatError(f"Weight/bias layer index mismatch ({index_w} vs {index_b})", start)
        entries.append(ParamEntry(index_w, weight, bias))
    return ModelParams(tuple(entries))


def save_params(params: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
