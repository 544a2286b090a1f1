"""
Neural network engine for lithography hotspot models
Conv2D / Dense / ReLU / Flatten / global max-pool layers with exact backpropagation,
SGD and Adam optimizers and finite-difference gradient checking.
All arithmetic is float64; every function is pure in its inputs.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64
NUM_CLASSES = 2

# Gradient check defaults
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_FRACTION = 0.05
# Denominator floor for relative errors of near-zero gradient entries
GRADCHECK_REL_FLOOR = 1e-5

Shape = Tuple[int, ...]


class EngineError(Exception):
    """Base class for engine failures"""


class ShapeError(EngineError, ValueError):
    """Shape inference or shape matching failed"""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteError(EngineError, ArithmeticError):
    """A NaN or Inf showed up in an activation, loss or gradient"""


def check_finite(array, what: str):
    """Raise NonFiniteError if `array` holds NaN/Inf, else return it"""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")
    return array


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

class LayerKind(str, Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    RELU = "relu"
    FLATTEN = "flatten"
    GLOBAL_MAX_POOL = "global_max_pool"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    kernel: Tuple[int, int] = (1, 1)
    out_channels: int = 0
    stride: int = 1
    padding: str = "same"
    units: int = 0

    def __post_init__(self):
        if not self.name:
            raise ShapeError("layer name must be a non-empty string")
        if self.kind == LayerKind.CONV2D:
            kh, kw = self.kernel
            if kh < 1 or kw < 1:
                raise ShapeError(f"layer {self.name}: kernel dims must be >= 1, got {self.kernel}", self.name)
            if self.stride < 1:
                raise ShapeError(f"layer {self.name}: stride must be >= 1, got {self.stride}", self.name)
            if self.padding not in ("same", "valid"):
                raise ShapeError(f"layer {self.name}: padding must be 'same' or 'valid'", self.name)
            if self.out_channels < 1:
                raise ShapeError(f"layer {self.name}: out_channels must be >= 1", self.name)
        if self.kind == LayerKind.DENSE and self.units < 1:
            raise ShapeError(f"layer {self.name}: units must be >= 1", self.name)

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DENSE)


def conv2d(name: str, kernel: Tuple[int, int], out_channels: int, stride: int = 1, padding: str = "same") -> LayerSpec:
    return LayerSpec(name, LayerKind.CONV2D, kernel=tuple(kernel), out_channels=out_channels,
                     stride=stride, padding=padding)


def dense(name: str, units: int) -> LayerSpec:
    return LayerSpec(name, LayerKind.DENSE, units=units)


def relu(name: str) -> LayerSpec:
    return LayerSpec(name, LayerKind.RELU)


def flatten(name: str) -> LayerSpec:
    return LayerSpec(name, LayerKind.FLATTEN)


def global_max_pool(name: str) -> LayerSpec:
    """Max over all spatial positions, one value per channel"""
    return LayerSpec(name, LayerKind.GLOBAL_MAX_POOL)


class ConvGeometry(NamedTuple):
    out_h: int
    out_w: int
    pad_h: Tuple[int, int]
    pad_w: Tuple[int, int]


def _same_padding(size: int, k: int, stride: int) -> Tuple[int, Tuple[int, int]]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, (total // 2, total - total // 2)


def conv_geometry(layer: LayerSpec, in_shape: Shape) -> ConvGeometry:
    """Output size and padding of a Conv2D layer for an H×W×C input"""
    if len(in_shape) != 3:
        raise ShapeError(f"layer {layer.name} expects an HxWxC input, got {in_shape}", layer.name)
    h, w, _ = in_shape
    kh, kw = layer.kernel
    s = layer.stride
    if layer.padding == "same":
        out_h, pad_h = _same_padding(h, kh, s)
        out_w, pad_w = _same_padding(w, kw, s)
        return ConvGeometry(out_h, out_w, pad_h, pad_w)
    if kh > h or kw > w:
        raise ShapeError(
            f"layer {layer.name}: kernel {kh}x{kw} larger than input {h}x{w} with valid padding", layer.name
        )
    return ConvGeometry((h - kh) // s + 1, (w - kw) // s + 1, (0, 0), (0, 0))


def _layer_output_shape(layer: LayerSpec, in_shape: Shape) -> Shape:
    if layer.kind == LayerKind.CONV2D:
        geom = conv_geometry(layer, in_shape)
        return (geom.out_h, geom.out_w, layer.out_channels)
    if layer.kind == LayerKind.DENSE:
        if len(in_shape) != 1:
            raise ShapeError(f"layer {layer.name}: Dense expects a flat input, got {in_shape}", layer.name)
        return (layer.units,)
    if layer.kind == LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    if layer.kind == LayerKind.GLOBAL_MAX_POOL:
        if len(in_shape) != 3:
            raise ShapeError(f"layer {layer.name} expects an HxWxC input, got {in_shape}", layer.name)
        return (in_shape[-1],)
    return tuple(in_shape)


def _infer(input_shape: Shape, layers: Sequence[LayerSpec]) -> List[Shape]:
    shapes = []
    current = tuple(input_shape)
    for layer in layers:
        current = _layer_output_shape(layer, current)
        shapes.append(current)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    shared_layer_names: FrozenSet[str] = frozenset()
    num_classes: int = NUM_CLASSES
    output_shapes: Tuple[Shape, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shared_layer_names", frozenset(self.shared_layer_names))
        if not self.layers:
            raise ShapeError("model has no layers")
        names = [layer.name for layer in self.layers]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ShapeError(f"duplicate layer names: {', '.join(duplicates)}", duplicates[0])
        by_name = {layer.name: layer for layer in self.layers}
        for name in sorted(self.shared_layer_names):
            if name not in by_name:
                raise ShapeError(f"shared layer {name} is not a layer of this model", name)
            if not by_name[name].has_params:
                raise ShapeError(f"shared layer {name} has no parameters", name)
        shapes = _infer(self.input_shape, self.layers)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"final layer {names[-1]} outputs {shapes[-1]}, expected ({self.num_classes},)", names[-1]
            )
        object.__setattr__(self, "output_shapes", tuple(shapes))

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    @property
    def param_layers(self) -> List[str]:
        """Names of parameterized layers in forward order"""
        return [layer.name for layer in self.layers if layer.has_params]

    @property
    def shared_param_layers(self) -> List[str]:
        return [name for name in self.param_layers if name in self.shared_layer_names]

    @property
    def private_param_layers(self) -> List[str]:
        return [name for name in self.param_layers if name not in self.shared_layer_names]

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.output_shapes[index - 1]

    def with_shared(self, names: Iterable[str]) -> "ModelSpec":
        return replace(self, shared_layer_names=frozenset(names))


def infer_shapes(spec: ModelSpec) -> List[Shape]:
    """Output shape after each layer, in layer order"""
    return list(spec.output_shapes)


# ---------------------------------------------------------------------------
# Model zoo
# ---------------------------------------------------------------------------

SHARED_LAYERS = ("Conv1", "FC2", "FC3")
INPUT_SHAPE = (12, 12, 1)


def hotspot_cnn_spec(mid_channels: Tuple[int, int, int] = (16, 16, 32),
                shared: Iterable[str] = SHARED_LAYERS) -> ModelSpec:
    """Hotspot CNN: five 3x3 convolutions and three fully connected layers"""
    c2, c3, c4 = mid_channels
    layers = (
        conv2d("Conv1", (3, 3), 16), relu("ReLU1"),
        conv2d("Conv2", (3, 3), c2), relu("ReLU2"),
        conv2d("Conv3", (3, 3), c3), relu("ReLU3"),
        conv2d("Conv4", (3, 3), c4), relu("ReLU4"),
        # stride 1 / valid cannot produce 6x6x32 from 12x12; stride 2 / same does
        conv2d("Conv5", (3, 3), 32, stride=2, padding="same"), relu("ReLU5"),
        flatten("Flatten"),
        dense("FC1", 320), relu("ReLU6"),
        dense("FC2", 240), relu("ReLU7"),
        dense("FC3", NUM_CLASSES),
    )
    return ModelSpec(INPUT_SHAPE, layers, frozenset(shared))


def hotspot_cnn_wide_spec(shared: Iterable[str] = SHARED_LAYERS) -> ModelSpec:
    """Wide variant: Conv2-Conv4 at 24 channels, shared layer shapes unchanged"""
    return hotspot_cnn_spec((24, 24, 24), shared)


def compact_spec(width: int = 8, shared: Iterable[str] = SHARED_LAYERS) -> ModelSpec:
    """Small CNN with the same shared-layer names, for desk runs and tests.

    Hotspot rules are local 3x3 patterns, so the conv features are max-pooled
    over the whole clip and a defect scores the same wherever it sits.
    """
    layers = (
        conv2d("Conv1", (3, 3), 8), relu("ReLU1"),
        conv2d("Conv2", (3, 3), width), relu("ReLU2"),
        global_max_pool("Pool"),
        dense("FC1", 32), relu("ReLU3"),
        dense("FC2", 16), relu("ReLU4"),
        dense("FC3", NUM_CLASSES),
    )
    return ModelSpec(INPUT_SHAPE, layers, frozenset(shared))


def compact_hetero_spec(shared: Iterable[str] = SHARED_LAYERS) -> ModelSpec:
    return compact_spec(12, shared)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class LayerParams(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


ParameterSet = Dict[str, LayerParams]
GradientSet = Dict[str, LayerParams]


def param_shapes(spec: ModelSpec) -> Dict[str, Tuple[Shape, Shape]]:
    """(weights shape, bias shape) per parameterized layer"""
    shapes = {}
    for index, layer in enumerate(spec.layers):
        in_shape = spec.input_shape_of(index)
        if layer.kind == LayerKind.CONV2D:
            kh, kw = layer.kernel
            shapes[layer.name] = ((kh, kw, in_shape[-1], layer.out_channels), (layer.out_channels,))
        elif layer.kind == LayerKind.DENSE:
            shapes[layer.name] = ((in_shape[0], layer.units), (layer.units,))
    return shapes


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """Glorot-uniform weights, zero biases, drawn in layer order from `rng`"""
    params = {}
    for name, (w_shape, b_shape) in param_shapes(spec).items():
        if len(w_shape) == 4:
            receptive = w_shape[0] * w_shape[1]
            fan_in, fan_out = receptive * w_shape[2], receptive * w_shape[3]
        else:
            fan_in, fan_out = w_shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=w_shape).astype(DTYPE)
        params[name] = LayerParams(weights, np.zeros(b_shape, dtype=DTYPE))
    return params


def check_params(spec: ModelSpec, params: ParameterSet) -> None:
    """Raise ShapeError unless `params` has exactly the spec's layers and shapes"""
    expected = param_shapes(spec)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter keys mismatch (missing={missing}, unexpected={extra})")
    for name, (w_shape, b_shape) in expected.items():
        p = params[name]
        if p.weights.shape != w_shape or p.bias.shape != b_shape:
            raise ShapeError(
                f"layer {name}: parameter shapes {p.weights.shape}/{p.bias.shape}, expected {w_shape}/{b_shape}", name
            )


def check_matching(a: ParameterSet, b: ParameterSet, what: str = "parameter sets") -> None:
    if set(a) != set(b):
        raise ShapeError(f"{what} cover different layers: {sorted(a)} vs {sorted(b)}")
    for name in a:
        if a[name].weights.shape != b[name].weights.shape or a[name].bias.shape != b[name].bias.shape:
            raise ShapeError(f"layer {name}: shape mismatch between {what}", name)


def copy_params(params: ParameterSet) -> ParameterSet:
    return {name: LayerParams(p.weights.copy(), p.bias.copy()) for name, p in params.items()}


def zeros_like_params(params: ParameterSet) -> ParameterSet:
    return {name: LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for name, p in params.items()}


def select_layers(params: ParameterSet, names: Iterable[str]) -> ParameterSet:
    return {name: params[name] for name in names}


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    """Bitwise equality over identical key sets"""
    if set(a) != set(b):
        return False
    return all(
        np.array_equal(a[n].weights, b[n].weights) and np.array_equal(a[n].bias, b[n].bias) for n in a
    )


def param_count(params: ParameterSet) -> int:
    return int(sum(p.weights.size + p.bias.size for p in params.values()))


def params_to_vector(params: ParameterSet) -> np.ndarray:
    """Concatenate weights and biases in key order"""
    if not params:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate([np.concatenate([p.weights.ravel(), p.bias.ravel()]) for p in params.values()])


def vector_to_params(vector: np.ndarray, template: ParameterSet) -> ParameterSet:
    """Inverse of params_to_vector against a template's key order and shapes"""
    out = {}
    offset = 0
    for name, p in template.items():
        w_size, b_size = p.weights.size, p.bias.size
        weights = vector[offset:offset + w_size].reshape(p.weights.shape).copy()
        offset += w_size
        bias = vector[offset:offset + b_size].reshape(p.bias.shape).copy()
        offset += b_size
        out[name] = LayerParams(weights, bias)
    if offset != vector.size:
        raise ShapeError(f"vector of size {vector.size} does not match template of size {offset}")
    return out


def mean_fold(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Entrywise mean folded in the given order; exact on identical inputs"""
    if not arrays:
        raise ValueError("cannot average an empty list")
    base = arrays[0]
    acc = np.zeros_like(base, dtype=DTYPE)
    for array in arrays[1:]:
        acc = acc + (array - base)
    return base + acc / len(arrays)


def params_mean(param_sets: Sequence[ParameterSet]) -> ParameterSet:
    """Per-entry mean of parameter sets with the same layers, in list order"""
    if not param_sets:
        raise ValueError("cannot average an empty list of parameter sets")
    for other in param_sets[1:]:
        check_matching(param_sets[0], other)
    return {
        name: LayerParams(
            mean_fold([p[name].weights for p in param_sets]),
            mean_fold([p[name].bias for p in param_sets]),
        )
        for name in param_sets[0]
    }


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _conv_forward(x, p: LayerParams, layer: LayerSpec, geom: ConvGeometry):
    s = layer.stride
    xp = np.pad(x, ((0, 0), geom.pad_h, geom.pad_w, (0, 0)))
    windows = sliding_window_view(xp, layer.kernel, axis=(1, 2))[:, ::s, ::s][:, :geom.out_h, :geom.out_w]
    # windows: (B, out_h, out_w, C, kh, kw); weights: (kh, kw, C, O)
    out = np.tensordot(windows, p.weights.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2])) + p.bias
    return out, (xp.shape, windows)


def _conv_backward(dout, p: LayerParams, layer: LayerSpec, geom: ConvGeometry, cache):
    xp_shape, windows = cache
    s = layer.stride
    kh, kw = layer.kernel
    dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * geom.out_h:s, j:j + s * geom.out_w:s, :] += dout @ p.weights[i, j].T
    h_end = xp_shape[1] - geom.pad_h[1]
    w_end = xp_shape[2] - geom.pad_w[1]
    dx = dxp[:, geom.pad_h[0]:h_end, geom.pad_w[0]:w_end, :]
    return dx, LayerParams(dw, db)


def _run_layers(spec: ModelSpec, params: ParameterSet, x: np.ndarray, start: int = 0):
    """Run layers[start:] on `x`; returns the output and one cache per layer"""
    caches = []
    for index in range(start, len(spec.layers)):
        layer = spec.layers[index]
        if layer.kind == LayerKind.CONV2D:
            geom = conv_geometry(layer, spec.input_shape_of(index))
            out, conv_cache = _conv_forward(x, params[layer.name], layer, geom)
            caches.append((x, geom, conv_cache))
        elif layer.kind == LayerKind.DENSE:
            p = params[layer.name]
            out = x @ p.weights + p.bias
            caches.append((x, None, None))
        elif layer.kind == LayerKind.RELU:
            mask = x > 0
            out = np.where(mask, x, 0.0)
            caches.append((x, None, mask))
        elif layer.kind == LayerKind.GLOBAL_MAX_POOL:
            flat = x.reshape(x.shape[0], -1, x.shape[-1])
            # first maximum wins on ties
            argmax = flat.argmax(axis=1)
            out = np.take_along_axis(flat, argmax[:, np.newaxis, :], axis=1)[:, 0, :]
            caches.append((x, None, argmax))
        else:
            out = x.reshape(x.shape[0], -1)
            caches.append((x, None, None))
        check_finite(out, f"output of layer {layer.name}")
        x = out
    return x, caches


def _backward_layers(spec: ModelSpec, params: ParameterSet, caches, dout: np.ndarray, start: int = 0) -> GradientSet:
    grads = {}
    for index in range(len(spec.layers) - 1, start - 1, -1):
        layer = spec.layers[index]
        x, geom, cache = caches[index - start]
        if layer.kind == LayerKind.CONV2D:
            dout, grads[layer.name] = _conv_backward(dout, params[layer.name], layer, geom, cache)
        elif layer.kind == LayerKind.DENSE:
            p = params[layer.name]
            grads[layer.name] = LayerParams(x.T @ dout, dout.sum(axis=0))
            dout = dout @ p.weights.T
        elif layer.kind == LayerKind.RELU:
            dout = dout * cache
        elif layer.kind == LayerKind.GLOBAL_MAX_POOL:
            dflat = np.zeros((x.shape[0], x.shape[1] * x.shape[2], x.shape[3]), dtype=DTYPE)
            np.put_along_axis(dflat, cache[:, np.newaxis, :], dout[:, np.newaxis, :], axis=1)
            dout = dflat.reshape(x.shape)
        else:
            dout = dout.reshape(x.shape)
    for name, g in grads.items():
        check_finite(g.weights, f"gradient of layer {name}")
        check_finite(g.bias, f"gradient of layer {name}")
    return {name: grads[name] for name in spec.param_layers if name in grads}


def _as_batch(spec: ModelSpec, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != len(spec.input_shape) + 1 or batch.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match model input {spec.input_shape}")
    check_finite(batch, "input batch")
    return batch


def forward(spec: ModelSpec, params: ParameterSet, batch) -> np.ndarray:
    """Raw (pre-softmax) logits of shape B×num_classes"""
    check_params(spec, params)
    logits, _ = _run_layers(spec, params, _as_batch(spec, batch))
    return logits


def predict_logits(spec: ModelSpec, params: ParameterSet, inputs, chunk: int = 256) -> np.ndarray:
    """forward() over a large input array in fixed-size chunks"""
    inputs = np.asarray(inputs, dtype=DTYPE)
    parts = [forward(spec, params, inputs[i:i + chunk]) for i in range(0, inputs.shape[0], chunk)]
    if not parts:
        return np.zeros((0, spec.num_classes), dtype=DTYPE)
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not form a batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("labels out of range for the logits width")
    return labels


def loss_ce(logits, labels) -> float:
    """Mean cross-entropy of softmax(logits) against class indices"""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = _check_labels(logits, labels)
    value = -log_softmax(logits)[np.arange(labels.size), labels].mean()
    return float(check_finite(value, "cross-entropy loss"))


def loss_distill(logits, target_logits) -> float:
    """Mean over all entries of the squared logit difference"""
    logits = np.asarray(logits, dtype=DTYPE)
    target_logits = np.asarray(target_logits, dtype=DTYPE)
    if logits.shape != target_logits.shape:
        raise ShapeError(f"logits {logits.shape} and distillation targets {target_logits.shape} differ")
    value = np.mean((logits - target_logits) ** 2)
    return float(check_finite(value, "distillation loss"))


def _objective(logits, labels, target_logits, lam: float, include_ce: bool) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. the logits"""
    loss = 0.0
    dlogits = np.zeros_like(logits)
    if include_ce:
        labels = _check_labels(logits, labels)
        batch = labels.size
        loss = float(-log_softmax(logits)[np.arange(batch), labels].mean())
        onehot = np.zeros_like(logits)
        onehot[np.arange(batch), labels] = 1.0
        dlogits = (softmax(logits) - onehot) / batch
    if target_logits is not None and lam != 0.0:
        target_logits = np.asarray(target_logits, dtype=DTYPE)
        if target_logits.shape != logits.shape:
            raise ShapeError(f"logits {logits.shape} and distillation targets {target_logits.shape} differ")
        diff = logits - target_logits
        loss += lam * float(np.mean(diff ** 2))
        dlogits = dlogits + lam * (2.0 * diff / diff.size)
    check_finite(loss, "training loss")
    return loss, dlogits


def loss_and_grads(spec: ModelSpec, params: ParameterSet, batch, labels, target_logits=None,
                   lam: float = 0.0, include_ce: bool = True) -> Tuple[float, GradientSet]:
    """Value and exact gradients of CE + lam * distill (CE term optional)"""
    if lam < 0:
        raise ValueError(f"distillation weight must be >= 0, got {lam}")
    check_params(spec, params)
    logits, caches = _run_layers(spec, params, _as_batch(spec, batch))
    loss, dlogits = _objective(logits, labels, target_logits, lam, include_ce)
    return loss, _backward_layers(spec, params, caches, dlogits)


def backward(spec: ModelSpec, params: ParameterSet, batch, labels, target_logits=None,
             lam: float = 0.0, include_ce: bool = True) -> GradientSet:
    return loss_and_grads(spec, params, batch, labels, target_logits, lam, include_ce)[1]


def hybrid_loss(logits, labels, target_logits=None, lam: float = 0.0, include_ce: bool = True) -> float:
    """CE (optional) + lam * distillation, evaluated on precomputed logits"""
    return _objective(np.asarray(logits, dtype=DTYPE), labels, target_logits, lam, include_ce)[0]


def eval_loss(spec: ModelSpec, params: ParameterSet, batch, labels, target_logits=None,
              lam: float = 0.0, include_ce: bool = True) -> float:
    return hybrid_loss(forward(spec, params, batch), labels, target_logits, lam, include_ce)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimizerState:
    kind: OptimizerKind
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[ParameterSet] = None
    v: Optional[ParameterSet] = None


def init_optimizer(kind, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    kind = OptimizerKind(kind)
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if kind == OptimizerKind.ADAM:
        return OptimizerState(kind, lr, 0, beta1, beta2, eps, zeros_like_params(params), zeros_like_params(params))
    return OptimizerState(kind, lr, 0, beta1, beta2, eps)


def sgd_step(params: ParameterSet, grads: GradientSet, lr: float) -> ParameterSet:
    """w' = w - lr * g"""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    check_matching(params, grads, "parameters and gradients")
    return {
        name: LayerParams(p.weights - lr * grads[name].weights, p.bias - lr * grads[name].bias)
        for name, p in params.items()
    }


def adam_step(params: ParameterSet, grads: GradientSet, state: OptimizerState,
              lr: Optional[float] = None) -> Tuple[ParameterSet, OptimizerState]:
    """Bias-corrected Adam update; returns new parameters and state"""
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    check_matching(params, grads, "parameters and gradients")
    check_matching(params, state.m, "parameters and Adam moments")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        parts_p, parts_m, parts_v = [], [], []
        for w, g, m, v in zip(p, grads[name], state.m[name], state.v[name]):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            parts_p.append(w - lr * m_hat / (np.sqrt(v_hat) + state.eps))
            parts_m.append(m)
            parts_v.append(v)
        new_params[name] = LayerParams(*parts_p)
        new_m[name] = LayerParams(*parts_m)
        new_v[name] = LayerParams(*parts_v)
    return new_params, replace(state, t=t, m=new_m, v=new_v)


def optimizer_step(params: ParameterSet, grads: GradientSet, state: OptimizerState,
                   lr: Optional[float] = None) -> Tuple[ParameterSet, OptimizerState]:
    if state.kind == OptimizerKind.ADAM:
        return adam_step(params, grads, state, lr)
    return sgd_step(params, grads, state.lr if lr is None else lr), replace(state, t=state.t + 1)


def reset_moments(state: OptimizerState, names: Iterable[str]) -> OptimizerState:
    """Zero Adam moments of the named layers; SGD state is returned as is"""
    if state.kind != OptimizerKind.ADAM:
        return state
    names = set(names)
    m = {n: (LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) if n in names else p)
         for n, p in state.m.items()}
    v = {n: (LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) if n in names else p)
         for n, p in state.v.items()}
    return replace(state, m=m, v=v)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class LayerCheck:
    name: str
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0


@dataclass
class GradcheckReport:
    layers: Dict[str, LayerCheck]
    tolerance: float

    @property
    def failing_layers(self) -> List[str]:
        return [name for name, check in self.layers.items()
                if check.checked == 0 or not check.max_rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing_layers

    def summary_lines(self) -> List[str]:
        lines = []
        for name, check in self.layers.items():
            status = "ok" if name not in self.failing_layers else "FAIL"
            lines.append(
                f"{name:<8} max_rel_error={check.max_rel_error:.3e} checked={check.checked} "
                f"skipped={check.skipped} {status}"
            )
        return lines


def _sample_coords(grad: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    size = grad.size
    count = min(size, max(1, math.ceil(fraction * size)))
    picked = rng.choice(size, size=count, replace=False)
    # the largest-magnitude entry is always checked
    return np.unique(np.append(picked, int(np.argmax(np.abs(grad)))))


def _kink_masks(caches) -> List[np.ndarray]:
    """ReLU masks and max-pool argmax positions: the piecewise choices of a forward pass"""
    return [cache for _, _, cache in caches
            if isinstance(cache, np.ndarray) and (cache.dtype == bool or np.issubdtype(cache.dtype, np.integer))]


def gradcheck(spec: ModelSpec, params: ParameterSet, batch, labels, lam: float = 0.0, target_logits=None, *,
              include_ce: bool = True, grads: Optional[GradientSet] = None,
              sample_fraction: float = GRADCHECK_FRACTION, step: float = GRADCHECK_STEP,
              tolerance: float = GRADCHECK_TOLERANCE, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    A random `sample_fraction` of each tensor's coordinates is checked, plus the
    coordinate with the largest analytic gradient. Coordinates whose +/-step
    perturbation flips a ReLU mask or moves a max-pool argmax are skipped and
    counted, since finite differences are meaningless across a kink. `grads`
    overrides the analytic gradient (fault injection).
    """
    batch = _as_batch(spec, batch)
    analytic = grads if grads is not None else backward(spec, params, batch, labels, target_logits, lam, include_ce)
    work = copy_params(params)
    _, base_caches = _run_layers(spec, work, batch)
    index_of = {layer.name: i for i, layer in enumerate(spec.layers)}
    rng = np.random.default_rng(seed)
    report = GradcheckReport({}, tolerance)

    for name in spec.param_layers:
        k = index_of[name]
        layer_input = base_caches[k][0]
        base_masks = _kink_masks(base_caches[k:])
        check = LayerCheck(name)

        def perturbed_loss():
            logits, caches = _run_layers(spec, work, layer_input, start=k)
            loss, _ = _objective(logits, labels, target_logits, lam, include_ce)
            return loss, _kink_masks(caches)

        for array, grad in zip(work[name], analytic[name]):
            for flat in _sample_coords(grad, sample_fraction, rng):
                idx = np.unravel_index(flat, array.shape)
                original = array[idx]
                array[idx] = original + step
                loss_plus, masks_plus = perturbed_loss()
                array[idx] = original - step
                loss_minus, masks_minus = perturbed_loss()
                array[idx] = original
                kinked = any(
                    not np.array_equal(a, b) or not np.array_equal(a, c)
                    for a, b, c in zip(base_masks, masks_plus, masks_minus)
                )
                if kinked:
                    check.skipped += 1
                    continue
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                exact = float(grad[idx])
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric), GRADCHECK_REL_FLOOR)
                check.max_rel_error = max(check.max_rel_error, rel)
                check.checked += 1
        report.layers[name] = check
        logger.debug(f"gradcheck {name}: max_rel_error={check.max_rel_error:.3e} "
                     f"checked={check.checked} skipped={check.skipped}")
    return report
