"""Declarative network specifications for the two detection CNNs, weight
initialization, the forward/backward runner, and checkpoint serialization.

Class convention: softmax output index 1 is the lesion (MA) probability.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import FormatError, ShapeError, SpecError

CHECKPOINT_MAGIC = b"MACNN1"

# Kinds with trainable parameters store them as [kernels|weights, bias].
PARAMETRIC_KINDS = ("conv", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0   # conv: number of output channels
    kernel: int = 0     # conv: square kernel side
    width: int = 0      # fully_connected: output width
    p: float = 0.0      # dropout probability
    alpha: float = 0.0  # leaky_relu negative slope

    def __post_init__(self):
        if self.kind == "conv" and (self.channels < 1 or self.kernel < 1):
            raise SpecError(f"conv layer needs positive channels/kernel: {self}")
        if self.kind == "fully_connected" and self.width < 1:
            raise SpecError(f"fully_connected layer needs positive width: {self}")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise SpecError(f"dropout p must be in [0, 1): {self}")
        if self.kind == "leaky_relu" and self.alpha < 0:
            raise SpecError(f"leaky_relu slope must be >= 0: {self}")
        if self.kind not in ("conv", "maxpool2", "leaky_relu", "maxout_fc",
                             "fully_connected", "dropout", "softmax"):
            raise SpecError(f"unknown layer kind {self.kind!r}")


def conv(channels, kernel):
    return LayerSpec("conv", channels=channels, kernel=kernel)


def maxpool():
    return LayerSpec("maxpool2")


def lrelu(alpha=0.01):
    return LayerSpec("leaky_relu", alpha=alpha)


def maxout():
    return LayerSpec("maxout_fc")


def fc(width):
    return LayerSpec("fully_connected", width=width)


def drop(p):
    return LayerSpec("dropout", p=p)


def softmax():
    return LayerSpec("softmax")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    input_shape: tuple = (3, 101, 101)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise SpecError("network must end with a softmax layer")
        shapes = infer_shapes(self)
        if shapes[-1] != (2,):
            raise SpecError(f"softmax output must be 2 classes, got {shapes[-1]}")

    def canonical(self):
        parts = [self.name, "x".join(map(str, self.input_shape))]
        for layer in self.layers:
            parts.append(f"{layer.kind}:{layer.channels}:{layer.kernel}:"
                         f"{layer.width}:{layer.p!r}:{layer.alpha!r}")
        return "|".join(parts)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def build_basic_spec():
    """Three conv/pool blocks with dropout after every pool, then the
    fully-connected head (200 -> maxout -> 100 -> 2 -> softmax)."""
    return NetworkSpec("basic", [
        conv(16, 6), lrelu(), maxpool(), drop(0.25),
        conv(16, 5), lrelu(), maxpool(), drop(0.25),
        conv(16, 3), lrelu(), maxpool(), drop(0.25),
        fc(200), maxout(),
        fc(100),
        fc(2), softmax(),
    ])


def build_final_spec():
    """Five conv/pool blocks (kernels 6,5,3,2,2) with dropout after the
    first and third pools, then 100 -> maxout -> 2 -> softmax."""
    return NetworkSpec("final", [
        conv(16, 6), lrelu(), maxpool(), drop(0.25),
        conv(16, 5), lrelu(), maxpool(),
        conv(16, 3), lrelu(), maxpool(), drop(0.25),
        conv(16, 2), lrelu(), maxpool(),
        conv(16, 2), lrelu(), maxpool(),
        fc(100), maxout(),
        fc(2), softmax(),
    ])


def infer_shapes(spec):
    """Per-layer output shapes under valid-conv and floor-pool rules.

    Raises SpecError naming the offending layer if any dimension underflows.
    """
    shape = tuple(spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"{where}: conv needs a (C,H,W) input, got {shape}")
            h = shape[1] - layer.kernel + 1
            w = shape[2] - layer.kernel + 1
            if h < 1 or w < 1:
                raise SpecError(f"{where}: kernel {layer.kernel} underflows input {shape}")
            shape = (layer.channels, h, w)
        elif layer.kind == "maxpool2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise SpecError(f"{where}: pooling underflows input {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "fully_connected":
            shape = (layer.width,)
        elif layer.kind == "maxout_fc":
            if len(shape) != 1 or shape[0] % 2 != 0:
                raise SpecError(f"{where}: maxout needs an even flat input, got {shape}")
            shape = (shape[0] // 2,)
        elif layer.kind == "softmax":
            if shape != (2,):
                raise SpecError(f"{where}: softmax needs a 2-vector, got {shape}")
        # leaky_relu and dropout keep their input shape
        shapes.append(shape)
    return shapes


def spatial_chain(spec):
    """Spatial side lengths after each conv/pool layer (reported as in the
    architecture tables)."""
    chain = []
    for layer, shape in zip(spec.layers, infer_shapes(spec)):
        if layer.kind in ("conv", "maxpool2"):
            chain.append(shape[1])
    return chain


def parameter_count(spec):
    total = 0
    shape = tuple(spec.input_shape)
    for layer, out_shape in zip(spec.layers, infer_shapes(spec)):
        if layer.kind == "conv":
            total += layer.channels * shape[0] * layer.kernel ** 2 + layer.channels
        elif layer.kind == "fully_connected":
            total += layer.width * int(np.prod(shape)) + layer.width
        shape = out_shape
    return total


@dataclass
class Checkpoint:
    """Learned weights plus the training state needed for exact resume."""

    spec_digest: str
    params: list                 # per layer: [kernels|weights, bias] or []
    velocity: list = None        # same structure; SGD momentum state
    metadata: dict = field(default_factory=dict)

    def digest(self):
        """Content hash over weights, velocity, and metadata."""
        h = hashlib.sha256(self.spec_digest.encode())
        for group in (self.params, self.velocity or []):
            for layer_params in group:
                for arr in layer_params:
                    h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(json.dumps(self.metadata, sort_keys=True).encode())
        return h.hexdigest()


def _param_shapes(spec):
    """Per-layer list of parameter shapes, [] for parameter-free layers."""
    result = []
    shape = tuple(spec.input_shape)
    for layer, out_shape in zip(spec.layers, infer_shapes(spec)):
        if layer.kind == "conv":
            result.append([(layer.channels, shape[0], layer.kernel, layer.kernel),
                           (layer.channels,)])
        elif layer.kind == "fully_connected":
            result.append([(layer.width, int(np.prod(shape))), (layer.width,)])
        else:
            result.append([])
        shape = out_shape
    return result


def init_weights(spec, seed):
    """He-style initialization: weights ~ N(0, sqrt(2/fan_in)), biases zero.

    Draw order is layer order, so a fixed seed gives a fixed checkpoint.
    """
    rng = np.random.default_rng(seed)
    params = []
    velocity = []
    for shapes in _param_shapes(spec):
        if not shapes:
            params.append([])
            velocity.append([])
            continue
        weight_shape, bias_shape = shapes
        fan_in = int(np.prod(weight_shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        params.append([rng.normal(0.0, std, size=weight_shape),
                       np.zeros(bias_shape)])
        velocity.append([np.zeros(weight_shape), np.zeros(bias_shape)])
    return Checkpoint(spec.digest(), params, velocity,
                      {"epoch": 0, "seed": int(seed), "loss_history": [],
                       "accuracy_history": []})


def forward(spec, params, x, training=False, dropout_rng=None, with_grad=None):
    """Run the network on one input; returns (probs, caches).

    caches holds per-layer state for backward().  Training mode draws one
    dropout mask per dropout layer from dropout_rng, in layer order.
    with_grad (default: same as training) controls whether pool argmax
    bookkeeping is kept; pass True for a dropout-free pass that will still
    be backpropagated (gradient checks).
    """
    if with_grad is None:
        with_grad = training
    if tuple(x.shape) != tuple(spec.input_shape):
        raise ShapeError("network input shape", x.shape, spec.input_shape)
    caches = []
    value = x
    for layer, layer_params in zip(spec.layers, params):
        if layer.kind == "conv":
            caches.append(value)
            value = layers.conv2d_forward(value, layer_params[0], layer_params[1])
        elif layer.kind == "maxpool2":
            if with_grad:
                value, idx = layers.maxpool2_forward(value)
                caches.append(idx)
            else:
                # pure scoring pass; skip argmax bookkeeping
                value = layers.maxpool2_values(value)
                caches.append(None)
        elif layer.kind == "leaky_relu":
            caches.append(value)
            value = layers.leaky_relu(value, layer.alpha)
        elif layer.kind == "dropout":
            if training:
                mask = layers.dropout_mask(dropout_rng, value.shape, layer.p)
                caches.append(mask)
                value = value * mask
            else:
                caches.append(None)
        elif layer.kind == "fully_connected":
            pre_shape = value.shape
            flat = value.reshape(-1)
            caches.append((flat, pre_shape))
            value = layers.fully_connected_forward(flat, layer_params[0],
                                                   layer_params[1])
        elif layer.kind == "maxout_fc":
            caches.append(value)
            value = layers.maxout_pairs(value)
        elif layer.kind == "softmax":
            value = layers.softmax2(value)
            caches.append(value)
    return value, caches


def backward(spec, params, caches, d_probs):
    """Backpropagate d_probs (gradient w.r.t. softmax output) through the
    network; returns (grads, d_input) with grads aligned to params."""
    grads = [[] for _ in spec.layers]
    d_value = d_probs
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if layer.kind == "softmax":
            d_value = layers.softmax2_backward(cache, d_value).d_input
        elif layer.kind == "maxout_fc":
            d_value = layers.maxout_pairs_backward(cache, d_value).d_input
        elif layer.kind == "fully_connected":
            flat, pre_shape = cache
            grad = layers.fully_connected_backward(flat, params[i][0], d_value)
            grads[i] = grad.d_params
            d_value = grad.d_input.reshape(pre_shape)
        elif layer.kind == "dropout":
            if cache is not None:
                d_value = d_value * cache
        elif layer.kind == "leaky_relu":
            d_value = layers.leaky_relu_backward(cache, d_value, layer.alpha).d_input
        elif layer.kind == "maxpool2":
            d_value = layers.maxpool2_backward(cache, d_value).d_input
        elif layer.kind == "conv":
            grad = layers.conv2d_backward(cache, params[i][0], d_value)
            grads[i] = grad.d_params
            d_value = grad.d_input
    return grads, d_value


def save_checkpoint(path, checkpoint):
    """Versioned binary container; written atomically."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += checkpoint.spec_digest.encode("ascii")
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode()
    blob += struct.pack("<I", len(meta))
    blob += meta

    tensors = []
    for prefix, group in (("param", checkpoint.params),
                          ("velocity", checkpoint.velocity or [])):
        for i, layer_params in enumerate(group):
            for j, arr in enumerate(layer_params):
                tensors.append((f"{prefix}{i:03d}.{j}", np.asarray(arr, dtype=np.float64)))
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        encoded = name.encode("ascii")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes(order="C")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, spec):
    """Load and verify a checkpoint against the spec it will drive."""
    with open(path, "rb") as handle:
        blob = handle.read()
    view = memoryview(blob)
    if view[:6].tobytes() != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    offset = 6
    stored_digest = view[offset:offset + 64].tobytes().decode("ascii")
    offset += 64
    if stored_digest != spec.digest():
        raise FormatError(f"{path}: checkpoint was trained for a different "
                          f"network spec (digest mismatch)")
    (meta_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    metadata = json.loads(view[offset:offset + meta_len].tobytes())
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", view, offset)
    offset += 4

    named = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = view[offset:offset + name_len].tobytes().decode("ascii")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", view, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        named[name] = arr.copy()

    expected = _param_shapes(spec)
    params = []
    velocity = []
    for i, shapes in enumerate(expected):
        for prefix, group in (("param", params), ("velocity", velocity)):
            layer_params = []
            for j, shape in enumerate(shapes):
                key = f"{prefix}{i:03d}.{j}"
                if key not in named:
                    raise FormatError(f"{path}: missing tensor {key}")
                if named[key].shape != shape:
                    raise FormatError(f"{path}: tensor {key} has shape "
                                      f"{named[key].shape}, spec wants {shape}")
                layer_params.append(named[key])
            group.append(layer_params)
    return Checkpoint(stored_digest, params, velocity, metadata)
