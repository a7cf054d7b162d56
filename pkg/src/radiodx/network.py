"""Sequential CNN: layers, VGG19/tiny backbones, the trainable head and the RXW1 weights container."""
from __future__ import annotations

import fnmatch
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import Parameter, ShapeError

# 16 convolutions in five blocks, each block closed by a 2x2 max-pool
VGG19_BLOCKS = ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512))
TINY_BLOCKS = ((8,), (16,))


class Layer:
    kind = "layer"
    params: dict[str, Parameter]

    def __init__(self, name: str):
        self.name = name
        self.params = {}

    @property
    def trainable(self) -> bool:
        return any(p.trainable for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x, train=False, rng=None):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        """Return ``(grad_input, {slot: grad})``; param grads only for trainable params."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind, "trainable": self.trainable}


def _apply_act(kind, z):
    return z if kind is None else tc.activation(kind, z)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel=3, padding="same", activation="relu"):
        super().__init__(name)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.padding, self.activation = padding, activation
        self.params = {
            "weight": Parameter(np.zeros((out_ch, in_ch, kernel, kernel), np.float32)),
            "bias": Parameter(np.zeros(out_ch, np.float32)),
        }

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got shape {shape}", shape)
        c, h, w = shape
        if self.padding == "valid":
            h, w = h - self.kernel + 1, w - self.kernel + 1
            if h < 1 or w < 1:
                raise ShapeError(f"{self.name}: kernel larger than input {shape}", shape)
        return (self.out_ch, h, w)

    def forward(self, x, train=False, rng=None):
        z = tc.conv2d(x, self.params["weight"].value, self.params["bias"].value, self.padding)
        y = _apply_act(self.activation, z)
        return y, (x, z, y)

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        x, z, y = cache
        if self.activation and not skip_activation:
            grad = tc.activation_backward(self.activation, grad, z, y)
        w = self.params["weight"]
        dx, dw, db = tc.conv2d_backward(grad, x, w.value, self.padding, need_input_grad, w.trainable)
        return dx, ({"weight": dw, "bias": db} if w.trainable else {})

    def describe(self):
        return {**super().describe(), "in": self.in_ch, "out": self.out_ch, "kernel": self.kernel,
                "padding": self.padding, "activation": self.activation}


class MaxPool2(Layer):
    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: maxpool2 needs even H and W, got {shape}", shape)
        return (c, h // 2, w // 2)

    def forward(self, x, train=False, rng=None):
        y, idx = tc.maxpool2(x)
        return y, idx

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        return (tc.maxpool2_backward(grad, cache) if need_input_grad else None), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        return (grad.reshape(cache) if need_input_grad else None), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, n_in, n_out, activation=None):
        super().__init__(name)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.params = {
            "weight": Parameter(np.zeros((n_out, n_in), np.float32)),
            "bias": Parameter(np.zeros(n_out, np.float32)),
        }

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"{self.name}: expected input ({self.n_in},), got {shape}", shape)
        return (self.n_out,)

    def forward(self, x, train=False, rng=None):
        z = tc.dense(x, self.params["weight"].value, self.params["bias"].value)
        y = _apply_act(self.activation, z)
        return y, (x, z, y)

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        x, z, y = cache
        if self.activation and not skip_activation:
            grad = tc.activation_backward(self.activation, grad, z, y)
        w = self.params["weight"]
        dx, dw, db = tc.dense_backward(grad, x, w.value, need_input_grad, w.trainable)
        return dx, ({"weight": dw, "bias": db} if w.trainable else {})

    def describe(self):
        return {**super().describe(), "in": self.n_in, "out": self.n_out, "activation": self.activation}


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, fn):
        super().__init__(name)
        self.fn = fn

    def forward(self, x, train=False, rng=None):
        y = tc.activation(self.fn, x)
        return y, (x, y)

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        if not need_input_grad:
            return None, {}
        if skip_activation:
            return grad, {}
        x, y = cache
        return tc.activation_backward(self.fn, grad, x, y), {}

    def describe(self):
        return {**super().describe(), "activation": self.fn}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate=0.5):
        super().__init__(name)
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or rng is None or self.rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / np.asarray(1 - self.rate, x.dtype)
        return x * keep, keep

    def backward(self, grad, cache, need_input_grad=True, skip_activation=False):
        if not need_input_grad:
            return None, {}
        return (grad if cache is None else grad * cache), {}

    def describe(self):
        return {**super().describe(), "rate": self.rate}


@dataclass
class HeadSpec:
    hidden: tuple[int, ...] = (1024, 256)
    dropout: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self):
        return {"hidden": list(self.hidden), "dropout": self.dropout}


@dataclass
class ForwardTrace:
    logits: np.ndarray
    probs: np.ndarray
    caches: list
    outputs: list = field(default_factory=list)


class Model:
    """Ordered layer stack mapping ``[N, *input_shape]`` to one probability per sample."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...], backbone: str = "custom",
                 head: HeadSpec | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.backbone = backbone
        self.head = head
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def named_parameters(self) -> Iterable[tuple[str, Parameter]]:
        for layer in self.layers:
            for slot, p in layer.params.items():
                yield f"{layer.name}.{slot}", p

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def layer_index(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(name)

    def select(self, pattern: str) -> list[Layer]:
        return [layer for layer in self.layers if fnmatch.fnmatchcase(layer.name, pattern)]

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects input {self.input_shape}, got {x.shape}", self.input_shape, x.shape)
        # float64 passes through so gradient checks can run the whole model in double precision
        return x if x.dtype == np.float64 else x.astype(np.float32, copy=False)

    def forward_trace(self, x, train=False, rng=None, keep_outputs=False) -> ForwardTrace:
        """Forward pass retaining per-layer caches (and outputs when asked)."""
        h = self._check_input(x)
        caches, outputs = [], []
        last = len(self.layers) - 1
        logits = None
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, train=train, rng=rng)
            caches.append(cache)
            if keep_outputs:
                outputs.append(h)
            if i == last:
                logits = self._logit_of(layer, cache, h)
        probs = h.reshape(h.shape[0])
        return ForwardTrace(logits.reshape(-1), probs, caches, outputs)

    @staticmethod
    def _logit_of(layer, cache, out):
        if isinstance(layer, (Dense, Conv2D)) and layer.activation == "sigmoid":
            return cache[1]
        if isinstance(layer, Activation) and layer.fn == "sigmoid":
            return cache[0]
        return out

    def forward(self, x) -> np.ndarray:
        """Inference probabilities, one per sample."""
        return self.forward_trace(x).probs

    def backward(self, trace: ForwardTrace, grad, wrt: str = "prob", stop_at: int = 0,
                 accumulate: bool = True):
        """Backpropagate ``grad`` (w.r.t. the probability or the logit) down to layer ``stop_at``.

        Returns the gradient w.r.t. the *output* of layer ``stop_at - 1`` (the
        input of layer ``stop_at``), or ``None`` when backprop can stop early.
        """
        g = np.asarray(grad, dtype=trace.probs.dtype).reshape((-1,) + self.output_shape)
        lowest = self._lowest_needed(stop_at)
        for i in range(len(self.layers) - 1, stop_at - 1, -1):
            layer = self.layers[i]
            need_input = i > lowest
            g, grads = layer.backward(g, trace.caches[i], need_input_grad=need_input,
                                      skip_activation=(wrt == "logit" and i == len(self.layers) - 1))
            if accumulate:
                for slot, d in grads.items():
                    layer.params[slot].grad += d
            if g is None:
                return None
        return g

    def _lowest_needed(self, stop_at: int) -> int:
        """Index below which no input gradient is required."""
        if stop_at > 0:
            return stop_at - 1
        for i, layer in enumerate(self.layers):
            if layer.trainable:
                return i
        return len(self.layers)

    def set_trainable(self, pattern: str, flag: bool) -> "Model":
        chosen = self.select(pattern)
        if not chosen:
            raise ValueError(f"selector {pattern!r} matches no layer")
        for layer in chosen:
            layer.set_trainable(flag)
        return self

    def describe(self) -> list[dict]:
        return [{**layer.describe(), "output_shape": list(shape)}
                for layer, shape in zip(self.layers, self.shapes[1:])]


# -- construction -------------------------------------------------------------

def backbone_layers(kind: str, in_ch: int = 3) -> list[Layer]:
    blocks = {"vgg19": VGG19_BLOCKS, "tiny": TINY_BLOCKS}.get(kind)
    if blocks is None:
        raise ValueError(f"unknown backbone {kind!r}")
    layers: list[Layer] = []
    n = 0
    for b, widths in enumerate(blocks, start=1):
        for width in widths:
            n += 1
            layers.append(Conv2D(f"backbone.conv{n}", in_ch, width))
            in_ch = width
        layers.append(MaxPool2(f"backbone.pool{b}"))
    return layers


def head_layers(n_in: int, head: HeadSpec) -> list[Layer]:
    layers: list[Layer] = [Flatten("head.flatten")]
    for i, width in enumerate(head.hidden, start=1):
        layers.append(Dense(f"head.dense{i}", n_in, width, activation="relu"))
        if head.dropout > 0:
            layers.append(Dropout(f"head.dropout{i}", head.dropout))
        n_in = width
    layers.append(Dense(f"head.dense{len(head.hidden) + 1}", n_in, 1, activation="sigmoid"))
    return layers


def init_weights(model: Model, seed: int) -> Model:
    """He-style uniform init scaled by fan-in; biases zero."""
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if "weight" not in layer.params:
            continue
        w = layer.params["weight"]
        fan_in = int(np.prod(w.shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        w.value[...] = rng.uniform(-limit, limit, size=w.shape).astype(np.float32)
        layer.params["bias"].value[...] = 0
    return model


def build_model(backbone: str = "vgg19", head: HeadSpec | None = None, init_seed: int = 0,
                input_size: int = 224, freeze_backbone: bool = True) -> Model:
    head = head or HeadSpec()
    layers = backbone_layers(backbone)
    probe = Model(layers, (3, input_size, input_size))
    n_flat = int(np.prod(probe.output_shape))
    model = Model(layers + head_layers(n_flat, head), (3, input_size, input_size), backbone, head)
    init_weights(model, init_seed)
    if freeze_backbone:
        model.set_trainable("backbone.*", False)
    return model


def build_sequential(input_dim: int, widths: Sequence[int], activations: Sequence[str | None] | None = None,
                     seed: int | None = None) -> Model:
    """Plain fully connected stack (e.g. the 4-10-10-1 illustration network)."""
    activations = activations or ["relu"] * (len(widths) - 1) + ["sigmoid"]
    layers, n_in = [], input_dim
    for i, (w, act) in enumerate(zip(widths, activations), start=1):
        layers.append(Dense(f"dense{i}", n_in, w, activation=act))
        n_in = w
    model = Model(layers, (input_dim,))
    if seed is not None:
        init_weights(model, seed)
    return model


def count_params(model: Model) -> dict[str, int]:
    trainable = frozen = 0
    for _, p in model.named_parameters():
        if p.trainable:
            trainable += p.size
        else:
            frozen += p.size
    return {"total": trainable + frozen, "trainable": trainable, "frozen": frozen}


def clone(model: Model) -> Model:
    layers = []
    for layer in model.layers:
        new = object.__new__(type(layer))
        new.__dict__.update(layer.__dict__)
        new.params = {}
        for slot, p in layer.params.items():
            q = Parameter(p.value.copy(), p.trainable)
            new.params[slot] = q
        layers.append(new)
    return Model(layers, model.input_shape, model.backbone, model.head)


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in model.named_parameters()}


def restore(model: Model, values: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.value[...] = values[name]


# -- RXW1 container -----------------------------------------------------------

MAGIC = b"RXW1"
VERSION = 1


class WeightsError(ValueError):
    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(message)


class WeightsFormatError(WeightsError):
    pass


class WeightsTruncatedError(WeightsError):
    pass


class WeightsShapeError(WeightsError):
    pass


class WeightsMissingError(WeightsError):
    pass


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n, what, tensor=None):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsTruncatedError(f"container truncated while reading {what}", tensor)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor #{k}"))
        try:
            name = take(name_len, f"name of tensor #{k}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"tensor #{k} name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4, "rank", name))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims", name))
        n = int(np.prod(dims)) if rank else 1
        raw = take(4 * n, "data", name)
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor {name!r}", name)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return tensors


def save_weights(model: Model) -> bytes:
    return encode_weights({name: p.value for name, p in model.named_parameters()})


def load_weights(model: Model, data: bytes) -> Model:
    """Copy container tensors into ``model`` after checking every name and shape."""
    tensors = decode_weights(data)
    expected = model.parameters()
    for name, p in expected.items():
        if name not in tensors:
            raise WeightsMissingError(f"container is missing tensor {name!r}", name)
        if tensors[name].shape != p.shape:
            raise WeightsShapeError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}", name)
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightsFormatError(f"container has unexpected tensor {extra[0]!r}", extra[0])
    for name, p in expected.items():
        p.value[...] = tensors[name]
    return model


def model_from_weights(data: bytes, freeze_backbone: bool = True) -> Model:
    """Rebuild a backbone+head model from a container's tensor names and shapes alone."""
    tensors = decode_weights(data)
    convs = sorted((k for k in tensors if k.startswith("backbone.conv") and k.endswith(".weight")),
                   key=lambda k: int(k.split(".")[1][4:]))
    widths = tuple(tensors[k].shape[0] for k in convs)
    for kind, blocks in (("vgg19", VGG19_BLOCKS), ("tiny", TINY_BLOCKS)):
        if widths == tuple(w for block in blocks for w in block):
            backbone = kind
            break
    else:
        raise WeightsFormatError("container does not hold a known backbone")
    dense = sorted((k for k in tensors if k.startswith("head.dense") and k.endswith(".weight")),
                   key=lambda k: int(k.split(".")[1][5:]))
    if not dense:
        raise WeightsFormatError("container has no head")
    hidden = tuple(tensors[k].shape[0] for k in dense[:-1])
    n_flat = tensors[dense[0]].shape[1]
    channels = widths[-1]
    side = int(round(np.sqrt(n_flat / channels)))
    factor = 2 ** (len(VGG19_BLOCKS) if backbone == "vgg19" else len(TINY_BLOCKS))
    if side * side * channels != n_flat:
        raise WeightsShapeError(f"head input {n_flat} does not match backbone output", dense[0])
    model = Model(backbone_layers(backbone) + head_layers(n_flat, HeadSpec(hidden)),
                  (3, side * factor, side * factor), backbone, HeadSpec(hidden))
    load_weights(model, data)
    if freeze_backbone:
        model.set_trainable("backbone.*", False)
    return model
