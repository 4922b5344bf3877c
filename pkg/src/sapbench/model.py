"""Layer-chain models with hook points for activation transforms."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError

LAYER_KINDS = ("linear", "conv2d", "relu", "flatten", "avgpool2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    size: int = 2
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "linear":
            d.update(in_features=self.in_features, out_features=self.out_features, bias=self.bias)
        elif self.kind == "conv2d":
            d.update(in_channels=self.in_channels, out_channels=self.out_channels,
                     kernel=self.kernel, stride=self.stride, padding=self.padding, bias=self.bias)
        elif self.kind == "avgpool2d":
            d.update(size=self.size)
        return d

    def output_shape(self, shape):
        """Per-example output shape given per-example input ``shape``."""
        if self.kind == "linear":
            if shape != (self.in_features,):
                raise DimensionError(f"linear expects ({self.in_features},), got {shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise DimensionError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
            _, h, w = shape
            if h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
                raise DimensionError(f"conv kernel {self.kernel} larger than padded input {shape}")
            ho, wo = ad.conv2d_output_size(h, w, self.kernel, self.kernel, self.stride, self.padding)
            return (self.out_channels, ho, wo)
        if self.kind == "avgpool2d":
            if len(shape) != 3 or shape[1] < self.size or shape[2] < self.size:
                raise DimensionError(f"avgpool2d({self.size}) cannot pool {shape}")
            return (shape[0], shape[1] // self.size, shape[2] // self.size)
        if self.kind == "flatten":
            return (math.prod(shape),)
        return shape


def linear(in_features, out_features, bias=True):
    return LayerSpec("linear", in_features=in_features, out_features=out_features, bias=bias)


def conv(in_channels, out_channels, kernel, stride=1, padding=0, bias=True):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding, bias=bias)


@dataclass
class ModelGraph:
    """An ordered chain of layers plus its parameter store.

    Inputs arrive in pixel units; ``(x - input_shift) * input_scale`` is
    applied before the first layer so that gradients are taken with respect
    to raw pixels.
    """

    layers: list
    input_shape: tuple
    params: dict = field(default_factory=dict)
    hooks: tuple = None
    input_shift: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        relus = tuple(i for i, l in enumerate(self.layers) if l.kind == "relu")
        if self.hooks is None:
            self.hooks = relus
        self.hooks = tuple(int(h) for h in self.hooks)
        if len(set(self.hooks)) != len(self.hooks):
            raise InputError("hook positions must be unique")
        if any(not 0 <= h < len(self.layers) for h in self.hooks):
            raise InputError(f"hook positions {self.hooks} outside the layer chain")
        self.shapes = self._infer_shapes()

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    def param_specs(self):
        """Yield ``(name, shape, fan_in)`` for every learnable tensor in layer order."""
        for i, l in enumerate(self.layers):
            if l.kind == "linear":
                yield f"W{i}", (l.in_features, l.out_features), l.in_features
                if l.bias:
                    yield f"b{i}", (l.out_features,), l.in_features
            elif l.kind == "conv2d":
                fan_in = l.in_channels * l.kernel * l.kernel
                yield f"W{i}", (l.out_channels, l.in_channels, l.kernel, l.kernel), fan_in
                if l.bias:
                    yield f"b{i}", (l.out_channels,), fan_in

    def weight_names(self):
        return [name for name, _, _ in self.param_specs() if name.startswith("W")]

    def init_params(self, rng):
        """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
        params = {}
        for name, shape, fan_in in self.param_specs():
            if name.startswith("W"):
                bound = math.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True)
        self.params = params
        return self

    def check_params(self, params=None):
        params = self.params if params is None else params
        expected = {name: shape for name, shape, _ in self.param_specs()}
        if set(params) != set(expected):
            raise DimensionError(f"parameter names {sorted(params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")

    def copy(self):
        clone = ModelGraph(self.layers, self.input_shape, hooks=self.hooks,
                           input_shift=self.input_shift, input_scale=self.input_scale)
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return clone

    def describe(self):
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "hooks": list(self.hooks),
            "input_shift": self.input_shift,
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_description(cls, d):
        return cls([LayerSpec(**l) for l in d["layers"]], tuple(d["input_shape"]), hooks=tuple(d["hooks"]),
                   input_shift=d.get("input_shift", 0.0), input_scale=d.get("input_scale", 1.0))

    def forward(self, x, transform=None, params=None):
        return forward(self, x, transform=transform, params=params)


def mlp(input_shape, num_classes=10, hidden=(256, 128), input_shift=127.5, input_scale=1 / 127.5):
    """Flatten followed by ReLU-separated linear layers (784-256-128-10 for 28x28 inputs)."""
    dims = [math.prod(input_shape), *hidden, num_classes]
    layers = [LayerSpec("flatten")]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(linear(a, b))
        if i < len(dims) - 2:
            layers.append(LayerSpec("relu"))
    return ModelGraph(layers, input_shape, input_shift=input_shift, input_scale=input_scale)


def cnn(input_shape, num_classes=10, channels=(8, 16), input_shift=127.5, input_scale=1 / 127.5):
    """conv 3x3 -> relu -> avgpool -> conv 3x3 -> relu -> avgpool -> flatten -> linear."""
    c, h, w = input_shape
    layers = []
    for out_c in channels:
        layers += [conv(c, out_c, 3, padding=1), LayerSpec("relu"), LayerSpec("avgpool2d", size=2)]
        c, h, w = out_c, h // 2, w // 2
    layers += [LayerSpec("flatten"), linear(c * h * w, num_classes)]
    return ModelGraph(layers, input_shape, input_shift=input_shift, input_scale=input_scale)


PRESETS = {"mlp": mlp, "cnn": cnn}


def _as_input(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(model, x, transform=None, params=None):
    """Logits for the batch ``x``.

    ``transform(h, position)`` is called on the output of every hooked layer
    and its return value replaces that activation. ``params`` overrides the
    model's own parameter store (used by weight-space defenses).
    """
    x = _as_input(x)
    params = model.params if params is None else params
    if tuple(x.shape[1:]) != model.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    h = x
    if model.input_shift != 0.0:
        h = h - model.input_shift
    if model.input_scale != 1.0:
        h = h * model.input_scale
    hooks = model.hooks if transform is not None else ()
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "linear":
            h = ad.matmul(h, params[f"W{i}"])
            if layer.bias:
                h = h + params[f"b{i}"]
        elif kind == "conv2d":
            h = ad.conv2d(h, params[f"W{i}"], stride=layer.stride, padding=layer.padding)
            if layer.bias:
                h = h + params[f"b{i}"]
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "flatten":
            h = ad.flatten(h)
        elif kind == "avgpool2d":
            h = ad.avgpool2d(h, layer.size)
        if i in hooks:
            h = transform(h, i)
    return h


def averaged_forward(model, x, policy, n_passes, rng):
    """Mean of per-pass softmax probabilities over ``n_passes`` policy instances."""
    if n_passes < 1:
        raise InputError("n_passes must be positive")
    x = _as_input(x).detach()
    if policy is None or policy.deterministic:
        inst = None if policy is None else policy.sample(rng)
        logits = _instance_forward(model, x, inst)
        return ad.softmax(logits.data.astype(np.float64))
    total = None
    for _ in range(n_passes):
        logits = _instance_forward(model, x, policy.sample(rng))
        p = ad.softmax(logits.data.astype(np.float64))
        total = p if total is None else total + p
    return total / n_passes


def _instance_forward(model, x, inst):
    if inst is None:
        return forward(model, x)
    return forward(model, x, transform=inst.transform, params=inst.weights(model))


def predict(probabilities):
    """Argmax label and its probability per row; ties go to the lowest index."""
    p = np.asarray(probabilities.data if isinstance(probabilities, Tensor) else probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"probabilities must be [N, C], got {p.shape}")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-3)
    if bad.size:
        raise InputError(f"row {bad[0]} sums to {sums[bad[0]]:.6f}, not 1")
    labels = p.argmax(axis=1)
    return labels, p[np.arange(len(p)), labels]
