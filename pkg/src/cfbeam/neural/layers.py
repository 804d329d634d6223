"""Layers built on :mod:`cfbeam.neural.tensor` and a declarative model spec.

Every layer exposes ``params`` (trainable tensors) and ``buffers`` (state
such as batch-norm running statistics) as plain dicts, and
``forward(x, train, rng)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, train: bool = False, rng=None) -> Tensor:
        return self.forward(T.as_tensor(x), train, rng)

    def named_params(self, prefix: str = "") -> Dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self.buffers.items()}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None, init: str = "he"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if init == "identity":
            if n_in != n_out:
                raise ValueError("identity init needs n_in == n_out")
            w = np.eye(n_in)
        elif init == "he":
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        elif init == "glorot":
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.n_in, self.n_out = n_in, n_out
        self.params = {"weight": T.parameter(w), "bias": T.parameter(np.zeros(n_out))}

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense layer expects {self.n_in} features, got {x.shape[-1]}")
        return x @ self.params["weight"] + self.params["bias"]


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, rng: Optional[np.random.Generator] = None,
                 padding: Optional[int] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.c_in, self.c_out, self.kernel, self.padding = c_in, c_out, kernel, padding
        self.params = {"weight": T.parameter(w), "bias": T.parameter(np.zeros(c_out))}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"conv layer expects (B, {self.c_in}, H, W), got {x.shape}")
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.padding)


class BatchNorm(Layer):
    """Batch normalization over the batch axis (and spatial axes for 4-D input)."""

    kind = "batchnorm"

    def __init__(self, n_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.n_features, self.momentum, self.eps = n_features, momentum, eps
        self.params = {"gamma": T.parameter(np.ones(n_features)), "beta": T.parameter(np.zeros(n_features))}
        self.buffers = {"running_mean": np.zeros(n_features), "running_var": np.ones(n_features)}

    def _shape(self, x: Tensor):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.n_features, 1, 1)
        return (0,), (1, self.n_features)

    def forward(self, x, train=False, rng=None):
        axes, shape = self._shape(x)
        gamma = self.params["gamma"].reshape(shape)
        beta = self.params["beta"].reshape(shape)
        n = int(np.prod([x.shape[a] for a in axes]))
        # a single value per feature carries no batch statistics; use the running ones
        if train and n > 1:
            mu = x.mean(axis=axes, keepdims=True)
            centred = x - mu
            var = (centred * centred).mean(axis=axes, keepdims=True)
            xhat = centred / T.sqrt(var + self.eps)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * n / (n - 1)
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mu = self.buffers["running_mean"].reshape(shape)
            var = self.buffers["running_var"].reshape(shape)
            xhat = (x - mu) * (1.0 / np.sqrt(var + self.eps))
        return xhat * gamma + beta


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False, rng=None):
        return T.leaky_relu(x, self.slope)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if train and self.rate > 0 and rng is None:
            raise ValueError("dropout in train mode needs an rng")
        return T.dropout(x, self.rate, rng, train)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        return T.softmax(x, axis=-1)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def named_params(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"{prefix}{i}."))
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        i, _, rest = name.partition(".")
        layer = self.layers[int(i)]
        if isinstance(layer, Sequential):
            layer.set_buffer(rest, value)
        else:
            layer.buffers[rest] = np.array(value, dtype=float)


# ----------------------------------------------------------------- model spec
@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    kind: dense | conv | batchnorm | leaky_relu | dropout | flatten | softmax.
    ``n_in``/``n_out`` are features (dense) or channels (conv).
    """

    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 3
    rate: float = 0.0
    slope: float = 0.01


@dataclass(frozen=True)
class ModelSpec:
    """An ordered stack of layers applied to inputs of shape ``input_shape`` (batch axis excluded)."""

    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...] = ()

    def shapes(self) -> List[Tuple[int, ...]]:
        """Output shape after every layer; raises on incompatible neighbours."""
        shape = tuple(self.input_shape)
        out = []
        for i, ls in enumerate(self.layers):
            if ls.kind == "dense":
                if len(shape) != 1 or shape[0] != ls.n_in:
                    raise ValueError(f"layer {i}: dense expects ({ls.n_in},), got {shape}")
                shape = (ls.n_out,)
            elif ls.kind == "conv":
                if len(shape) != 3 or shape[0] != ls.n_in:
                    raise ValueError(f"layer {i}: conv expects ({ls.n_in}, H, W), got {shape}")
                shape = (ls.n_out,) + shape[1:]
            elif ls.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif ls.kind == "batchnorm":
                if shape[0] != ls.n_in:
                    raise ValueError(f"layer {i}: batchnorm over {ls.n_in} features, got {shape}")
            elif ls.kind not in ("leaky_relu", "dropout", "softmax"):
                raise ValueError(f"layer {i}: unknown kind {ls.kind!r}")
            out.append(shape)
        return out

    @property
    def output_shape(self) -> Tuple[int, ...]:
        shapes = self.shapes()
        return shapes[-1] if shapes else tuple(self.input_shape)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))


def build(spec: ModelSpec, rng: Optional[np.random.Generator] = None) -> Sequential:
    spec.shapes()
    rng = rng or np.random.default_rng(0)
    layers: List[Layer] = []
    for ls in spec.layers:
        if ls.kind == "dense":
            layers.append(Dense(ls.n_in, ls.n_out, rng))
        elif ls.kind == "conv":
            layers.append(Conv2d(ls.n_in, ls.n_out, ls.kernel, rng))
        elif ls.kind == "batchnorm":
            layers.append(BatchNorm(ls.n_in))
        elif ls.kind == "leaky_relu":
            layers.append(LeakyReLU(ls.slope))
        elif ls.kind == "dropout":
            layers.append(Dropout(ls.rate))
        elif ls.kind == "flatten":
            layers.append(Flatten())
        elif ls.kind == "softmax":
            layers.append(Softmax())
    return Sequential(layers)


def conv_stack(input_shape: Tuple[int, int, int], channels: Sequence[int], widths: Sequence[int],
               kernel: int = 3, dropout: float = 0.0, slope: float = 0.01,
               batchnorm: bool = True) -> ModelSpec:
    """Conv blocks then dense blocks (each followed by batch norm and LeakyReLU)."""
    layers: List[LayerSpec] = []
    c, h, w = input_shape
    for ch in channels:
        layers.append(LayerSpec("conv", c, ch, kernel))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", ch))
        layers.append(LayerSpec("leaky_relu", slope=slope))
        c = ch
    layers.append(LayerSpec("flatten"))
    n = c * h * w
    for width in widths:
        layers.extend(dense_block(n, width, dropout, slope, batchnorm))
        n = width
    return ModelSpec(tuple(input_shape), tuple(layers))


def dense_block(n_in: int, n_out: int, dropout: float = 0.0, slope: float = 0.01,
                batchnorm: bool = True) -> List[LayerSpec]:
    layers = [LayerSpec("dense", n_in, n_out)]
    if batchnorm:
        layers.append(LayerSpec("batchnorm", n_out))
    layers.append(LayerSpec("leaky_relu", slope=slope))
    if dropout > 0:
        layers.append(LayerSpec("dropout", rate=dropout))
    return layers


def forward(model: Layer, x, mode: str = "eval", rng: Optional[np.random.Generator] = None):
    """Run ``model``; in train mode also return the :class:`Tape` recording the pass."""
    if mode == "eval":
        return model(x, False, rng)
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    with T.Tape() as tape:
        out = model(x, True, rng)
    return out, tape
