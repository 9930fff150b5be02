"""Minimal float64 network stack with explicit batch-norm running statistics.

A model is described by a :class:`ModelArch` (an ordered tuple of layer
specs) and carried around as a :class:`ModelState`. States are treated as
values: no function in this module mutates its inputs, and train-mode
forward passes report the updated running statistics through the returned
cache instead of writing them back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .. import _kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------------ layer specs

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class BatchNorm:
    features: int
    kind: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


LayerSpec = Union[Dense, Conv2d, ReLU, BatchNorm, Flatten]

_PARAM_NAMES = {"dense": ("W", "b"), "conv2d": ("W", "b"), "batchnorm": ("gamma", "beta")}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "batchnorm": BatchNorm, "flatten": Flatten}.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    return cls(**d)


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind}
    d.update({k: v for k, v in layer.__dict__.items() if k != "kind"})
    return d


@dataclass(frozen=True)
class ModelArch:
    layers: tuple
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")
        shapes = self.layer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"final layer emits {shapes[-1]}, expected ({self.num_classes},)")
        if not self.bn_layers:
            raise ShapeError("architecture needs at least one batchnorm layer")

    def layer_shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer (index 0 is the input)."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "dense":
                if shape != (layer.in_features,):
                    raise ShapeError(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif k == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ShapeError(f"layer {i}: conv2d expects ({layer.in_ch}, H, W), got {shape}")
                oh = _kernels.conv_output_size(shape[1], layer.kernel, layer.stride)
                ow = _kernels.conv_output_size(shape[2], layer.kernel, layer.stride)
                if oh < 1 or ow < 1:
                    raise ShapeError(f"layer {i}: kernel larger than input {shape}")
                shape = (layer.out_ch, oh, ow)
            elif k == "batchnorm":
                if len(shape) not in (1, 3) or shape[0] != layer.features:
                    raise ShapeError(f"layer {i}: batchnorm({layer.features}) got {shape}")
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k != "relu":
                raise ShapeError(f"layer {i}: unknown kind {k!r}")
            out.append(shape)
        return out

    @property
    def bn_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "batchnorm")

    @property
    def classifier_index(self) -> int:
        """Index of the final dense layer (the classifier head)."""
        if self.layers[-1].kind != "dense":
            raise ShapeError("architecture has no dense final layer")
        return len(self.layers) - 1

    def to_dict(self) -> dict:
        return {
            "layers": [layer_to_dict(l) for l in self.layers],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]), int(d["num_classes"]),
                   tuple(d["input_shape"]))


def mlp(input_shape: Sequence[int], num_classes: int, hidden: int = 64) -> ModelArch:
    """Reference MLP: flatten -> dense(in, hidden) -> BN -> ReLU -> dense(hidden, classes)."""
    n_in = int(np.prod(input_shape))
    return ModelArch((Flatten(), Dense(n_in, hidden), BatchNorm(hidden), ReLU(), Dense(hidden, num_classes)),
                     num_classes, tuple(input_shape))


def small_cnn(input_shape: Sequence[int], num_classes: int, channels: int = 8) -> ModelArch:
    """Reference CNN: conv3x3 -> BN -> ReLU -> flatten -> dense."""
    c, h, w = input_shape
    flat = channels * (h - 2) * (w - 2)
    return ModelArch((Conv2d(c, channels, 3, 1), BatchNorm(channels), ReLU(), Flatten(), Dense(flat, num_classes)),
                     num_classes, tuple(input_shape))


# ------------------------------------------------------------------ state

@dataclass(frozen=True)
class BnStats:
    means: tuple
    vars: tuple
    momentum: float = BN_MOMENTUM

    def copy(self) -> "BnStats":
        return BnStats(tuple(m.copy() for m in self.means), tuple(v.copy() for v in self.vars), self.momentum)

    def equals(self, other: "BnStats") -> bool:
        return (len(self.means) == len(other.means)
                and all(np.array_equal(a, b) for a, b in zip(self.means, other.means))
                and all(np.array_equal(a, b) for a, b in zip(self.vars, other.vars))
                and self.momentum == other.momentum)


@dataclass(frozen=True)
class ModelState:
    arch: ModelArch
    params: tuple  # per layer: dict name -> ndarray ({} for parameter-free layers)
    bn_stats: BnStats

    def copy(self) -> "ModelState":
        return ModelState(self.arch, tuple({k: v.copy() for k, v in p.items()} for p in self.params),
                          self.bn_stats.copy())

    def with_params(self, params) -> "ModelState":
        return ModelState(self.arch, tuple(params), self.bn_stats)


def init_state(arch: ModelArch, rng: np.random.Generator) -> ModelState:
    """He-normal weights, zero biases, identity BN affine, running stats (0, 1)."""
    params = []
    means, vars_ = [], []
    for layer in arch.layers:
        if layer.kind == "dense":
            std = np.sqrt(2.0 / layer.in_features)
            params.append({"W": rng.normal(0.0, std, (layer.out_features, layer.in_features)),
                           "b": np.zeros(layer.out_features)})
        elif layer.kind == "conv2d":
            fan_in = layer.in_ch * layer.kernel ** 2
            params.append({"W": rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)),
                           "b": np.zeros(layer.out_ch)})
        elif layer.kind == "batchnorm":
            params.append({"gamma": np.ones(layer.features), "beta": np.zeros(layer.features)})
            means.append(np.zeros(layer.features))
            vars_.append(np.ones(layer.features))
        else:
            params.append({})
    return ModelState(arch, tuple(params), BnStats(tuple(means), tuple(vars_)))


def get_bn_stats(state: ModelState) -> BnStats:
    return state.bn_stats.copy()


def set_bn_stats(state: ModelState, stats: BnStats) -> ModelState:
    """Return ``state`` with its running statistics replaced by a copy of ``stats``."""
    bn = state.arch.bn_layers
    if len(stats.means) != len(bn) or len(stats.vars) != len(bn):
        raise ShapeError(f"expected stats for {len(bn)} batchnorm layers, got {len(stats.means)}")
    for idx, m, v in zip(bn, stats.means, stats.vars):
        n = state.arch.layers[idx].features
        if m.shape != (n,) or v.shape != (n,):
            raise ShapeError(f"batchnorm layer {idx} expects {n} features")
        if np.any(v < 0):
            raise ValueError("running variance must be non-negative")
    return ModelState(state.arch, state.params, stats.copy())


# ------------------------------------------------------------------ forward / backward

@dataclass
class Cache:
    arch: ModelArch
    mode: str
    inputs: list
    saved: list
    bn_stats: BnStats  # running stats after this pass (updated in train mode)
    stop: int
    output: np.ndarray | None = None


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v.reshape(1, -1, 1, 1)


def forward(state: ModelState, batch: np.ndarray, mode: str = "eval", stop: int | None = None):
    """Run layers ``[0, stop)`` on ``batch``; returns ``(output, cache)``.

    Train mode normalizes with batch statistics and updates running stats as
    ``r <- (1 - momentum) * r + momentum * batch_stat`` (unbiased variance for
    the running estimate). Eval mode uses the running stats and leaves them
    untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    arch = state.arch
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != arch.input_shape:
        raise ShapeError(f"batch sample shape {x.shape[1:]} != arch input {arch.input_shape}")
    n = x.shape[0]
    if mode == "train" and n < 2:
        raise ValueError("train mode needs a batch of at least 2 samples")
    stop = len(arch.layers) if stop is None else stop
    momentum = state.bn_stats.momentum
    means, vars_ = list(state.bn_stats.means), list(state.bn_stats.vars)
    inputs, saved = [], []
    bn_i = 0
    for i in range(stop):
        layer = arch.layers[i]
        p = state.params[i]
        inputs.append(x)
        k = layer.kind
        if k == "dense":
            saved.append(None)
            x = x @ p["W"].T + p["b"]
        elif k == "conv2d":
            cols = _kernels.im2col(x, layer.kernel, layer.stride)
            saved.append(cols)
            out = cols @ p["W"].reshape(layer.out_ch, -1).T + p["b"]
            x = out.transpose(0, 3, 1, 2)
        elif k == "relu":
            saved.append(None)
            x = np.maximum(x, 0.0)
        elif k == "flatten":
            saved.append(x.shape)
            x = x.reshape(n, -1)
        elif k == "batchnorm":
            axes = _bn_axes(x)
            if mode == "train":
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                m = x.size // layer.features
                means[bn_i] = (1.0 - momentum) * means[bn_i] + momentum * mu
                vars_[bn_i] = (1.0 - momentum) * vars_[bn_i] + momentum * var * (m / (m - 1))
            else:
                mu, var = means[bn_i], vars_[bn_i]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - _bn_view(mu, x)) * _bn_view(inv_std, x)
            saved.append((xhat, inv_std))
            x = xhat * _bn_view(p["gamma"], x) + _bn_view(p["beta"], x)
            bn_i += 1
    stats = BnStats(tuple(means), tuple(vars_), momentum) if mode == "train" else state.bn_stats
    return x, Cache(arch, mode, inputs, saved, stats, stop, x)


def backprop(state: ModelState, cache: Cache, dout: np.ndarray) -> list:
    """Gradients of a scalar loss w.r.t. every learnable param, given ``dL/d(output)``.

    Returns a list aligned with ``state.params`` (``{}`` for parameter-free
    layers; layers at or past ``cache.stop`` get zero gradients).
    """
    if cache.arch != state.arch:
        raise ShapeError("cache was produced for a different architecture")
    if cache.mode != "train":
        raise ValueError("backward needs a cache from a train-mode forward")
    grads: list = [dict() for _ in state.arch.layers]
    for i, layer in enumerate(state.arch.layers):
        for name, v in state.params[i].items():
            grads[i][name] = np.zeros_like(v)
    d = dout
    for i in range(cache.stop - 1, -1, -1):
        layer = state.arch.layers[i]
        p = state.params[i]
        x = cache.inputs[i]
        k = layer.kind
        if k == "dense":
            grads[i]["W"] = d.T @ x
            grads[i]["b"] = d.sum(axis=0)
            d = d @ p["W"]
        elif k == "conv2d":
            cols = cache.saved[i]
            d2 = d.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
            grads[i]["W"] = (d2.T @ cols.reshape(d2.shape[0], -1)).reshape(p["W"].shape)
            grads[i]["b"] = d2.sum(axis=0)
            if i > 0:
                dcols = (d2 @ p["W"].reshape(layer.out_ch, -1)).reshape(cols.shape)
                d = _kernels.col2im(dcols, x.shape, layer.kernel, layer.stride)
        elif k == "relu":
            d = d * (x > 0)
        elif k == "flatten":
            d = d.reshape(cache.saved[i])
        elif k == "batchnorm":
            xhat, inv_std = cache.saved[i]
            axes = _bn_axes(d)
            m = d.size // layer.features
            grads[i]["gamma"] = (d * xhat).sum(axis=axes)
            grads[i]["beta"] = d.sum(axis=axes)
            dxhat = d * _bn_view(p["gamma"], d)
            s1 = _bn_view(dxhat.sum(axis=axes), d)
            s2 = _bn_view((dxhat * xhat).sum(axis=axes), d)
            d = _bn_view(inv_std, d) / m * (m * dxhat - s1 - xhat * s2)
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    labels = _check_labels(logits, labels)
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(logits, labels)
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def backward(state: ModelState, cache: Cache, labels) -> list:
    """Gradients of mean cross-entropy of the cached forward's logits."""
    if cache.stop != len(state.arch.layers):
        raise ValueError("backward needs a full forward pass")
    logits = cache.output
    return backprop(state, cache, cross_entropy_grad(logits, labels))


def sgd_step(state: ModelState, grads: list, lr: float) -> ModelState:
    """``p <- p - lr * g`` for every learnable param; running stats untouched."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    new = []
    for p, g in zip(state.params, grads):
        upd = {}
        for name, v in p.items():
            gv = g[name]
            if not np.all(np.isfinite(gv)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            upd[name] = v - lr * gv
        new.append(upd)
    return ModelState(state.arch, tuple(new), state.bn_stats)


def add_grads(a: list, b: list, scale: float = 1.0) -> list:
    return [{k: a[i][k] + scale * b[i][k] for k in a[i]} for i in range(len(a))]


def train_step(state: ModelState, x: np.ndarray, y, lr: float, extra_grad=None):
    """Forward (train mode), backward and SGD; returns ``(new_state, loss)``.

    ``extra_grad(state) -> grads`` adds a regulariser gradient before the step.
    """
    logits, cache = forward(state, x, "train")
    loss = cross_entropy(logits, y)
    grads = backprop(state, cache, cross_entropy_grad(logits, y))
    if extra_grad is not None:
        grads = add_grads(grads, extra_grad(state))
    new = sgd_step(state, grads, lr)
    return ModelState(new.arch, new.params, cache.bn_stats), loss


def predict(state: ModelState, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode argmax predictions."""
    out = []
    for s in range(0, len(x), batch_size):
        logits, _ = forward(state, x[s:s + batch_size], "eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(state: ModelState, x: np.ndarray, y) -> float:
    """Eval-mode accuracy in percent (0 for an empty set)."""
    if len(x) == 0:
        return 0.0
    return 100.0 * float(np.mean(predict(state, x) == np.asarray(y)))


# ------------------------------------------------------------------ flat views

@dataclass(frozen=True)
class FlatVector:
    values: np.ndarray
    layout: tuple  # ((layer, name, offset, shape), ...)


def param_layout(arch: ModelArch) -> tuple:
    layout = []
    offset = 0
    for i, layer in enumerate(arch.layers):
        for name in _PARAM_NAMES.get(layer.kind, ()):
            if layer.kind == "dense":
                shape = (layer.out_features, layer.in_features) if name == "W" else (layer.out_features,)
            elif layer.kind == "conv2d":
                shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel) if name == "W" else (layer.out_ch,)
            else:
                shape = (layer.features,)
            layout.append((i, name, offset, shape))
            offset += int(np.prod(shape))
    return tuple(layout)


def num_params(arch: ModelArch) -> int:
    layout = param_layout(arch)
    i, name, off, shape = layout[-1]
    return off + int(np.prod(shape))


def flatten(state_or_params, arch: ModelArch | None = None) -> FlatVector:
    """Concatenate learnable params in layer order; running stats are excluded."""
    if isinstance(state_or_params, ModelState):
        arch, params = state_or_params.arch, state_or_params.params
    else:
        params = state_or_params
    layout = param_layout(arch)
    values = np.concatenate([params[i][name].ravel() for i, name, _, _ in layout])
    return FlatVector(values, layout)


def unflatten(flat, arch: ModelArch) -> tuple:
    """Inverse of :func:`flatten`: per-layer param dicts from a flat vector."""
    values = flat.values if isinstance(flat, FlatVector) else np.asarray(flat, dtype=np.float64)
    layout = param_layout(arch)
    if isinstance(flat, FlatVector) and flat.layout != layout:
        raise ShapeError("flat layout does not match architecture")
    if values.shape != (num_params(arch),):
        raise ShapeError(f"flat vector has {values.size} entries, arch needs {num_params(arch)}")
    params = [dict() for _ in arch.layers]
    for i, name, off, shape in layout:
        params[i][name] = values[off:off + int(np.prod(shape))].reshape(shape).copy()
    return tuple(params)


def state_from_flat(values: np.ndarray, like: ModelState, bn_stats: BnStats | None = None) -> ModelState:
    return ModelState(like.arch, unflatten(values, like.arch), like.bn_stats if bn_stats is None else bn_stats)
