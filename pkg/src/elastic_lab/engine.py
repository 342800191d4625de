"""Minimal reverse-mode training engine for sequential layer stacks.

Every forward and backward operation is recorded with a flop count so that
the clock module can turn an iteration into a deterministic duration.
Backward passes honour a :class:`SelectionMask`: weight-gradient ops run only
for selected tensors, and error gradients are propagated only as deep as the
deepest selected tensor needs them.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .mask import SelectionMask

BN_EPS = 1e-5
BN_RUNNING_MOMENTUM = 0.99


class LayerKind(str, Enum):
    DENSE = "Dense"
    CONV2D = "Conv2d"
    BATCHNORM = "BatchNorm"
    ACTIVATION = "Activation"
    POOL2D = "Pool2d"
    FLATTEN = "Flatten"


class Role(str, Enum):
    KERNEL = "kernel"
    BIAS = "bias"
    GAMMA = "gamma"
    BETA = "beta"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class OpKind(str, Enum):
    FORWARD = "ForwardOp"
    GRAD_INPUT = "GradToInput"
    GRAD_KERNEL = "GradToKernel"
    GRAD_BIAS = "GradToBias"
    GRAD_GAMMA = "GradToGamma"
    GRAD_BETA = "GradToBeta"
    BN_BLOCK = "BNBlock"
    NON_TRAINABLE = "NonTrainableBackward"


TRAINABLE_KINDS = (LayerKind.DENSE, LayerKind.CONV2D, LayerKind.BATCHNORM)


class ShapeError(ValueError):
    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


class NumericFailure(ArithmeticError):
    def __init__(self, layer: int | None, message: str):
        where = "update" if layer is None else f"layer {layer}"
        super().__init__(f"{where}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    num_features: int = 0
    activation: str = ""
    pool_size: int = 2
    pool_mode: str = "avg"

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    @property
    def is_loss(self) -> bool:
        return self.kind is LayerKind.ACTIVATION and self.activation == "softmax_ce"

    @property
    def rate_class(self) -> str:
        if self.kind is LayerKind.CONV2D:
            return "conv"
        if self.kind is LayerKind.DENSE:
            return "dense"
        if self.kind is LayerKind.BATCHNORM:
            return "bn"
        return "elementwise"

    def roles(self) -> tuple[Role, ...]:
        if self.kind in (LayerKind.DENSE, LayerKind.CONV2D):
            return (Role.KERNEL, Role.BIAS)
        if self.kind is LayerKind.BATCHNORM:
            return (Role.GAMMA, Role.BETA)
        return ()

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v != getattr(_DEFAULT_SPEC, k)}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["kind"] = LayerKind(d["kind"])
        return cls(**d)


_DEFAULT_SPEC = LayerSpec(LayerKind.FLATTEN)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
           padding: int = 0) -> LayerSpec:
    return LayerSpec(LayerKind.CONV2D, in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding)


def batchnorm(num_features: int) -> LayerSpec:
    return LayerSpec(LayerKind.BATCHNORM, num_features=num_features)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.ACTIVATION, activation="relu")


def softmax_ce() -> LayerSpec:
    return LayerSpec(LayerKind.ACTIVATION, activation="softmax_ce")


def pool2d(size: int = 2, mode: str = "avg") -> LayerSpec:
    return LayerSpec(LayerKind.POOL2D, pool_size=size, pool_mode=mode)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1:
            raise ValueError("batch size must be >= 1")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be a 1-d array matching the batch size")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class OpRecord:
    layer: int
    kind: OpKind
    rate_class: str
    work: int
    wall_ns: int = 0


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]
    loss: float
    records: list[OpRecord] = field(default_factory=list)


@dataclass
class ForwardCache:
    loss: float
    mode: Mode
    layer_caches: list
    probs: np.ndarray
    labels: np.ndarray
    records: list[OpRecord]


@dataclass
class Network:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    output_shapes: list[tuple[int, ...]]
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    running: dict[int, list[np.ndarray]]
    tensor_ids: list[str]
    tensor_layer: dict[str, int]
    tensor_role: dict[str, Role]

    @property
    def num_tensors(self) -> int:
        return len(self.tensor_ids)

    @property
    def num_classes(self) -> int:
        return self.output_shapes[-1][0]

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def layer_tensor(self, layer: int, role: Role) -> str:
        return tensor_id(layer, self.layers[layer], role)

    def depth_of(self, tid: str) -> int:
        return self.num_tensors - self.tensor_ids.index(tid)

    def tensor_at_depth(self, k: int) -> str:
        return self.tensor_ids[self.num_tensors - k]

    def depth_order(self) -> list[str]:
        return list(reversed(self.tensor_ids))

    def mask_from_ids(self, ids: Iterable[str]) -> SelectionMask:
        return SelectionMask.from_depths(self.num_tensors, (self.depth_of(t) for t in ids))

    def ids_from_mask(self, mask: SelectionMask) -> list[str]:
        if len(mask) != self.num_tensors:
            raise ValueError(f"mask length {len(mask)} != {self.num_tensors} tensors")
        return [self.tensor_at_depth(k) for k in mask.depths]

    def state(self) -> dict:
        """Deep copy of every mutable array (weights, momentum, BN statistics)."""
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "momentum": {k: v.copy() for k, v in self.momentum.items()},
            "running": {k: [a.copy() for a in v] for k, v in self.running.items()},
        }

    def load_state(self, state: dict) -> None:
        for k, v in state["params"].items():
            self.params[k] = v.copy()
        for k, v in state["momentum"].items():
            self.momentum[k] = v.copy()
        for k, v in state["running"].items():
            self.running[k] = [a.copy() for a in v]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def tensor_id(layer: int, spec: LayerSpec, role: Role) -> str:
    return f"{layer}.{spec.kind.value.lower()}.{role.value}"


def _infer_shapes(spec: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(spec):
        kind = layer.kind
        if kind is LayerKind.DENSE:
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ShapeError(i, f"Dense expects ({layer.in_features},), got {shape}")
            if layer.out_features < 1:
                raise ShapeError(i, "Dense out_features must be positive")
            shape = (layer.out_features,)
        elif kind is LayerKind.CONV2D:
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ShapeError(i, f"Conv2d expects ({layer.in_channels}, H, W), got {shape}")
            if min(layer.out_channels, layer.kernel_size, layer.stride) < 1 or layer.padding < 0:
                raise ShapeError(i, "Conv2d channels, kernel size and stride must be positive")
            h = (shape[1] + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            w = (shape[2] + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(i, f"kernel {layer.kernel_size} larger than input {shape}")
            shape = (layer.out_channels, h, w)
        elif kind is LayerKind.BATCHNORM:
            if len(shape) not in (1, 3) or shape[0] != layer.num_features:
                raise ShapeError(i, f"BatchNorm expects {layer.num_features} features, got {shape}")
        elif kind is LayerKind.ACTIVATION:
            if layer.activation == "softmax_ce":
                if i != len(spec) - 1:
                    raise ShapeError(i, "softmax cross-entropy must be the terminal layer")
                if len(shape) != 1:
                    raise ShapeError(i, f"loss head expects flat logits, got {shape}")
            elif layer.activation != "relu":
                raise ShapeError(i, f"unknown activation {layer.activation!r}")
        elif kind is LayerKind.POOL2D:
            s = layer.pool_size
            if len(shape) != 3 or s < 1 or shape[1] % s or shape[2] % s:
                raise ShapeError(i, f"Pool2d size {s} does not tile input {shape}")
            if layer.pool_mode not in ("avg", "max"):
                raise ShapeError(i, f"unknown pool mode {layer.pool_mode!r}")
            shape = (shape[0], shape[1] // s, shape[2] // s)
        elif kind is LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        else:  # pragma: no cover
            raise ShapeError(i, f"unknown layer kind {kind}")
        shapes.append(shape)
    if not spec or not spec[-1].is_loss:
        raise ShapeError(len(spec) - 1, "network must end in exactly one softmax cross-entropy head")
    if sum(layer.is_loss for layer in spec) != 1:
        raise ShapeError(len(spec) - 1, "more than one loss head")
    return shapes


def build_network(spec: Sequence[LayerSpec], seed: int,
                  input_shape: Sequence[int] | None = None) -> Network:
    """Initialise a network deterministically from ``seed``.

    ``input_shape`` excludes the batch axis; it may be omitted when the first
    layer is Dense.
    """
    spec = list(spec)
    if input_shape is None:
        if not spec or spec[0].kind is not LayerKind.DENSE:
            raise ShapeError(0, "input_shape is required unless the first layer is Dense")
        input_shape = (spec[0].in_features,)
    input_shape = tuple(int(d) for d in input_shape)
    shapes = _infer_shapes(spec, input_shape)

    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    running: dict[int, list[np.ndarray]] = {}
    ids: list[str] = []
    for i, layer in enumerate(spec):
        if layer.kind is LayerKind.DENSE:
            fan_in = layer.in_features
            k = rng.standard_normal((layer.in_features, layer.out_features)) * math.sqrt(2.0 / fan_in)
            b = np.zeros(layer.out_features)
        elif layer.kind is LayerKind.CONV2D:
            fan_in = layer.in_channels * layer.kernel_size ** 2
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            k = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            b = np.zeros(layer.out_channels)
        elif layer.kind is LayerKind.BATCHNORM:
            k = np.ones(layer.num_features)
            b = np.zeros(layer.num_features)
            running[i] = [np.zeros(layer.num_features), np.ones(layer.num_features)]
        else:
            continue
        for role, arr in zip(layer.roles(), (k, b)):
            tid = tensor_id(i, layer, role)
            params[tid] = arr
            ids.append(tid)

    return Network(
        layers=spec,
        input_shape=input_shape,
        output_shapes=shapes,
        params=params,
        momentum={t: np.zeros_like(p) for t, p in params.items()},
        running=running,
        tensor_ids=ids,
        tensor_layer={t: int(t.split(".")[0]) for t in ids},
        tensor_role={t: Role(t.rsplit(".", 1)[1]) for t in ids},
    )


# ---------------------------------------------------------------------------
# layer kernels


def _windows(xp, k, stride):
    """(B, C, Ho, Wo, k, k) strided view of a padded input."""
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, w.shape[2], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out), xp


def _conv_grad_kernel(dout, xp, w_shape, stride):
    win = _windows(xp, w_shape[2], stride)
    return np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_grad_input(dout, w, xp_shape, stride, pad):
    k = w.shape[2]
    ho, wo = dout.shape[2:]
    cols = np.tensordot(dout, w, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
    dxp = np.zeros(xp_shape)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v if ndim == 2 else v[None, :, None, None]


def _softmax_ce(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -float(np.mean(log_probs[np.arange(len(labels)), labels]))
    return loss, expd / denom


def _record(records, layer, kind, spec, work, t0):
    records.append(OpRecord(layer, kind, spec.rate_class, int(work), time.perf_counter_ns() - t0))


def _check_finite(arr, layer, what):
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(layer, f"non-finite {what}")


def forward(net: Network, batch: Batch, mode: Mode | str = Mode.TRAIN,
            update_stats: bool = True) -> tuple[float, ForwardCache]:
    """Run the forward pass and the fused softmax cross-entropy loss.

    In train mode BatchNorm uses batch statistics and, when ``update_stats``
    is set, folds them into the running averages.
    """
    mode = Mode(mode)
    x = batch.inputs
    if x.shape[1:] != net.input_shape:
        raise ShapeError(0, f"batch inputs {x.shape[1:]} do not match network input {net.input_shape}")
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")

    bsz = x.shape[0]
    records: list[OpRecord] = []
    caches: list = []
    loss, probs = float("nan"), None
    for i, layer in enumerate(net.layers):
        t0 = time.perf_counter_ns()
        kind = layer.kind
        if kind is LayerKind.DENSE:
            w = net.params[net.layer_tensor(i, Role.KERNEL)]
            b = net.params[net.layer_tensor(i, Role.BIAS)]
            caches.append(x)
            x = x @ w + b
            work = 2 * bsz * w.size + bsz * b.size
        elif kind is LayerKind.CONV2D:
            w = net.params[net.layer_tensor(i, Role.KERNEL)]
            b = net.params[net.layer_tensor(i, Role.BIAS)]
            x, xp = _conv_forward(x, w, b, layer.stride, layer.padding)
            caches.append(xp)
            work = 2 * x.size * w[0].size + x.size
        elif kind is LayerKind.BATCHNORM:
            gamma = net.params[net.layer_tensor(i, Role.GAMMA)]
            beta = net.params[net.layer_tensor(i, Role.BETA)]
            axes = _bn_axes(x)
            if mode is Mode.TRAIN:
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                if update_stats:
                    rm, rv = net.running[i]
                    net.running[i] = [BN_RUNNING_MOMENTUM * rm + (1 - BN_RUNNING_MOMENTUM) * mu,
                                      BN_RUNNING_MOMENTUM * rv + (1 - BN_RUNNING_MOMENTUM) * var]
            else:
                mu, var = net.running[i]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - _bn_view(mu, x.ndim)) * _bn_view(inv_std, x.ndim)
            caches.append((xhat, inv_std))
            x = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
            work = 6 * x.size
        elif kind is LayerKind.ACTIVATION and layer.activation == "relu":
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
            work = x.size
        elif kind is LayerKind.ACTIVATION:
            _check_finite(x, i, "logits")
            loss, probs = _softmax_ce(x, labels)
            caches.append(None)
            work = 5 * x.size
        elif kind is LayerKind.POOL2D:
            s = layer.pool_size
            bb, c, h, w_ = x.shape
            blocks = x.reshape(bb, c, h // s, s, w_ // s, s)
            if layer.pool_mode == "avg":
                caches.append(x.shape)
                x = blocks.mean(axis=(3, 5))
            else:
                windows = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(bb, c, h // s, w_ // s, s * s)
                # ties route to the first maximum in each window
                arg = windows.argmax(axis=-1)
                caches.append((x.shape, arg))
                x = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
            work = blocks.size
        else:
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
            work = 0
        _record(records, i, OpKind.FORWARD, layer, work, t0)
        if layer.is_loss:
            if not math.isfinite(loss):
                raise NumericFailure(i, "non-finite loss")
        else:
            _check_finite(x, i, "activation")
    return loss, ForwardCache(loss, mode, caches, probs, labels, records)


def _selected_ids(net: Network, mask) -> set[str]:
    if mask is None:
        return set(net.tensor_ids)
    if isinstance(mask, SelectionMask):
        return set(net.ids_from_mask(mask))
    ids = set(mask)
    unknown = ids - set(net.tensor_ids)
    if unknown:
        raise KeyError(f"unknown tensors {sorted(unknown)}")
    return ids


def backward(net: Network, cache: ForwardCache, mask: SelectionMask | Iterable[str] | None = None
             ) -> GradientSet:
    """Selective backward pass.

    Weight-gradient ops run for selected tensors only. Error gradients flow
    through a layer only when it, or some layer closer to the input, holds a
    selected tensor; a selected Kernel always passes its gradient to its
    input. ``mask=None`` selects every tensor.
    """
    selected = _selected_ids(net, mask)
    grads: dict[str, np.ndarray] = {}
    records: list[OpRecord] = []
    if not selected:
        return GradientSet(grads, cache.loss, records)
    lowest = min(net.tensor_layer[t] for t in selected)

    dout = None
    for i in range(len(net.layers) - 1, lowest - 1, -1):
        layer = net.layers[i]
        c = cache.layer_caches[i]
        kind = layer.kind
        if kind is LayerKind.DENSE or kind is LayerKind.CONV2D:
            kid = net.layer_tensor(i, Role.KERNEL)
            bid = net.layer_tensor(i, Role.BIAS)
            w = net.params[kid]
            if bid in selected:
                t0 = time.perf_counter_ns()
                axes = (0,) if kind is LayerKind.DENSE else (0, 2, 3)
                grads[bid] = dout.sum(axis=axes)
                _record(records, i, OpKind.GRAD_BIAS, layer, dout.size, t0)
            if kid in selected:
                t0 = time.perf_counter_ns()
                if kind is LayerKind.DENSE:
                    grads[kid] = c.T @ dout
                    work = 2 * dout.shape[0] * w.size
                else:
                    grads[kid] = _conv_grad_kernel(dout, c, w.shape, layer.stride)
                    work = 2 * dout.size * w[0].size
                _record(records, i, OpKind.GRAD_KERNEL, layer, work, t0)
            if kid in selected or i > lowest:
                t0 = time.perf_counter_ns()
                if kind is LayerKind.DENSE:
                    dout = dout @ w.T
                    work = 2 * dout.shape[0] * w.size
                else:
                    dout_in = _conv_grad_input(dout, w, c.shape, layer.stride, layer.padding)
                    work = 2 * dout.size * w[0].size
                    dout = dout_in
                _record(records, i, OpKind.GRAD_INPUT, layer, work, t0)
        elif kind is LayerKind.BATCHNORM:
            gid = net.layer_tensor(i, Role.GAMMA)
            beid = net.layer_tensor(i, Role.BETA)
            xhat, inv_std = c
            axes = _bn_axes(dout)
            if gid in selected:
                t0 = time.perf_counter_ns()
                grads[gid] = (dout * xhat).sum(axis=axes)
                _record(records, i, OpKind.GRAD_GAMMA, layer, 2 * dout.size, t0)
            if beid in selected:
                t0 = time.perf_counter_ns()
                grads[beid] = dout.sum(axis=axes)
                _record(records, i, OpKind.GRAD_BETA, layer, dout.size, t0)
            # the whole BN backward graph runs whenever the gradient reaches this layer
            t0 = time.perf_counter_ns()
            gamma = _bn_view(net.params[gid], dout.ndim)
            scale = gamma * _bn_view(inv_std, dout.ndim)
            if cache.mode is Mode.TRAIN:
                m = dout.size // dout.shape[1]
                dsum = dout.sum(axis=axes, keepdims=True)
                dxsum = (dout * xhat).sum(axis=axes, keepdims=True)
                dout = scale * (dout - dsum / m - xhat * dxsum / m)
            else:
                dout = scale * dout
            _record(records, i, OpKind.BN_BLOCK, layer, 8 * dout.size, t0)
        else:
            t0 = time.perf_counter_ns()
            if layer.is_loss:
                n = len(cache.labels)
                dout = cache.probs.copy()
                dout[np.arange(n), cache.labels] -= 1.0
                dout /= n
                work = 2 * dout.size
            elif kind is LayerKind.ACTIVATION:
                dout = dout * c
                work = dout.size
            elif kind is LayerKind.POOL2D:
                s = layer.pool_size
                if layer.pool_mode == "avg":
                    shape = c
                    up = np.broadcast_to(dout[:, :, :, None, :, None] / (s * s),
                                         (shape[0], shape[1], shape[2] // s, s, shape[3] // s, s))
                    dout = up.reshape(shape)
                else:
                    shape, arg = c
                    bb, ch, h, w_ = shape
                    windows = np.zeros(arg.shape + (s * s,))
                    np.put_along_axis(windows, arg[..., None], dout[..., None], axis=-1)
                    dout = windows.reshape(bb, ch, h // s, w_ // s, s, s).transpose(
                        0, 1, 2, 4, 3, 5).reshape(shape)
                work = dout.size
            else:
                dout = dout.reshape(c)
                work = 0
            _record(records, i, OpKind.NON_TRAINABLE, layer, work, t0)
        if dout is not None:
            _check_finite(dout, i, "error gradient")
    return GradientSet(grads, cache.loss, records)


def apply_update(net: Network, grads: GradientSet, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """SGD with momentum and decoupled weight decay, applied in place.

    Returns the applied update for every tensor; tensors without a gradient
    are left untouched and report a zero update.
    """
    updates: dict[str, np.ndarray] = {}
    pending: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for tid in net.tensor_ids:
        g = grads.grads.get(tid)
        if g is None:
            updates[tid] = np.zeros_like(net.params[tid])
            continue
        buf = momentum * net.momentum[tid] + g
        delta = -lr * (buf + weight_decay * net.params[tid])
        if not np.all(np.isfinite(delta)):
            raise NumericFailure(None, f"non-finite update for {tid}")
        pending[tid] = (buf, delta)
    for tid, (buf, delta) in pending.items():
        net.momentum[tid] = buf
        net.params[tid] = net.params[tid] + delta
        updates[tid] = delta
    return updates


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train_step(net: Network, batch: Batch, mask=None, lr: float = 1e-4, momentum: float = 0.0,
               weight_decay: float = 0.0) -> tuple[GradientSet, ForwardCache, dict[str, np.ndarray]]:
    """One forward, selective backward and update. Convenience for tests and the harness."""
    _, cache = forward(net, batch, Mode.TRAIN)
    grads = backward(net, cache, mask)
    updates = apply_update(net, grads, lr, momentum, weight_decay)
    return grads, cache, updates
