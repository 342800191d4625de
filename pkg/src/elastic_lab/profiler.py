"""Tensor-level backward timing model.

The layer graph is unrolled into a chain of trainable tensors ordered from
the loss towards the input (depth 1 is nearest the loss). Each tensor carries
``t_dw``, the time of its own weight-gradient op, and ``t_dy``, the time of the
error-gradient work that must run whenever the backward pass reaches its
position. Operation timings are folded onto tensors as follows:

* Dense/Conv2d: kernel-gradient op -> Kernel.t_dw, bias-gradient op ->
  Bias.t_dw, gradient-to-input op -> Kernel.t_dy.
* BatchNorm: the fused BN backward block -> Beta.t_dy; gamma/beta gradient
  ops -> their own t_dw.
* Non-trainable layers (activations, pooling, flatten, loss head): backward
  time -> t_dy of the first tensor (Bias or Beta) of the nearest trainable
  layer on the input side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .clock import ClockSpec, time_op
from .engine import Batch, Mode, Network, OpKind, Role, backward, forward
from .mask import SelectionMask


@dataclass(frozen=True)
class TensorNode:
    tensor_id: str
    depth: int
    role: Role
    t_dw: int = 0
    t_dy: int = 0

    def to_dict(self) -> dict:
        return {"id": self.tensor_id, "role": self.role.value, "depth": self.depth,
                "t_dw": self.t_dw, "t_dy": self.t_dy}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorNode":
        return cls(d["id"], int(d["depth"]), Role(d["role"]), int(d["t_dw"]), int(d["t_dy"]))


@dataclass(frozen=True)
class TensorProfile:
    nodes: tuple[TensorNode, ...]
    T_forward: int
    T_full: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if [n.depth for n in self.nodes] != list(range(1, len(self.nodes) + 1)):
            raise ValueError("node depths must be 1..N in order")
        if any(n.t_dw < 0 or n.t_dy < 0 for n in self.nodes) or self.T_forward < 0:
            raise ValueError("timings must be non-negative")
        if self.T_full != self.T_forward + self.backward_time:
            raise ValueError("T_full must equal T_forward plus all t_dw and t_dy")

    @classmethod
    def from_timings(cls, t_dw: Sequence[int], t_dy: Sequence[int], T_forward: int,
                     ids: Sequence[str] | None = None,
                     roles: Sequence[Role] | None = None) -> "TensorProfile":
        """Build a profile directly from depth-ordered timings."""
        n = len(t_dw)
        if len(t_dy) != n:
            raise ValueError("t_dw and t_dy lengths differ")
        ids = ids or [f"t{k}" for k in range(1, n + 1)]
        roles = roles or [Role.KERNEL] * n
        nodes = tuple(TensorNode(ids[k], k + 1, roles[k], int(t_dw[k]), int(t_dy[k]))
                      for k in range(n))
        T_forward = int(T_forward)
        return cls(nodes, T_forward, T_forward + sum(map(int, t_dw)) + sum(map(int, t_dy)))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def t_dw(self) -> list[int]:
        return [n.t_dw for n in self.nodes]

    @property
    def t_dy(self) -> list[int]:
        return [n.t_dy for n in self.nodes]

    @property
    def backward_time(self) -> int:
        return sum(n.t_dw + n.t_dy for n in self.nodes)

    def to_dict(self) -> dict:
        return {"T_forward": self.T_forward, "T_full": self.T_full,
                "tensors": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorProfile":
        return cls(tuple(TensorNode.from_dict(t) for t in d["tensors"]),
                   int(d["T_forward"]), int(d["T_full"]))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TensorProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def unroll(net: Network) -> list[TensorNode]:
    """Tensor chain in backward order, timings zeroed."""
    return [TensorNode(tid, k, net.tensor_role[tid])
            for k, tid in enumerate(net.depth_order(), start=1)]


def _fold_owner(net: Network, layer: int) -> str | None:
    """Tensor whose t_dy absorbs the backward time of non-trainable ``layer``."""
    for j in range(layer - 1, -1, -1):
        spec = net.layers[j]
        if spec.trainable:
            # first tensor reached by the backward pass: Bias or Beta
            return net.layer_tensor(j, spec.roles()[1])
    return None


def assign_op(net: Network, layer: int, kind: OpKind) -> tuple[str, str]:
    """(tensor id, 'dw' | 'dy') receiving the time of one backward op."""
    if kind is OpKind.GRAD_KERNEL:
        return net.layer_tensor(layer, Role.KERNEL), "dw"
    if kind is OpKind.GRAD_BIAS:
        return net.layer_tensor(layer, Role.BIAS), "dw"
    if kind is OpKind.GRAD_INPUT:
        return net.layer_tensor(layer, Role.KERNEL), "dy"
    if kind is OpKind.GRAD_GAMMA:
        return net.layer_tensor(layer, Role.GAMMA), "dw"
    if kind is OpKind.GRAD_BETA:
        return net.layer_tensor(layer, Role.BETA), "dw"
    if kind is OpKind.BN_BLOCK:
        return net.layer_tensor(layer, Role.BETA), "dy"
    if kind is OpKind.NON_TRAINABLE:
        owner = _fold_owner(net, layer)
        if owner is None:
            raise ValueError(f"layer {layer} has no trainable layer on its input side")
        return owner, "dy"
    raise ValueError(f"{kind} is not a backward op")


def aggregate(net: Network, forward_records, backward_records, clock: ClockSpec) -> TensorProfile:
    """Fold op timings of one forward + full backward iteration onto tensors."""
    T_forward = sum(time_op(clock, r.rate_class, r.work, r.wall_ns) for r in forward_records)
    dw = dict.fromkeys(net.tensor_ids, 0)
    dy = dict.fromkeys(net.tensor_ids, 0)
    total = 0
    for r in backward_records:
        t = time_op(clock, r.rate_class, r.work, r.wall_ns)
        total += t
        tid, slot = assign_op(net, r.layer, r.kind)
        (dw if slot == "dw" else dy)[tid] += t
    if sum(dw.values()) + sum(dy.values()) != total:  # pragma: no cover
        raise RuntimeError("backward op time was lost or double counted")
    nodes = tuple(replace(n, t_dw=dw[n.tensor_id], t_dy=dy[n.tensor_id]) for n in unroll(net))
    return TensorProfile(nodes, T_forward, T_forward + total)


def profile(net: Network, batch: Batch, clock: ClockSpec) -> TensorProfile:
    """Time one instrumented forward + full backward iteration.

    The network is left exactly as it was (BatchNorm running statistics are
    not advanced).
    """
    _, cache = forward(net, batch, Mode.TRAIN, update_stats=False)
    grads = backward(net, cache, None)
    return aggregate(net, cache.records, grads.records, clock)


def f_mask(mask: SelectionMask) -> SelectionMask:
    """Positions whose t_dy is paid: every depth from the loss to the deepest selected tensor."""
    d = mask.deepest
    return SelectionMask(tuple(k <= d for k in range(1, len(mask) + 1)))


def predict_time(prof: TensorProfile, mask: SelectionMask) -> int:
    if len(mask) != len(prof):
        raise ValueError(f"mask length {len(mask)} != profile length {len(prof)}")
    total = prof.T_forward
    for node, sel, path in zip(prof.nodes, mask.bits, f_mask(mask).bits):
        if sel:
            total += node.t_dw
        if path:
            total += node.t_dy
    return total


def measure_iteration(net: Network, batch: Batch, mask: SelectionMask | None,
                      clock: ClockSpec) -> int:
    """Clocked duration of an actual forward + selective backward pass (no update, no state change)."""
    _, cache = forward(net, batch, Mode.TRAIN, update_stats=False)
    grads = backward(net, cache, mask)
    return sum(time_op(clock, r.rate_class, r.work, r.wall_ns)
               for r in (*cache.records, *grads.records))


def reprofile_overhead(runs_per_epoch: int, iterations_per_epoch: int,
                       profile_ns: int | None = None, iteration_ns: int | None = None) -> float:
    """Profiling cost as a fraction of one epoch's training time.

    With the timings omitted a profiling run is assumed to cost one
    iteration, giving ``runs_per_epoch / iterations_per_epoch``.
    """
    if iterations_per_epoch <= 0:
        raise ValueError("iterations_per_epoch must be positive")
    if runs_per_epoch == 0:
        return 0.0
    if profile_ns is None or iteration_ns is None:
        return runs_per_epoch / iterations_per_epoch
    return runs_per_epoch * profile_ns / (iterations_per_epoch * iteration_ns)
