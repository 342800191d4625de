"""First-order tensor importance and the exact undo oracle it approximates.

The importance of tensor ``k`` is ``-sum(g * dw)`` over its elements, where
``g`` is the loss gradient at the pre-update weights and ``dw`` the tensor's
latest update. Positive values mean the update reduced the training loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .clock import ClockSpec, time_op
from .engine import Batch, GradientSet, Mode, Network, apply_update, backward, forward


@dataclass(frozen=True)
class ImportanceVector:
    values: tuple[float, ...]  # indexed by depth - 1
    epoch_stamp: int = 0
    batch_seed: int = 0

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(np.isfinite(vals)):
            raise ValueError("importance values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch_stamp, "batch_seed": self.batch_seed,
                "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceVector":
        return cls(tuple(d["values"]), int(d.get("epoch", 0)), int(d.get("batch_seed", 0)))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ImportanceVector":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _contributions(net: Network, grads: Mapping[str, np.ndarray],
                   updates: Mapping[str, np.ndarray]) -> dict[str, float]:
    return {tid: -float(np.sum(grads[tid] * updates[tid])) for tid in net.tensor_ids}


def _check_updates(net: Network, updates: Mapping[str, np.ndarray]) -> None:
    missing = [t for t in net.tensor_ids if t not in updates]
    if missing:
        raise KeyError(f"updates missing for tensors: {missing}")


def _train_loss(net: Network, batch: Batch) -> float:
    loss, _ = forward(net, batch, Mode.TRAIN, update_stats=False)
    return loss


def evaluate(net: Network, probe_batch: Batch, updates: Mapping[str, np.ndarray],
             epoch_stamp: int = 0, batch_seed: int = 0) -> ImportanceVector:
    """Score each tensor's update, with ``net`` holding the post-update weights.

    The gradient is taken at the pre-update point ``w = (w + dw) - dw``; the
    network is restored bit-for-bit before returning.
    """
    _check_updates(net, updates)
    saved = {t: net.params[t] for t in net.tensor_ids}
    try:
        for t in net.tensor_ids:
            net.params[t] = saved[t] - updates[t]
        _, cache = forward(net, probe_batch, Mode.TRAIN, update_stats=False)
        grads = backward(net, cache, None).grads
    finally:
        net.params.update(saved)
    scores = _contributions(net, grads, updates)
    return ImportanceVector(tuple(scores[t] for t in net.depth_order()), epoch_stamp, batch_seed)


def undo_oracle(net: Network, probe_batch: Batch, updates: Mapping[str, np.ndarray],
                k: str) -> float:
    """Loss increase from reverting only tensor ``k``'s update: L(undo k) - L(w + dw)."""
    base = _train_loss(net, probe_batch)
    saved = net.params[k]
    try:
        net.params[k] = saved - updates[k]
        undone = _train_loss(net, probe_batch)
    finally:
        net.params[k] = saved
    return undone - base


def additivity_check(net: Network, probe_batch: Batch, updates: Mapping[str, np.ndarray],
                     subset: Iterable[str], rtol: float = 1e-12) -> tuple[float, float]:
    """Sum of per-tensor scores over ``subset`` against the joint first-order estimate.

    The joint estimate is one inner product of the concatenated gradient and
    update vectors of the subset.
    """
    subset = list(subset)
    _check_updates(net, updates)
    iv = evaluate(net, probe_batch, updates)
    per = dict(zip(net.depth_order(), iv.values))
    summed = float(sum(per[t] for t in subset))
    if not subset:
        return summed, 0.0
    saved = {t: net.params[t] for t in net.tensor_ids}
    try:
        for t in net.tensor_ids:
            net.params[t] = saved[t] - updates[t]
        _, cache = forward(net, probe_batch, Mode.TRAIN, update_stats=False)
        grads = backward(net, cache, subset).grads
    finally:
        net.params.update(saved)
    g = np.concatenate([grads[t].ravel() for t in subset])
    dw = np.concatenate([updates[t].ravel() for t in subset])
    joint = -float(np.dot(g, dw))
    scale = float(np.sum(np.abs(g * dw)))
    if abs(joint - summed) > rtol * scale:
        raise AssertionError(f"additivity violated: {summed} vs {joint}")
    return summed, joint


@dataclass
class ProbeResult:
    importance: ImportanceVector
    grads: GradientSet
    updates: dict[str, np.ndarray]
    time_ns: int
    flops: int


def probe(net: Network, batch: Batch, lr: float, momentum: float, weight_decay: float,
          clock: ClockSpec, epoch_stamp: int = 0, batch_seed: int = 0) -> ProbeResult:
    """One full-model candidate step scored at its pre-update point.

    The candidate update starts from zeroed momentum buffers. The network,
    its optimizer state and BatchNorm statistics are restored afterwards, so
    the probe never changes training.
    """
    state = net.state()
    try:
        _, cache = forward(net, batch, Mode.TRAIN, update_stats=False)
        grads = backward(net, cache, None)
        for t in net.tensor_ids:
            net.momentum[t] = np.zeros_like(net.momentum[t])
        updates = apply_update(net, grads, lr, momentum, weight_decay)
    finally:
        net.load_state(state)
    scores = _contributions(net, grads.grads, updates)
    iv = ImportanceVector(tuple(scores[t] for t in net.depth_order()), epoch_stamp, batch_seed)
    records = (*cache.records, *grads.records)
    score_work = 2 * net.num_params
    time_ns = sum(time_op(clock, r.rate_class, r.work, r.wall_ns) for r in records)
    time_ns += time_op(clock, "elementwise", score_work)
    flops = sum(r.work for r in records) + score_work
    return ProbeResult(iv, grads, updates, time_ns, flops)
