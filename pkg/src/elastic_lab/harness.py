"""End-to-end elastic training runs, baselines and run comparison.

An elastic run profiles the network once, then at the first epoch of every
interval probes tensor importance, solves for the best mask under the
per-iteration budget and trains the interval with that mask. Every profiling,
probing and solving cost is charged to the run's cumulative time, as is test
evaluation (which the solver's budget does not cover).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import importance as imp_mod
from .clock import ClockSpec, time_op
from .config import TrainConfig, model_spec
from .data import Dataset, make_dataset
from .engine import (Mode, Network, apply_update, backward, build_network, cosine_lr,
                     forward)
from .importance import ImportanceVector
from .mask import SelectionMask
from .profiler import TensorProfile, predict_time, profile
from .selector import (DPConfig, Strategy, baseline_mask, iteration_limit, scale_factor,
                       solve_dp)

log = logging.getLogger(__name__)

_COMPARE_KEYS = ("model", "dataset", "num_classes", "per_class", "feature_dim", "spread",
                 "test_fraction", "epochs", "batch_size", "seed")


class ConfigMismatch(ValueError):
    pass


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    mask: list[int]  # forward order, input side first
    predicted_iter_ns: int
    measured_iter_ns: int
    train_ns: int
    overhead_ns: int
    eval_ns: int
    cumulative_ns: int
    cumulative_flops: int


@dataclass
class RunReport:
    config: dict
    epochs: list[EpochLog]
    final_accuracy: float
    total_time_ns: int
    train_time_ns: int
    overhead_time_ns: int
    eval_time_ns: int
    total_flops: int
    T_full: int
    iterations: int
    limits: list[int] = field(default_factory=list)
    speedup: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["epochs"] = [EpochLog(**e) for e in d["epochs"]]
        return cls(**d)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _RunLog:
    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w") if path is not None else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _records_time(clock: ClockSpec, records) -> tuple[int, int]:
    return (sum(time_op(clock, r.rate_class, r.work, r.wall_ns) for r in records),
            sum(r.work for r in records))


def evaluate_split(net: Network, data: Dataset, clock: ClockSpec, batch_size: int
                   ) -> tuple[float, float, int, int]:
    """(mean loss, accuracy, clocked ns, flops) of an eval-mode pass over ``data``."""
    total_loss, correct, ns, flops = 0.0, 0, 0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        batch = data.batch(idx, net.input_shape)
        loss, cache = forward(net, batch, Mode.EVAL)
        total_loss += loss * len(idx)
        correct += int(np.sum(cache.probs.argmax(axis=1) == batch.labels))
        t, w = _records_time(clock, cache.records)
        ns += t
        flops += w
    return total_loss / len(data), correct / len(data), ns, flops


def probe_seed(seed: int, epoch: int) -> int:
    return int(np.random.default_rng([seed, epoch, 17]).integers(2**31))


def build(config: TrainConfig) -> tuple[Network, Dataset, Dataset]:
    train, test = make_dataset(config.data_source())
    layers, input_shape = model_spec(config.model, train.num_classes, train.inputs.shape[1])
    net = build_network(layers, config.seed, input_shape)
    return net, train, test


ImportanceHook = Callable[[Network, int, ImportanceVector], ImportanceVector]


def run(config: TrainConfig, log_path: str | Path | None = None,
        reference: "RunReport | None" = None,
        importance_hook: ImportanceHook | None = None) -> RunReport:
    """Train according to ``config`` and return the run report.

    ``importance_hook`` may replace the probed importance vector (used for
    controlled experiments); it receives the network, the epoch and the
    probed vector.
    """
    strategy = config.strategy_enum
    clock = config.clock()
    net, train, test = build(config)
    iters_per_epoch = len(train) // config.batch_size
    if iters_per_epoch < 1:
        raise ValueError("training split is smaller than one batch")
    total_steps = iters_per_epoch * config.epochs
    shuffle_rng = np.random.default_rng([config.seed, 1])
    runlog = _RunLog(log_path)

    profile_batch = train.batch(np.arange(config.batch_size), net.input_shape)
    n = net.num_tensors
    mask = None if strategy is Strategy.ELASTIC else baseline_mask(strategy, net)

    epochs: list[EpochLog] = []
    limits: list[int] = []
    cum_ns = cum_flops = 0
    train_total = overhead_total = eval_total = 0
    step = 0
    prof: TensorProfile | None = None
    try:
        for epoch in range(config.epochs):
            overhead_ns = 0
            if prof is None or config.reprofile_every_epoch:
                prof = profile(net, profile_batch, clock)
                overhead_ns += prof.T_full
                cum_flops += _profile_flops(net, profile_batch)
                runlog.write({"type": "profile", "epoch": epoch, "T_forward": prof.T_forward,
                              "T_full": prof.T_full, "t_dw": prof.t_dw, "t_dy": prof.t_dy})

            if strategy is Strategy.ELASTIC and epoch % config.interval == 0:
                seed = probe_seed(config.seed, epoch)
                idx = np.random.default_rng(seed).choice(len(train), config.probe_batch_size,
                                                         replace=False)
                lr_now = _lr(config, step, total_steps)
                pr = imp_mod.probe(net, train.batch(idx, net.input_shape), lr_now,
                                   config.momentum, config.weight_decay, clock, epoch, seed)
                iv = pr.importance
                if importance_hook is not None:
                    iv = importance_hook(net, epoch, iv)
                overhead_ns += pr.time_ns
                cum_flops += pr.flops
                runlog.write({"type": "importance", **iv.to_dict()})

                span = iters_per_epoch * min(config.interval, config.epochs - epoch)
                reserve = 0
                if config.reserve_overhead:
                    planned = overhead_ns + _solve_estimate(clock, n, prof, config.t_q, config.rho)
                    if config.reprofile_every_epoch:
                        planned += prof.T_full * (min(config.interval, config.epochs - epoch) - 1)
                    reserve = math.ceil(planned / span)
                sol = solve_dp(prof, iv, DPConfig(config.rho, config.t_q, reserve))
                solve_ns = time_op(clock, "elementwise", sol.stats.work)
                overhead_ns += solve_ns
                cum_flops += sol.stats.work
                mask = sol.mask
                runlog.write({"type": "selection", "epoch": epoch, **sol.to_dict(),
                              "reserve_ns": reserve, "solve_ns": solve_ns})

            limits.append(predict_time(prof, mask))
            train_ns, measured, losses = 0, 0, []
            order = shuffle_rng.permutation(len(train))
            for it in range(iters_per_epoch):
                idx = order[it * config.batch_size:(it + 1) * config.batch_size]
                batch = train.batch(idx, net.input_shape)
                loss, cache = forward(net, batch, Mode.TRAIN)
                grads = backward(net, cache, mask)
                apply_update(net, grads, _lr(config, step, total_steps), config.momentum,
                             config.weight_decay)
                t, w = _records_time(clock, (*cache.records, *grads.records))
                train_ns += t
                cum_flops += w
                measured = max(measured, t)
                losses.append(loss)
                step += 1

            test_loss, acc, eval_ns, eval_flops = evaluate_split(net, test, clock,
                                                                 config.eval_batch_size)
            cum_flops += eval_flops
            cum_ns += train_ns + overhead_ns + eval_ns
            train_total += train_ns
            overhead_total += overhead_ns
            eval_total += eval_ns
            entry = EpochLog(epoch, float(np.mean(losses)), test_loss, acc, mask.forward_bits(),
                             predict_time(prof, mask), measured, train_ns, overhead_ns, eval_ns,
                             cum_ns, cum_flops)
            epochs.append(entry)
            runlog.write({"type": "epoch", **asdict(entry)})
            log.info("epoch %d loss %.4f acc %.3f mask %s", epoch, entry.train_loss, acc, mask)
    finally:
        runlog.close()

    report = RunReport(
        config=config.to_dict(), epochs=epochs, final_accuracy=epochs[-1].test_accuracy,
        total_time_ns=cum_ns, train_time_ns=train_total, overhead_time_ns=overhead_total,
        eval_time_ns=eval_total, total_flops=cum_flops, T_full=prof.T_full,
        iterations=total_steps, limits=limits,
        notes=["test evaluation time is included in total_time_ns but not in the solver budget"],
    )
    if reference is not None:
        report.speedup = reference.total_time_ns / report.total_time_ns
    return report


def _lr(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return cosine_lr(step, total_steps, config.lr)


def _profile_flops(net: Network, batch) -> int:
    _, cache = forward(net, batch, Mode.TRAIN, update_stats=False)
    grads = backward(net, cache, None)
    return sum(r.work for r in (*cache.records, *grads.records))


def _solve_estimate(clock: ClockSpec, n: int, prof: TensorProfile, t_q: int | None,
                    rho: float) -> int:
    """Clocked cost of a pruned solve with every (k, k_c, t) cell evaluated.

    The pruned table is no wider than the scaled budget before any reserve,
    so this bounds a solve that needs no feasibility repair.
    """
    budget = max(0, iteration_limit(prof, rho) - prof.T_forward)
    width = math.floor(budget * scale_factor(prof, t_q)) + 1
    return time_op(clock, "elementwise", n * (n + 1) // 2 * width)


def compare(a: RunReport, b: RunReport) -> dict:
    """Accuracy delta and time / FLOPs ratios of run ``a`` against run ``b``."""
    mismatched = [k for k in _COMPARE_KEYS if a.config.get(k) != b.config.get(k)]
    if mismatched:
        raise ConfigMismatch(f"reports differ in {mismatched}")
    return {
        "strategy_a": a.config["strategy"], "strategy_b": b.config["strategy"],
        "rho_a": a.config["rho"], "rho_b": b.config["rho"],
        "accuracy_a": a.final_accuracy, "accuracy_b": b.final_accuracy,
        "accuracy_delta": a.final_accuracy - b.final_accuracy,
        "time_ratio": a.total_time_ns / b.total_time_ns,
        "flops_ratio": a.total_flops / b.total_flops,
    }


def sweep(config: TrainConfig, key: str, values: Sequence, out_dir: str | Path | None = None
          ) -> list[RunReport]:
    """Run ``config`` once per value of ``key`` (e.g. ``rho`` or ``t_q``)."""
    reports = []
    for v in values:
        cfg = config.replace(**{key: v})
        log_path = report_path = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / f"{key}_{v}.jsonl"
            report_path = out / f"{key}_{v}.json"
        rep = run(cfg, log_path)
        if report_path is not None:
            rep.dump(report_path)
        reports.append(rep)
    return reports


def selection_mask_of(report: RunReport, epoch: int) -> SelectionMask:
    return SelectionMask.from_forward_bits(report.epochs[epoch].mask)
