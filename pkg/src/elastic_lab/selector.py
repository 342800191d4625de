"""Budgeted tensor selection by dynamic programming, plus an exhaustive oracle.

A mask ``M`` costs ``T_forward + sum(t_dw[k] for k in M) + sum(t_dy[1..d(M)])``
where ``d(M)`` is its deepest selected depth. The solver maximises the summed
importance of ``M`` subject to that cost staying within ``rho * T_full``.

Ties between equal objectives are broken towards fewer tensors, then a
shallower deepest tensor, then the lexicographically smallest depth-ordered
bit string.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .engine import LayerKind, Network, Role
from .importance import ImportanceVector
from .mask import SelectionMask
from .profiler import TensorProfile, predict_time

MAX_BRUTE_FORCE_N = 20
DEFAULT_TQ = 1000


class InfeasibleBudget(ValueError):
    """``rho`` leaves no room even for the forward pass."""

    def __init__(self, rho, limit_ns: int, T_forward: int, T_full: int, reserve_ns: int = 0):
        self.min_rho = (T_forward + reserve_ns) / T_full if T_full else 0.0
        reserved = f" after reserving {reserve_ns} ns of overhead" if reserve_ns else ""
        super().__init__(
            f"iteration limit {limit_ns} ns (rho={rho}){reserved} is below the forward pass "
            f"time {T_forward} ns; minimum achievable rho is {self.min_rho:.4f}")


@dataclass(frozen=True)
class DPConfig:
    rho: float
    T_q: int | None = DEFAULT_TQ  # None solves at exact resolution
    reserve_ns: int = 0  # per-iteration time withheld from the budget (amortised overheads)

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.T_q is not None and self.T_q < 1:
            raise ValueError("T_q must be >= 1")
        if self.reserve_ns < 0:
            raise ValueError("reserve_ns must be non-negative")


@dataclass
class SolverStats:
    visited: int = 0
    skipped_invalid: int = 0
    skipped_redundant: int = 0
    work: int = 0
    repairs: int = 0
    wall_seconds: float = 0.0

    def to_dict(self, include_wall: bool = False) -> dict:
        d = {"visited": self.visited, "skipped_invalid": self.skipped_invalid,
             "skipped_redundant": self.skipped_redundant, "work": self.work,
             "repairs": self.repairs}
        if include_wall:
            d["wall_seconds"] = self.wall_seconds
        return d


@dataclass
class DPSolution:
    mask: SelectionMask
    objective: float
    predicted_time: int
    limit_ns: int
    scaled_budget: int
    stats: SolverStats = field(default_factory=SolverStats)

    def to_dict(self) -> dict:
        return {"mask": self.mask.forward_bits(), "objective": self.objective,
                "predicted_time": self.predicted_time, "limit_ns": self.limit_ns,
                "scaled_budget": self.scaled_budget, "stats": self.stats.to_dict()}


def iteration_limit(prof: TensorProfile, rho: float, reserve_ns: int = 0) -> int:
    """Largest admissible iteration time: floor(rho * T_full) - reserve."""
    return math.floor(Fraction(rho) * prof.T_full) - reserve_ns


def backward_budget(prof: TensorProfile, rho: float, reserve_ns: int = 0) -> int:
    limit = iteration_limit(prof, rho, reserve_ns)
    if limit < prof.T_forward:
        raise InfeasibleBudget(rho, limit, prof.T_forward, prof.T_full, reserve_ns)
    return limit - prof.T_forward


def _importances(importance, n: int) -> list[float]:
    vals = importance.values if isinstance(importance, ImportanceVector) else importance
    vals = [float(v) for v in vals]
    if len(vals) != n:
        raise ValueError(f"importance length {len(vals)} != profile length {n}")
    # harmful updates never help a maximisation; flooring keeps the DP monotone
    return [v if v > 0 else 0.0 for v in vals]


def scale_factor(prof: TensorProfile, T_q: int | None) -> Fraction:
    """Z = T_q / T with T the full backward time, capped at 1."""
    T = prof.backward_time
    if T_q is None or T == 0 or T_q >= T:
        return Fraction(1)
    return Fraction(T_q, T)


def downscale(prof: TensorProfile, Z: Fraction | float) -> tuple[list[int], list[int]]:
    """Floor-scaled (t_dw, t_dy) in depth order."""
    Z = Fraction(Z)
    if not 0 < Z <= 1:
        raise ValueError("Z must lie in (0, 1]")
    return ([math.floor(t * Z) for t in prof.t_dw], [math.floor(t * Z) for t in prof.t_dy])


def prune_subproblems(prof: TensorProfile, cfg: DPConfig) -> Callable[[int, int], bool]:
    """Predicate ``skip(k, t)`` over subproblems of the scaled problem.

    A subproblem is invalid when ``t`` exceeds the scaled budget and redundant
    when passing the error gradient down to depth ``k`` alone already costs
    more than ``t``.
    """
    Z = scale_factor(prof, cfg.T_q)
    _, dy = downscale(prof, Z)
    budget = math.floor(backward_budget(prof, cfg.rho, cfg.reserve_ns) * Z)
    reach = np.concatenate([[0], np.cumsum(dy)])

    def skip(k: int, t: int) -> bool:
        return t > budget or reach[k] > t

    return skip


def _mask_bits(n: int):
    if n <= 62:
        return np.int64, [np.int64(1) << np.int64(n - k) for k in range(1, n + 1)]
    return object, [1 << (n - k) for k in range(1, n + 1)]


def _solve_scaled(dw: Sequence[int], dy: Sequence[int], imp: Sequence[float], budget: int,
                  prune: bool, stats: SolverStats) -> tuple[int, float]:
    """Exact DP over integer timings. Returns (mask as depth-1-MSB int, objective).

    ``val[k][t]`` is the best objective among masks whose deepest selected
    tensor is exactly ``k`` and whose backward cost is at most ``t``.
    """
    n = len(dw)
    reach = [0]
    for d in dy:
        reach.append(reach[-1] + d)
    full = sum(dw) + reach[-1]
    width = budget + 1 if prune else max(budget, full) + 1
    if prune:
        stats.skipped_invalid += n * (max(budget, full) - budget)
    mdtype, bit = _mask_bits(n)

    val = [None] * (n + 1)
    cnt = [None] * (n + 1)
    msk = [None] * (n + 1)
    for k in range(1, n + 1):
        v = np.full(width, -np.inf)
        c = np.zeros(width, dtype=np.int64)
        m = np.zeros(width, dtype=mdtype)
        lo = min(reach[k], width) if prune else 0
        stats.skipped_redundant += lo
        stats.visited += width - lo
        # k_c = 0: tensor k is the only selection
        start = max(dw[k - 1] + reach[k], lo)
        if start < width:
            v[start:] = imp[k - 1]
            c[start:] = 1
            m[start:] = bit[k - 1]
            stats.work += width - start
        for kc in range(1, k):
            delta = dw[k - 1] + reach[k] - reach[kc]
            s = max(delta, lo)
            if s >= width:
                continue
            stats.work += width - s
            cv = val[kc][s - delta:width - delta] + imp[k - 1]
            cc = cnt[kc][s - delta:width - delta] + 1
            cm = msk[kc][s - delta:width - delta] | bit[k - 1]
            bv, bc, bm = v[s:], c[s:], m[s:]
            better = (cv > bv) | ((cv == bv) & ((cc < bc) | ((cc == bc) & (cm < bm))))
            bv[better] = cv[better]
            bc[better] = cc[better]
            bm[better] = cm[better]
        val[k], cnt[k], msk[k] = v, c, m

    best = (0.0, 0, 0, 0)  # (objective, count, deepest, mask) of the empty mask
    if budget >= 0:
        for k in range(1, n + 1):
            ov, oc, om = val[k][budget], int(cnt[k][budget]), int(msk[k][budget])
            if ov == -np.inf:
                continue
            if _better((ov, oc, k, om), best):
                best = (float(ov), oc, k, om)
    return best[3], best[0]


def _better(a, b) -> bool:
    """Tie-break order: higher objective, fewer tensors, shallower deepest, smaller mask."""
    if a[0] != b[0]:
        return a[0] > b[0]
    return (a[1], a[2], a[3]) < (b[1], b[2], b[3])


def _int_to_mask(n: int, value: int) -> SelectionMask:
    return SelectionMask(tuple(bool((value >> (n - k)) & 1) for k in range(1, n + 1)))


def _objective(mask: SelectionMask, imp: Sequence[float]) -> float:
    # same summation order as the DP: increasing depth
    total = 0.0
    for k in mask.depths:
        total += imp[k - 1]
    return total


def solve_dp(prof: TensorProfile, importance, cfg: DPConfig, prune: bool = True) -> DPSolution:
    """Best mask under ``cfg``'s budget, solved on floor-downscaled timings.

    The answer is re-checked against unscaled timings; if rounding made it
    infeasible the scaled budget is lowered one unit and the solve repeats.
    """
    t0 = time.perf_counter()
    n = len(prof)
    imp = _importances(importance, n)
    limit = iteration_limit(prof, cfg.rho, cfg.reserve_ns)
    B = backward_budget(prof, cfg.rho, cfg.reserve_ns)
    Z = scale_factor(prof, cfg.T_q)
    dw, dy = downscale(prof, Z)
    scaled = math.floor(B * Z)
    stats = SolverStats()
    while True:
        value, _ = _solve_scaled(dw, dy, imp, scaled, prune, stats)
        mask = _int_to_mask(n, value)
        t_pred = predict_time(prof, mask)
        if t_pred <= limit:
            break
        stats.repairs += 1
        scaled -= 1
    stats.wall_seconds = time.perf_counter() - t0
    return DPSolution(mask, _objective(mask, imp), t_pred, limit, scaled, stats)


def brute_force(prof: TensorProfile, importance, rho: float, reserve_ns: int = 0) -> DPSolution:
    """Enumerate all 2^N masks; exact optimum with the solver's tie-break."""
    t0 = time.perf_counter()
    n = len(prof)
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"brute force refuses N={n} > {MAX_BRUTE_FORCE_N}")
    imp = _importances(importance, n)
    limit = iteration_limit(prof, rho, reserve_ns)
    B = backward_budget(prof, rho, reserve_ns)

    codes = np.arange(1 << n, dtype=np.int64)
    # bit k-1 of code <-> depth k
    bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    dw = np.asarray(prof.t_dw, dtype=np.int64)
    reach = np.concatenate([[0], np.cumsum(np.asarray(prof.t_dy, dtype=np.int64))])
    deepest = np.where(bits.any(axis=1), n - np.argmax(bits[:, ::-1], axis=1), 0)
    cost = bits.astype(np.int64) @ dw + reach[deepest]
    obj = np.zeros(len(codes))
    for k in range(n):
        obj = np.where(bits[:, k], obj + imp[k], obj)
    count = bits.sum(axis=1)
    lex = np.zeros(len(codes), dtype=np.int64)
    for k in range(n):
        lex |= bits[:, k].astype(np.int64) << (n - 1 - k)

    feasible = cost <= B
    order = np.lexsort((lex, deepest, count, -obj))
    best = order[feasible[order]][0]
    mask = SelectionMask(tuple(bits[best]))
    return DPSolution(mask, float(obj[best]), predict_time(prof, mask), limit, B,
                      SolverStats(visited=1 << n, work=(1 << n) * n,
                                  wall_seconds=time.perf_counter() - t0))


def resolution_sweep(prof: TensorProfile, importance, rho: float,
                     resolutions: Sequence[int | None], reserve_ns: int = 0) -> list[dict]:
    """Solve at several T_q values to trade solver work against optimality."""
    rows = []
    for tq in resolutions:
        sol = solve_dp(prof, importance, DPConfig(rho, tq, reserve_ns))
        rows.append({"T_q": tq, "objective": sol.objective, "predicted_time": sol.predicted_time,
                     "work": sol.stats.work, "mask": sol.mask.forward_bits()})
    return rows


class Strategy(str, Enum):
    ELASTIC = "elastic"
    FULL = "full"
    TRADITIONAL_TL = "traditional_tl"
    BN_BIAS = "bn_bias"


def baseline_mask(strategy: Strategy | str, net: Network) -> SelectionMask:
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise ValueError(f"unknown strategy {strategy!r}") from None
    if strategy is Strategy.FULL:
        return SelectionMask.full(net.num_tensors)
    head = [i for i, layer in enumerate(net.layers) if layer.kind is LayerKind.DENSE]
    if not head:
        raise ValueError("network has no dense prediction layer")
    head_ids = {t for t in net.tensor_ids if net.tensor_layer[t] == head[-1]}
    if strategy is Strategy.TRADITIONAL_TL:
        return net.mask_from_ids(head_ids)
    if strategy is Strategy.BN_BIAS:
        extra = {t for t in net.tensor_ids
                 if net.tensor_role[t] in (Role.BIAS, Role.GAMMA, Role.BETA)}
        return net.mask_from_ids(head_ids | extra)
    raise ValueError(f"{strategy.value} has no fixed baseline mask")
