"""Reference solvers: Dinkelbach + SCA with a log-barrier Newton core, and a grid oracle.

Write S_i = p_1 + ... + p_i for the cumulative power of a subchannel. The rate of
user i is then the difference of two concave functions,

    log2(1 + H_i S_i) - log2(1 + H_i S_{i-1}),

so replacing the subtracted term by its tangent at the current iterate gives a
concave lower bound that is tight at that iterate (successive convex
approximation). The rate requirement is linear in p once rearranged,

    p_i >= g (1/H_i + S_{i-1}),   g = 2**R - 1,

so every constraint is a linear inequality ``A p <= b`` and iterates stay
feasible throughout.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .system import (
    LN2,
    InvalidInputError,
    NetworkInstance,
    PowerAllocation,
    SystemConfig,
    energy_efficiency,
    is_feasible,
)

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class ScaConfig:
    outer_tol: float = 1e-6
    inner_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 100
    barrier_mu: float = 30.0
    barrier_gap: float = 1e-9
    newton_tol: float = 1e-10
    max_newton: int = 100
    warm_t: float = 1e4

    def __post_init__(self):
        if min(self.outer_tol, self.inner_tol, self.barrier_gap) <= 0:
            raise InvalidInputError("tolerances must be positive")


@dataclass
class SolveResult:
    alloc: PowerAllocation | None
    ee: float
    status: Status
    iterations: int = 0
    wall_time: float = 0.0
    trace: list[float] = field(default_factory=list)
    dinkelbach_residual: float = math.nan
    sample_id: int = 0

    @property
    def ok(self) -> bool:
        return self.status is not Status.INFEASIBLE


# problem data


@dataclass
class _Problem:
    gains: np.ndarray  # flat, subchannel-major
    cum: np.ndarray  # (V, V) maps p to cumulative powers S
    prev: np.ndarray  # (V,) index of S_{i-1} in the flat layout, -1 for first users
    a: np.ndarray  # constraint rows
    b: np.ndarray
    sizes: tuple[int, ...]


def _build(instance: NetworkInstance, cfg: SystemConfig) -> _Problem:
    sizes = instance.users_per_subchannel
    v = sum(sizes)
    gains = np.concatenate(instance.subchannels)
    cum = np.zeros((v, v))
    prev = np.full(v, -1)
    gam = cfg.sinr_threshold
    rows, rhs = [], []
    start = 0
    for k in sizes:
        for i in range(k):
            idx = start + i
            cum[idx, start : idx + 1] = 1.0
            if i > 0:
                prev[idx] = idx - 1
            # qos: gam * sum_{j<i} p_j - p_i <= -gam / H_i
            r = np.zeros(v)
            r[start:idx] = gam
            r[idx] = -1.0
            rows.append(r)
            rhs.append(-gam / gains[idx])
            if i > 0:
                r = np.zeros(v)
                r[idx - 1] = 1.0
                r[idx] = -1.0
                rows.append(r)
                rhs.append(0.0)
        start += k
    rows.append(np.ones(v))
    rhs.append(cfg.p_max)
    return _Problem(gains, cum, prev, np.array(rows), np.array(rhs), sizes)


def minimal_power(instance: NetworkInstance, cfg: SystemConfig, inflate: float = 0.0, step: float = 0.0) -> np.ndarray:
    """Componentwise smallest powers meeting the rate and ordering constraints.

    With ``inflate``/``step`` > 0 every rate and ordering constraint holds strictly.
    """
    gam = cfg.sinr_threshold * (1.0 + inflate)
    out = []
    for g in instance.subchannels:
        p = np.zeros(g.size)
        s = 0.0
        last = 0.0
        for i in range(g.size):
            p[i] = max(last, gam * (1.0 / g[i] + s)) + step
            s += p[i]
            last = p[i]
        out.append(p)
    return np.concatenate(out)


def restore_feasibility(instance: NetworkInstance, cfg: SystemConfig) -> tuple[np.ndarray | None, np.ndarray | None]:
    """(boundary-feasible point, strictly interior point); (None, None) when infeasible."""
    base = minimal_power(instance, cfg)
    if base.sum() > cfg.p_max + 1e-12:
        return None, None
    v = base.size
    for eta in (0.5, 0.1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        p = minimal_power(instance, cfg, inflate=eta, step=eta * cfg.p_max / (4 * v))
        if p.sum() < cfg.p_max:
            return base, p
    return base, None


# log-barrier Newton for the convexified subproblem


def _surrogate_linear(prob: _Problem, anchor_s: np.ndarray, q: float) -> np.ndarray:
    """Linear coefficients (in p) of the convexified objective.

    The objective is  sum_i f(H_i S_i) - sum_i c_i S_{i-1} - q * sum p, with c_i the
    slope of the subtracted rate term at the anchor.
    """
    has_prev = prob.prev >= 0
    prev_idx = prob.prev[has_prev]
    h = prob.gains[has_prev]
    c = h / ((1.0 + h * anchor_s[prev_idx]) * LN2)
    lin_s = np.zeros_like(prob.gains)
    np.add.at(lin_s, prev_idx, -c)
    return prob.cum.T @ lin_s - q


def _concave_value(prob: _Problem, p: np.ndarray, lin_p: np.ndarray) -> float:
    s = prob.cum @ p
    return float(np.sum(np.log1p(prob.gains * s)) / LN2 + lin_p @ p)


def _barrier_solve(
    prob: _Problem, lin_p: np.ndarray, p0: np.ndarray, sca: ScaConfig, t0: float = 1.0
) -> tuple[np.ndarray, int]:
    """Maximize the concave surrogate over {A p <= b} from strictly feasible ``p0``.

    Centering minimizes  -F(p) - (1/t) sum log(b - A p)  so that values stay on the
    scale of the objective; the duality gap after centering is m/t.
    """
    a, b, h, cum = prob.a, prob.b, prob.gains, prob.cum
    m = a.shape[0]
    p = p0.copy()
    if np.any(b - a @ p <= 0):
        raise InvalidInputError("barrier start point is not strictly feasible")
    cum_t = cum.T.copy()
    steps = 0

    def phi(x, inv_t):
        d = b - a @ x
        if d.min() <= 0:
            return math.inf
        return -(np.log1p(h * (cum @ x)).sum() / LN2 + lin_p @ x) - inv_t * np.log(d).sum()

    t = t0
    while True:
        inv_t = 1.0 / t
        f0 = phi(p, inv_t)
        for _ in range(sca.max_newton):
            d = b - a @ p
            hs = 1.0 + h * (cum @ p)
            ad = a / d[:, None]
            g = -(cum_t @ (h / (hs * LN2)) + lin_p) + inv_t * (a.T @ (1.0 / d))
            hmat = (cum_t * (h * h / (hs * hs * LN2))) @ cum + inv_t * (ad.T @ ad)
            try:
                step = -np.linalg.solve(hmat, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hmat, g, rcond=None)[0]
            dec = -g @ step
            steps += 1
            if dec / 2 <= sca.newton_tol:
                break
            da = a @ step
            pos = da > 0
            alpha = min(1.0, 0.99 * float((d[pos] / da[pos]).min())) if pos.any() else 1.0
            floor = 1e-13 * max(1.0, abs(f0))
            for _ in range(60):
                f1 = phi(p + alpha * step, inv_t)
                if f1 <= f0 - 0.25 * alpha * dec or (f1 <= f0 + floor and 0.25 * alpha * dec <= floor):
                    break
                alpha *= 0.5
            else:
                break
            p = p + alpha * step
            f0 = f1
        if m / t < sca.barrier_gap:
            return p, steps
        t *= sca.barrier_mu


def _rates_flat(prob: _Problem, p: np.ndarray) -> np.ndarray:
    s = prob.cum @ p
    prev = np.where(prob.prev >= 0, s[np.maximum(prob.prev, 0)], 0.0)
    return (np.log1p(prob.gains * s) - np.log1p(prob.gains * prev)) / LN2


def sca_solve(
    instance: NetworkInstance, cfg: SystemConfig = SystemConfig(), sca: ScaConfig = ScaConfig()
) -> SolveResult:
    """Dinkelbach outer loop over q, SCA inner loop, log-barrier Newton for each convex subproblem."""
    t0 = time.perf_counter()
    base, interior = restore_feasibility(instance, cfg)
    if base is None:
        return SolveResult(None, 0.0, Status.INFEASIBLE, 0, time.perf_counter() - t0, sample_id=instance.sample_id)
    prob = _build(instance, cfg)

    def ee_of(x):
        return float(_rates_flat(prob, x).sum() / (x.sum() + cfg.p_circuit))

    if interior is None:
        # the feasible set has no interior worth searching; the minimal point is it
        alloc = PowerAllocation.from_flat(base, instance)
        e = ee_of(base)
        return SolveResult(alloc, e, Status.OPTIMAL, 0, time.perf_counter() - t0, [e], 0.0, instance.sample_id)

    p = interior
    q = ee_of(p)
    trace = [q]
    status = Status.MAX_ITER
    iterations = 0
    residual = math.nan
    theta = 1e-3
    warm = False
    for _ in range(sca.max_outer):
        iterations += 1
        q_used = q
        x = p
        val = float(_rates_flat(prob, x).sum() - q_used * (x.sum() + cfg.p_circuit))
        for _ in range(sca.max_inner):
            lin_p = _surrogate_linear(prob, prob.cum @ x, q_used)
            # pull slightly toward the interior point so the barrier starts strictly feasible
            t_init = sca.warm_t if warm else 1.0
            y, _ = _barrier_solve(prob, lin_p, (1.0 - theta) * x + theta * interior, sca, t_init)
            warm = True
            new_val = float(_rates_flat(prob, y).sum() - q_used * (y.sum() + cfg.p_circuit))
            if new_val <= val:
                break
            improved = new_val - val
            x, val = y, new_val
            if improved <= sca.inner_tol * max(1.0, abs(val)):
                break
        residual = val
        new_q = ee_of(x)
        if new_q > q:
            p, q = x, new_q
        trace.append(q)
        if residual <= sca.outer_tol:
            status = Status.OPTIMAL
            break
    alloc = PowerAllocation.from_flat(np.maximum(p, 0.0), instance)
    result = SolveResult(
        alloc, energy_efficiency(alloc, instance, cfg), status, iterations, time.perf_counter() - t0, trace, residual,
        instance.sample_id,
    )
    if result.status is Status.OPTIMAL and not is_feasible(alloc, instance, cfg):
        raise AssertionError(f"sample {instance.sample_id}: solver returned an infeasible optimum")
    return result


# exhaustive grid oracle


def _subchannel_table(g: np.ndarray, units: int, step: float, cfg: SystemConfig, max_candidates: int):
    """Best sum rate of one subchannel for every total power ``s * step``, s = 0..units.

    Returns (best_rate (units+1,), best_tuple (units+1, K) in grid units); rows with
    no feasible tuple have rate -inf.
    """
    tol = 1e-9
    levels = np.arange(units + 1)
    cands = np.zeros((1, 0), dtype=np.int64)
    rate = np.zeros(1)
    for i, h in enumerate(g):
        n_c = len(cands)
        if n_c * levels.size > max_candidates:
            raise InvalidInputError("grid too fine for exhaustive search")
        used = cands.sum(axis=1)
        new = np.repeat(cands, levels.size, axis=0)
        col = np.tile(levels, n_c)
        s_before = np.repeat(used, levels.size) * step
        r = np.log1p(col * step * h / (1.0 + s_before * h)) / LN2
        keep = (r >= cfg.r_req - tol) & (np.repeat(used, levels.size) + col <= units)
        if i > 0:
            keep &= col >= new[:, i - 1]
        cands = np.column_stack([new[keep], col[keep]])
        rate = np.repeat(rate, levels.size)[keep] + r[keep]
        if len(cands) == 0:
            break
    best = np.full(units + 1, -np.inf)
    arg = np.zeros((units + 1, g.size), dtype=np.int64)
    if len(cands):
        total = cands.sum(axis=1)
        # ascending rate so the last write per power sum is the maximum; stable keeps ties deterministic
        order = np.lexsort((-np.arange(len(rate)), rate))
        best[total[order]] = rate[order]
        arg[total[order]] = cands[order]
    return best, arg


def brute_force_oracle(
    instance: NetworkInstance, cfg: SystemConfig = SystemConfig(), grid_step: float = 1e-2, max_candidates: int = 50_000_000
) -> SolveResult:
    """Best grid point on {0, d, 2d, ..., <= P_max}^V under all constraints (V <= 4 variables).

    Subchannels couple only through the budget, and EE depends only on the total
    rate and total power, so each subchannel is reduced to its best rate per power
    sum and the tables are merged by a max-plus convolution. The result is the
    exact grid optimum.
    """
    t0 = time.perf_counter()
    if instance.n_users > 4:
        raise InvalidInputError("grid oracle supports at most 4 power variables")
    if grid_step <= 0:
        raise InvalidInputError("grid_step must be positive")
    units = int(math.floor(cfg.p_max / grid_step + 1e-9))

    def infeasible():
        return SolveResult(None, 0.0, Status.INFEASIBLE, 0, time.perf_counter() - t0, sample_id=instance.sample_id)

    tables = [_subchannel_table(g, units, grid_step, cfg, max_candidates) for g in instance.subchannels]
    comb = tables[0][0]
    choice = []  # per merge: best split a (units for the earlier subchannels) for each total s
    for rate_t, _ in tables[1:]:
        new = np.full(units + 1, -np.inf)
        split = np.zeros(units + 1, dtype=np.int64)
        for a in np.flatnonzero(np.isfinite(comb)):
            cand = comb[a] + rate_t[: units + 1 - a]
            better = cand > new[a:]
            new[a:][better] = cand[better]
            split[a:][better] = a
        comb = new
        choice.append(split)
    if not np.any(np.isfinite(comb)):
        return infeasible()
    ee = np.where(np.isfinite(comb), comb / (np.arange(units + 1) * grid_step + cfg.p_circuit), -np.inf)
    s = int(np.argmax(ee))
    parts = []
    for n in range(len(tables) - 1, 0, -1):
        a = int(choice[n - 1][s])
        parts.append(tables[n][1][s - a])
        s = a
    parts.append(tables[0][1][s])
    powers = tuple(p.astype(np.float64) * grid_step for p in reversed(parts))
    alloc = PowerAllocation(powers)
    return SolveResult(alloc, energy_efficiency(alloc, instance, cfg), Status.OPTIMAL, units + 1,
                       time.perf_counter() - t0, sample_id=instance.sample_id)


# dataset sweeps


@dataclass
class SweepSummary:
    n_samples: int
    n_feasible: int
    feasibility_rate: float
    mean_ee: float
    total_time: float


def _solve_one(solver, inst: NetworkInstance, cfg: SystemConfig) -> SolveResult:
    t0 = time.perf_counter()
    try:
        r = solver(inst, cfg)
    except Exception as e:  # noqa: BLE001 - per-sample failures must not abort the sweep
        log.warning("sample %d: solver failed: %s", inst.sample_id, e)
        r = SolveResult(None, 0.0, Status.INFEASIBLE, 0, time.perf_counter() - t0, sample_id=inst.sample_id)
    r.sample_id = inst.sample_id
    return r


def solve_dataset(
    solver: Callable[[NetworkInstance, SystemConfig], SolveResult],
    instances: Sequence[NetworkInstance],
    cfg: SystemConfig = SystemConfig(),
    jobs: int = 1,
) -> tuple[list[SolveResult], SweepSummary]:
    """Run ``solver`` on every instance; failures are recorded as infeasible and the sweep continues.

    With ``jobs`` > 1 samples are solved in worker processes; results keep the input order.
    """
    if jobs > 1 and len(instances) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, [solver] * len(instances), instances, [cfg] * len(instances), chunksize=4))
    else:
        results = [_solve_one(solver, inst, cfg) for inst in instances]
    feasible = [
        r for r, inst in zip(results, instances) if r.alloc is not None and r.ok and is_feasible(r.alloc, inst, cfg)
    ]
    n = len(results)
    summary = SweepSummary(
        n_samples=n,
        n_feasible=len(feasible),
        feasibility_rate=100.0 * len(feasible) / n if n else math.nan,
        mean_ee=float(np.mean([r.ee for r in feasible])) if feasible else math.nan,
        total_time=float(sum(r.wall_time for r in results)),
    )
    return results, summary


RESULT_FIELDS = ("sample_id", "status", "ee", "time", "feasible")


def result_rows(results: Sequence[SolveResult], instances: Sequence[NetworkInstance], cfg: SystemConfig) -> list[dict]:
    return [
        {"sample_id": r.sample_id, "status": r.status, "ee": r.ee, "time": r.wall_time,
         "feasible": r.alloc is not None and is_feasible(r.alloc, inst, cfg)}
        for r, inst in zip(results, instances)
    ]


def write_result_rows(path: str | os.PathLike, rows: Sequence[dict]) -> Path:
    path = Path(path)
    lines = ["\t".join(RESULT_FIELDS)]
    for r in rows:
        lines.append(f"{r['sample_id']}\t{r['status'].value}\t{r['ee']!r}\t{r['time']!r}\t{int(r['feasible'])}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def save_results(path: str | os.PathLike, results: Sequence[SolveResult], instances: Sequence[NetworkInstance], cfg: SystemConfig) -> Path:
    """One line per sample: id, status, EE, wall time, feasibility at the default tolerance."""
    return write_result_rows(path, result_rows(results, instances, cfg))


def load_results(path: str | os.PathLike) -> list[dict]:
    rows = Path(path).read_text().splitlines()
    if not rows or tuple(rows[0].split("\t")) != RESULT_FIELDS:
        raise ValueError(f"{path}: not a solver results file")
    out = []
    for line in rows[1:]:
        sid, status, ee, t, feas = line.split("\t")
        out.append({"sample_id": int(sid), "status": Status(status), "ee": float(ee), "time": float(t), "feasible": feas == "1"})
    return out
