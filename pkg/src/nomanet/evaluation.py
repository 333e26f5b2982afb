"""Evaluation metrics and report files.

Optimality and scalability are the same number, ``100 * mean(model EE) /
mean(baseline EE)``, named by whether the test size matches the training size.
Model EE is the EE actually achieved by the model output whether or not that
output is feasible; feasibility is reported separately.
"""

from __future__ import annotations

import csv
import math
import platform
import statistics
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .mlp import MLPConfig, NotApplicableError
from .model import ModelConfig, ParamSet, allocate
from .system import InvalidInputError, NetworkInstance, PowerAllocation, SystemConfig, energy_efficiency, is_feasible
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

# size-mismatch tags: N differs / K differs / both differ
TAG_N, TAG_K, TAG_NK = "†", "¶", "§"


@dataclass
class EvalReport:
    dataset: str
    model: str
    n_test: int
    k_test: int
    metric: str  # "OP" on the training size, "SC" otherwise
    performance: float  # percent of the baseline mean EE; nan when not applicable
    feasibility_rate: float  # percent
    time_per_subchannel: float  # seconds; nan when not measured
    tag: str = ""
    n_samples: int = 0
    applicable: bool = True

    def __post_init__(self):
        self.n_test, self.k_test, self.n_samples = int(self.n_test), int(self.k_test), int(self.n_samples)
        self.performance = float(self.performance)
        self.feasibility_rate = float(self.feasibility_rate)
        self.time_per_subchannel = float(self.time_per_subchannel)
        if isinstance(self.applicable, str):
            self.applicable = self.applicable == "True"


REPORT_FIELDS = tuple(f.name for f in fields(EvalReport))


def size_tag(train_size: tuple[int, int], test_size: tuple[int, int]) -> str:
    dn, dk = train_size[0] != test_size[0], train_size[1] != test_size[1]
    return TAG_NK if dn and dk else TAG_N if dn else TAG_K if dk else ""


def _ratio(model_ees: Sequence[float], baseline_ees: Sequence[float]) -> float:
    m = np.asarray(model_ees, dtype=np.float64)
    b = np.asarray(baseline_ees, dtype=np.float64)
    if m.size == 0 or b.size == 0:
        raise InvalidInputError("empty pairing")
    if m.shape != b.shape:
        raise InvalidInputError(f"{m.size} model values paired with {b.size} baseline values")
    # equal lengths, so the ratio of means is the ratio of sums; identical inputs give exactly 100
    return float(100.0 * (m.sum() / b.sum()))


def optimality(model_ees: Sequence[float], baseline_ees: Sequence[float]) -> float:
    """Percent of the baseline's mean EE reached on the training problem size."""
    return _ratio(model_ees, baseline_ees)


def scalability(model_ees: Sequence[float], baseline_ees: Sequence[float]) -> float:
    """Same ratio as :func:`optimality`, on a problem size not seen in training."""
    return _ratio(model_ees, baseline_ees)


def achieved_ees(
    allocs: Sequence[PowerAllocation], instances: Sequence[NetworkInstance], cfg: SystemConfig, feasible_only: bool = False
) -> np.ndarray:
    """EE of each output; with ``feasible_only`` infeasible outputs count as zero."""
    if len(allocs) != len(instances):
        raise InvalidInputError("allocations and instances differ in number")
    out = np.array([energy_efficiency(a, i, cfg) for a, i in zip(allocs, instances)])
    if feasible_only:
        ok = np.array([is_feasible(a, i, cfg) for a, i in zip(allocs, instances)], dtype=bool)
        out = np.where(ok, out, 0.0)
    return out


def feasibility_rate(
    allocs: Sequence[PowerAllocation | None], instances: Sequence[NetworkInstance], cfg: SystemConfig, tol: float = 1e-9
) -> float:
    if len(allocs) != len(instances):
        raise InvalidInputError("allocations and instances differ in number")
    if not instances:
        raise InvalidInputError("empty dataset")
    ok = sum(a is not None and is_feasible(a, i, cfg, tol) for a, i in zip(allocs, instances))
    return 100.0 * ok / len(instances)


def machine_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()}"


def inference_time(
    run: Callable[[NetworkInstance], object],
    instances: Sequence[NetworkInstance],
    repetitions: int = 3,
    warmup: int = 10,
) -> float:
    """Seconds per subchannel: median over repetitions of the mean per-instance wall time, divided by N.

    ``run`` maps one instance to an allocation. The first ``warmup`` calls are
    not timed.
    """
    if not instances:
        raise InvalidInputError("empty dataset")
    if repetitions < 1:
        raise InvalidInputError("need at least one repetition")
    for k in range(warmup):
        run(instances[k % len(instances)])
    means = []
    for _ in range(repetitions):
        per = []
        for inst in instances:
            t0 = time.perf_counter()
            run(inst)
            per.append((time.perf_counter() - t0) / inst.n_subchannels)
        means.append(sum(per) / len(per))
    return statistics.median(means)


def model_runner(params: ParamSet, cfg: SystemConfig) -> Callable[[NetworkInstance], PowerAllocation]:
    return lambda inst: allocate([inst], params, cfg.p_max)[0]


def model_name(params: ParamSet) -> str:
    c = params.config
    if isinstance(c, MLPConfig):
        return "MLP"
    return f"GAT-{ {'plain': 'Plain', 'res': 'Res', 'dense': 'Dense'}[c.variant.value] }".replace(" ", "")


def evaluate_model(
    params: ParamSet,
    instances: Sequence[NetworkInstance],
    baseline_ees: Sequence[float],
    cfg: SystemConfig = SystemConfig(),
    dataset: str = "",
    model: str | None = None,
    train_size: tuple[int, int] = (10, 5),
    timing_samples: int = 0,
    timing_repetitions: int = 3,
    feasible_only: bool = False,
) -> EvalReport:
    """One row of the results table for a trained parameter set on one dataset.

    ``timing_samples`` > 0 also measures inference time on that many instances.
    """
    if not instances:
        raise InvalidInputError("empty dataset")
    first = instances[0]
    if not first.is_uniform():
        raise InvalidInputError("evaluation expects equal users per subchannel")
    n, k = first.n_subchannels, first.users_per_subchannel[0]
    name = model or model_name(params)
    tag = size_tag(train_size, (n, k))
    metric = "SC" if tag else "OP"
    try:
        allocs = allocate(instances, params, cfg.p_max)
    except NotApplicableError:
        return EvalReport(dataset, name, n, k, metric, math.nan, math.nan, math.nan, tag, len(instances), False)
    ees = achieved_ees(allocs, instances, cfg, feasible_only)
    perf = _ratio(ees, baseline_ees)
    fr = feasibility_rate(allocs, instances, cfg)
    t = math.nan
    if timing_samples > 0:
        t = inference_time(model_runner(params, cfg), list(instances[:timing_samples]), timing_repetitions)
    return EvalReport(dataset, name, n, k, metric, perf, fr, t, tag, len(instances), True)


def baseline_report(
    feasible: Sequence[bool],
    ees: Sequence[float],
    solve_times: Sequence[float],
    instances: Sequence[NetworkInstance],
    dataset: str = "",
    model: str = "CVX",
) -> EvalReport:
    """Row for the baseline itself: 100% by definition, its feasibility, and its mean solve time per subchannel."""
    if not instances or not (len(feasible) == len(ees) == len(solve_times) == len(instances)):
        raise InvalidInputError("baseline results and instances differ in number")
    n, k = instances[0].n_subchannels, instances[0].users_per_subchannel[0]
    t = float(np.mean([s / inst.n_subchannels for s, inst in zip(solve_times, instances)]))
    fr = 100.0 * sum(bool(f) for f in feasible) / len(feasible)
    return EvalReport(dataset, model, n, k, "OP", _ratio(ees, ees), fr, t, "", len(instances), True)


# ablation


@dataclass
class AblationCell:
    variant: str
    depth: int
    optimality: float
    feasibility_rate: float


def run_ablation(
    train_set: Sequence[NetworkInstance],
    val_set: Sequence[NetworkInstance],
    test_set: Sequence[NetworkInstance],
    baseline_ees: Sequence[float],
    base: TrainConfig = TrainConfig(),
    depths: Sequence[int] = (1, 2, 3, 4),
    variants: Sequence[str] = ("plain", "res", "dense"),
    cfg: SystemConfig = SystemConfig(),
    model_kw: dict | None = None,
    cache_dir: str | Path | None = None,
    progress: bool = False,
) -> list[AblationCell]:
    """Train one checkpoint per (variant, depth) and score it on ``test_set``.

    ``model_kw`` is passed to :meth:`ModelConfig.build`. With ``cache_dir`` set,
    existing checkpoints there are loaded instead of retrained.
    """
    cells = []
    for v in variants:
        for d in depths:
            mc = ModelConfig.build(v, depth=d, **(model_kw or {}))
            tc = replace(base, model=mc)
            path = Path(cache_dir) / f"ablation_{v}_L{d}.ckpt" if cache_dir is not None else None
            if path is not None and path.exists():
                ck = load_checkpoint(path, mc)
            else:
                ck, _ = train(train_set, val_set, tc, cfg)
                if path is not None:
                    save_checkpoint(ck, path)
            allocs = allocate(test_set, ck.params, cfg.p_max)
            cells.append(
                AblationCell(
                    v, d, optimality(achieved_ees(allocs, test_set, cfg), baseline_ees), feasibility_rate(allocs, test_set, cfg)
                )
            )
            if progress:
                print(f"{v} L={d}: {cells[-1].optimality:.2f}% FR {cells[-1].feasibility_rate:.1f}%", flush=True)
    return cells


def ablation_table(cells: Iterable[AblationCell], depths: Sequence[int], variants: Sequence[str]) -> str:
    by = {(c.variant, c.depth): c for c in cells}
    names = {"plain": "GAT-Plain", "res": "GAT-Res", "dense": "GAT-Dense"}
    head = ["Model"] + [f"L={d}" for d in depths]
    rows = [head]
    for v in variants:
        row = [names.get(v, v)]
        for d in depths:
            c = by.get((v, d))
            row.append(f"{c.optimality:.2f}%" if c is not None else "-")
        rows.append(row)
    return _align(rows)


# report files


def _fmt_float(x: float) -> str:
    return repr(float(x))


def emit_report(reports: Sequence[EvalReport], path: str | Path, fmt: str = "tsv") -> Path:
    """Write reports as tab-delimited records (``tsv``, lossless) or as an aligned text table (``table``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "tsv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in reports:
                w.writerow([_fmt_float(v) if isinstance(v, float) else v for v in (getattr(r, f) for f in REPORT_FIELDS)])
    elif fmt == "table":
        path.write_text(format_table(reports))
    else:
        raise InvalidInputError(f"unknown report format {fmt!r}")
    return path


def read_report(path: str | Path) -> list[EvalReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != REPORT_FIELDS:
        raise InvalidInputError(f"{path}: not a delimited evaluation report")
    return [EvalReport(**dict(zip(REPORT_FIELDS, row))) for row in rows[1:]]


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def format_table(reports: Sequence[EvalReport]) -> str:
    """One row per (N_Te, K_Te, model), grouped by test size."""
    rows = [["N_Te", "K_Te", "Model", "OP/SC", "FR", "Time/subch", "Samples"]]
    order = sorted(range(len(reports)), key=lambda i: (reports[i].n_test, reports[i].k_test, i))
    for i in order:
        r = reports[i]
        if r.applicable:
            perf = f"{r.performance:.2f}%{r.tag}"
            fr = f"{r.feasibility_rate:.1f}%"
        else:
            perf, fr = "x", "x"
        t = "-" if math.isnan(r.time_per_subchannel) else f"{r.time_per_subchannel * 1e3:.3f} ms"
        rows.append([str(r.n_test), str(r.k_test), r.model, perf, fr, t, str(r.n_samples)])
    return _align(rows)
