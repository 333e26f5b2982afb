"""Command-line entry point: ``nomanet <command> [flags]``.

Every command accepts ``--config FILE`` with ``key=value`` lines whose keys are
flag names (dashes or underscores); flags given on the command line win.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import (
    Status,
    brute_force_oracle,
    load_results,
    result_rows,
    save_results,
    sca_solve,
    solve_dataset,
    write_result_rows,
)
from .channels import DatasetFormatError, DatasetKind, DatasetSpec, generate_datasets, load_dataset, split_dataset, standard_specs
from .evaluation import (
    ablation_table,
    baseline_report,
    emit_report,
    evaluate_model,
    format_table,
    inference_time,
    machine_descriptor,
    model_runner,
    run_ablation,
)
from .mlp import MLPConfig
from .model import ModelConfig
from .system import InvalidInputError, SystemConfig
from .training import CheckpointError, TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("nomanet")


class UsageError(Exception):
    pass


def _env_seed() -> int:
    raw = os.environ.get("NOMANET_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NOMANET_SEED must be an integer, got {raw!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file of flag defaults")
    p.add_argument("--seed", type=int, default=None, help="random seed; falls back to $NOMANET_SEED, else 0")
    p.add_argument("--p-max", type=float, default=10.0, help="power budget P_max in W")
    p.add_argument("--p-c", type=float, default=1.0, help="circuit power P_C in W")
    p.add_argument("--r-req", type=float, default=0.1, help="minimum rate per user in bit/s/Hz")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for solver sweeps")
    p.add_argument("--out-dir", default="runs", help="directory for outputs without an explicit path")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _train_flags(p: argparse.ArgumentParser):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch", type=int, default=d.batch_size, help="batch size")
    p.add_argument("--lr", type=float, default=d.learning_rate, help="Adam learning rate")
    p.add_argument("--lam-qos", type=float, default=None, help="rate penalty weight (default 10, or 3 for the MLP)")
    p.add_argument("--lam-order", type=float, default=None, help="power-ordering penalty weight (default 10, or 3 for the MLP)")
    p.add_argument("--width", type=int, default=64, help="hidden feature width per layer")
    p.add_argument("--heads", type=int, default=4, help="attention heads per layer")
    p.add_argument("--readout-hidden", type=_int_list, default="64", help="readout MLP hidden widths")
    p.add_argument("--mlp-hidden", type=_int_list, default="128,64", help="hidden widths of the whole-network MLP")
    p.add_argument("--input-transform", choices=("log10", "raw"), default="log10", help="gain preprocessing")
    p.add_argument("--train-limit", type=int, default=None, help="use only the first N training samples")
    p.add_argument("--val-limit", type=int, default=None, help="use only the first N validation samples")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults except for unset optional values."""

    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    top = argparse.ArgumentParser(prog="nomanet", description="GNN power allocation for downlink NOMA", formatter_class=fmt)
    sub = top.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write channel datasets", formatter_class=fmt)
    _common(g)
    g.add_argument("--all", action="store_true", help="write all ten standard datasets")
    g.add_argument("--number", type=_int_list, default=None, help="standard dataset numbers, e.g. 1,3")
    g.add_argument("--n", type=int, default=None, help="subchannels")
    g.add_argument("--k", type=int, default=None, help="users per subchannel")
    g.add_argument("--size", type=int, default=None, help="samples")
    g.add_argument("--split", type=_int_list, default=None, help="train,val,test counts")
    g.add_argument("--name", default=None, help="file stem (default N<n>_K<k>)")
    g.add_argument("--snr-db", type=float, default=20.0, help="mean channel gain in dB")
    g.add_argument("--compress", action="store_true", help="gzip the files")
    g.add_argument("--out", default="data", help="output directory")

    t = sub.add_parser("train", help="train one model", formatter_class=fmt)
    _common(t)
    t.add_argument("--variant", choices=("plain", "res", "dense", "mlp"), default="res", help="model to train")
    t.add_argument("--data", required=True, help="dataset path, extension optional")
    t.add_argument("--depth", type=int, default=2, help="graph attention layers")
    _train_flags(t)
    t.add_argument("--binary", action="store_true", help="binary checkpoint payload")
    t.add_argument("--out", default=None, help="checkpoint path (default <out-dir>/<variant>.ckpt)")

    b = sub.add_parser("baseline", help="solve a dataset with a reference solver", formatter_class=fmt)
    _common(b)
    b.add_argument("--solver", choices=("sca", "oracle"), default="sca", help="SCA solver or exhaustive grid")
    b.add_argument("--data", required=True, help="dataset path, extension optional")
    b.add_argument("--split", choices=("eval", "train", "val", "test", "all"), default="eval",
                   help="samples to solve; eval is the test split, or everything for test-only sets")
    b.add_argument("--limit", type=int, default=None, help="solve only the first N samples")
    b.add_argument("--grid-step", type=float, default=None, help="oracle grid step (default P_max/2000)")
    b.add_argument("--out", default=None, help="results path (default <out-dir>/<dataset>.<solver>.tsv)")

    e = sub.add_parser("eval", help="score checkpoints against the baseline", formatter_class=fmt)
    _common(e)
    e.add_argument("--ckpt", nargs="+", required=True, help="checkpoints to score")
    e.add_argument("--data", nargs="+", required=True, help="datasets to score on (test split, or all of a test-only set)")
    e.add_argument("--limit", type=int, default=None, help="evaluate only the first N samples per dataset")
    e.add_argument("--baseline-dir", default=None, help="where SCA results are read or cached (default <out-dir>)")
    e.add_argument("--train-size", type=_int_list, default=None, help="N,K the checkpoints were trained on")
    e.add_argument("--timing-samples", type=int, default=20, help="samples timed per row, 0 to skip")
    e.add_argument("--timing-reps", type=int, default=3, help="timing repetitions")
    e.add_argument("--feasible-only", action="store_true", help="count infeasible outputs as zero EE")
    e.add_argument("--format", choices=("tsv", "table"), default="table", help="delimited records or aligned table")
    e.add_argument("--out", default=None, help="report path (default <out-dir>/report.<format>)")

    a = sub.add_parser("ablate", help="depth sweep over variants", formatter_class=fmt)
    _common(a)
    a.add_argument("--data", required=True, help="training dataset")
    a.add_argument("--depths", type=_int_list, default="1,2,3,4", help="comma-separated depths")
    a.add_argument("--variants", type=_str_list, default="plain,res,dense", help="comma-separated variants")
    _train_flags(a)
    a.add_argument("--limit", type=int, default=None, help="score on the first N test samples")
    a.add_argument("--baseline-dir", default=None, help="where SCA results are read or cached (default <out-dir>)")
    a.add_argument("--cache-dir", default=None, help="reuse or store the trained checkpoints here")
    a.add_argument("--out", default=None, help="table path (default <out-dir>/ablation.txt)")

    c = sub.add_parser("bench", help="time the model against the solver", formatter_class=fmt)
    _common(c)
    c.add_argument("--ckpt", required=True, help="checkpoint to time")
    c.add_argument("--data", required=True, help="dataset path, extension optional")
    c.add_argument("--samples", type=int, default=20, help="common samples for both methods")
    c.add_argument("--reps", type=int, default=3, help="model timing repetitions")
    c.add_argument("--out", default=None, help="result path (default <out-dir>/bench.tsv)")
    return top


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    if known.config and known.command in choices:
        _apply_config(choices[known.command], known.command, known.config)
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _env_seed()
    return args


def _apply_config(sub: argparse.ArgumentParser, command: str, path: str):
    """File values become parser defaults, so command-line flags still win."""
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for k, v in read_config_file(path).items():
        act = actions.get(k)
        if act is None or k in ("config", "help"):
            raise UsageError(f"{path}: unknown key {k!r} for {command}")
        if act.nargs in ("+", "*"):
            defaults[k] = v.split()
        elif act.const is True:  # store_true
            try:
                defaults[k] = _flag(v)
            except argparse.ArgumentTypeError as err:
                raise UsageError(f"{path}: {k}: {err}") from None
        else:
            try:
                defaults[k] = act.type(v) if act.type else v
            except (argparse.ArgumentTypeError, ValueError) as err:
                raise UsageError(f"{path}: bad value for {k}: {err}") from None
            if act.choices and defaults[k] not in act.choices:
                raise UsageError(f"{path}: {k} must be one of {list(act.choices)}")
        act.required = False
    sub.set_defaults(**defaults)


# helpers


def _sys_cfg(args) -> SystemConfig:
    return SystemConfig(p_max=args.p_max, p_circuit=args.p_c, r_req=args.r_req)


def _load(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def _stem(path: str | Path) -> str:
    name = Path(path).name
    for s in (".tsv.gz", ".tsv"):
        if name.endswith(s):
            return name[: -len(s)]
    return name


def _eval_samples(spec: DatasetSpec, insts, limit: int | None):
    parts = split_dataset(spec, insts)
    out = parts["test"]
    return out[:limit] if limit is not None else out


def _baseline_rows(data_path: str, insts, cfg: SystemConfig, cache_dir: Path, jobs: int) -> list[dict]:
    """SCA results for ``insts``, read from ``cache_dir`` when present and solved (then stored) otherwise."""
    path = cache_dir / f"{_stem(data_path)}.sca.tsv"
    rows = {}
    if path.exists():
        rows = {r["sample_id"]: r for r in load_results(path)}
    missing = [i for i in insts if i.sample_id not in rows]
    if missing:
        log.info("solving %d samples of %s with SCA", len(missing), data_path)
        res, _ = solve_dataset(sca_solve, missing, cfg, jobs=jobs)
        rows.update((r["sample_id"], r) for r in result_rows(res, missing, cfg))
        write_result_rows(path, sorted(rows.values(), key=lambda r: r["sample_id"]))
    return [rows[i.sample_id] for i in insts]


def _model_config(args, variant: str, depth: int, spec: DatasetSpec):
    if variant == "mlp":
        return MLPConfig(spec.n_subchannels, spec.k_per_subchannel, args.mlp_hidden, input_transform=args.input_transform)
    return ModelConfig.build(variant, depth=depth, width=args.width, heads=args.heads,
                             mlp_hidden_dims=args.readout_hidden, input_transform=args.input_transform)


def _train_config(args, model, data: str) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, lam_qos=args.lam_qos,
                       lam_order=args.lam_order, seed=args.seed, model=model, dataset=_stem(data))


def _train_val(args, spec: DatasetSpec, insts):
    if spec.kind is not DatasetKind.TRAIN_VAL_TEST:
        raise UsageError("training needs a dataset with a train/val/test split")
    parts = split_dataset(spec, insts)
    tr, va = parts["train"], parts["val"]
    if args.train_limit is not None:
        tr = tr[: args.train_limit]
    if args.val_limit is not None:
        va = va[: args.val_limit]
    return tr, va


# commands


def cmd_generate(args) -> int:
    if args.all or args.number:
        specs = standard_specs(args.seed, args.snr_db, None if args.all else args.number)
        if args.number and len(specs) != len(set(args.number)):
            raise UsageError(f"dataset numbers must be in 1..10, got {args.number}")
    else:
        if args.n is None or args.k is None or args.size is None:
            raise UsageError("give --all, --number, or all of --n --k --size")
        kind = DatasetKind.TRAIN_VAL_TEST if args.split else DatasetKind.TEST_ONLY
        specs = [DatasetSpec(args.n, args.k, args.size, kind, args.seed, args.snr_db, args.split, args.name or "")]
    for p in generate_datasets(specs, args.out, args.compress):
        print(p)
    return 0


def cmd_train(args) -> int:
    spec, insts = _load(args.data)
    tr, va = _train_val(args, spec, insts)
    cfg = _sys_cfg(args)
    tc = _train_config(args, _model_config(args, args.variant, args.depth, spec), args.data)
    out = Path(args.out or Path(args.out_dir) / f"{args.variant}.ckpt")
    try:
        ck, history = train(tr, va, tc, cfg, progress=args.verbose)
        code = 0
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        ck, history, code = e.checkpoint, e.history, 1
    ck.metrics = {"train_size": [spec.n_subchannels, spec.k_per_subchannel], "n_train": len(tr), "n_val": len(va)}
    save_checkpoint(ck, out, binary=args.binary)
    hist = out.with_name(out.name + ".history.json")
    hist.write_text(json.dumps(history, sort_keys=True) + "\n")
    print(f"{out}  best epoch {ck.epoch}  val loss {ck.best_val_loss:.6g}")
    return code


def cmd_baseline(args) -> int:
    spec, insts = _load(args.data)
    cfg = _sys_cfg(args)
    if args.split == "all":
        chosen = insts
    elif args.split == "eval":
        chosen = split_dataset(spec, insts)["test"]
    else:
        chosen = split_dataset(spec, insts)[args.split]
    if args.limit is not None:
        chosen = chosen[: args.limit]
    if not chosen:
        raise UsageError("no samples selected")
    if args.solver == "sca":
        solver = sca_solve
    else:
        step = args.grid_step if args.grid_step is not None else cfg.p_max / 2000
        if chosen[0].n_users > 4:
            raise UsageError("the grid oracle handles at most 4 users")
        solver = _OracleSolver(step)
    results, summary = solve_dataset(solver, chosen, cfg, jobs=args.jobs)
    out = Path(args.out or Path(args.out_dir) / f"{_stem(args.data)}.{args.solver}.tsv")
    save_results(out, results, chosen, cfg)
    n_max = sum(r.status is Status.MAX_ITER for r in results)
    print(f"{out}  samples {summary.n_samples}  FR {summary.feasibility_rate:.2f}%  mean EE {summary.mean_ee:.6g}"
          f"  max-iter {n_max}  time {summary.total_time:.1f}s")
    return 0


class _OracleSolver:
    """Picklable grid-oracle callable for worker processes."""

    def __init__(self, step: float):
        self.step = step

    def __call__(self, inst, cfg):
        return brute_force_oracle(inst, cfg, self.step)


def _checkpoint(path: str):
    if not Path(path).is_file():
        raise UsageError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    cfg = _sys_cfg(args)
    cache = Path(args.baseline_dir or args.out_dir)
    cks = [(p, _checkpoint(p)) for p in args.ckpt]
    reports = []
    for data in args.data:
        spec, insts = _load(data)
        chosen = _eval_samples(spec, insts, args.limit)
        rows = _baseline_rows(data, chosen, cfg, cache, args.jobs)
        # pair only samples the baseline solved; the report counts them in n_samples
        keep = [i for i, r in enumerate(rows) if r["feasible"]]
        if len(keep) < len(rows):
            log.warning("%s: baseline infeasible on %d samples, excluded", data, len(rows) - len(keep))
        paired = [chosen[i] for i in keep]
        base = [rows[i]["ee"] for i in keep]
        name = _stem(data)
        reports.append(baseline_report([r["feasible"] for r in rows], [r["ee"] for r in rows],
                                       [r["time"] for r in rows], chosen, name))
        for path, ck in cks:
            size = tuple(args.train_size or ck.metrics.get("train_size", (10, 5)))
            reports.append(evaluate_model(ck.params, paired, base, cfg, name, None, size, args.timing_samples,
                                          args.timing_reps, args.feasible_only))
    out = Path(args.out or Path(args.out_dir) / f"report.{args.format}")
    emit_report(reports, out, args.format)
    print(format_table(reports), end="")
    print(f"{out}  ({machine_descriptor()})")
    return 0


def cmd_ablate(args) -> int:
    bad = [v for v in args.variants if v not in ("plain", "res", "dense")]
    if bad or not args.depths or min(args.depths) < 1:
        raise UsageError(f"variants must be plain/res/dense and depths >= 1, got {args.variants} {args.depths}")
    spec, insts = _load(args.data)
    tr, va = _train_val(args, spec, insts)
    cfg = _sys_cfg(args)
    test = _eval_samples(spec, insts, args.limit)
    rows = _baseline_rows(args.data, test, cfg, Path(args.baseline_dir or args.out_dir), args.jobs)
    keep = [i for i, r in enumerate(rows) if r["feasible"]]
    base_tc = _train_config(args, ModelConfig(), args.data)
    kw = dict(width=args.width, heads=args.heads, mlp_hidden_dims=args.readout_hidden, input_transform=args.input_transform)
    cells = run_ablation(tr, va, [test[i] for i in keep], [rows[i]["ee"] for i in keep], base_tc, args.depths,
                         args.variants, cfg, kw, args.cache_dir, args.verbose)
    table = ablation_table(cells, args.depths, args.variants)
    out = Path(args.out or Path(args.out_dir) / "ablation.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    print(table, end="")
    print(out)
    return 0


def cmd_bench(args) -> int:
    cfg = _sys_cfg(args)
    ck = _checkpoint(args.ckpt)
    spec, insts = _load(args.data)
    chosen = _eval_samples(spec, insts, args.samples)
    gnn = inference_time(model_runner(ck.params, cfg), chosen, args.reps)
    res, _ = solve_dataset(sca_solve, chosen, cfg)  # serial, so solve times are not contended
    sca = float(np.mean([r.wall_time / i.n_subchannels for r, i in zip(res, chosen)]))
    speedup = sca / gnn if gnn > 0 else math.inf
    out = Path(args.out or Path(args.out_dir) / "bench.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("samples\tgnn_time_per_subchannel\tsca_time_per_subchannel\tspeedup\tmachine\n"
                   f"{len(chosen)}\t{gnn!r}\t{sca!r}\t{speedup!r}\t{machine_descriptor()}\n")
    print(f"model {gnn * 1e3:.3f} ms/subchannel  SCA {sca * 1e3:.1f} ms/subchannel  speedup {speedup:.0f}x")
    print(out)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "baseline": cmd_baseline, "eval": cmd_eval,
            "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other runtime failure maps to exit 1
        log.exception("unexpected failure")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
