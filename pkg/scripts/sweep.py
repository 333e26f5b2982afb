"""Train GAT-Res/Dense/Plain and the MLP on (10,5), then score them on all nine test sizes.

    python scripts/sweep.py                       # desk scale
    python scripts/sweep.py n_train=8000 epochs=50 n_test=1000   # full scale

Writes <out_dir>/sweep.tsv (delimited) and <out_dir>/sweep.txt (aligned).
Checkpoints and SCA results are cached in <out_dir> and reused on later runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from common import parse_overrides, sca_baseline

from nomanet.channels import generate_instances, split_dataset, standard_specs
from nomanet.evaluation import baseline_report, emit_report, evaluate_model, format_table, machine_descriptor
from nomanet.mlp import MLPConfig
from nomanet.model import ModelConfig
from nomanet.system import SystemConfig
from nomanet.training import TrainConfig, load_checkpoint, save_checkpoint, train


@dataclass
class Config:
    seed: int = 7
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 300  # samples per test set
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 1e-4
    variants: tuple[str, ...] = ("res", "dense", "plain", "mlp")
    datasets: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    timing_samples: int = 20
    jobs: int = 1
    out_dir: str = "runs/sweep"


def model_config(variant: str):
    return MLPConfig(10, 5) if variant == "mlp" else ModelConfig.build(variant)


def main(c: Config):
    out = Path(c.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SystemConfig()
    specs = {int(s.name[2:]): s for s in standard_specs(c.seed)}
    parts = split_dataset(specs[1], generate_instances(specs[1]))
    tr, va = parts["train"][: c.n_train], parts["val"][: c.n_val]

    models = {}
    for v in c.variants:
        tc = TrainConfig(c.learning_rate, c.batch_size, c.epochs, seed=c.seed, model=model_config(v), dataset="ds1")
        path = out / f"{v}.ckpt"
        ck = load_checkpoint(path) if path.exists() else None
        if ck is None or ck.train_config != tc:
            print(f"training {v}", flush=True)
            ck, _ = train(tr, va, tc, cfg, progress=True)
            save_checkpoint(ck, path)
        models[v] = ck

    reports = []
    for no in c.datasets:
        insts = parts["test"] if no == 1 else generate_instances(specs[no])
        insts = insts[: c.n_test]
        rows = sca_baseline(f"ds{no}", insts, cfg, out, c.jobs)
        keep = [i for i, r in enumerate(rows) if r["feasible"]]
        paired, base = [insts[i] for i in keep], [rows[i]["ee"] for i in keep]
        reports.append(baseline_report([r["feasible"] for r in rows], [r["ee"] for r in rows], [r["time"] for r in rows],
                                       insts, f"ds{no}"))
        for v, ck in models.items():
            reports.append(evaluate_model(ck.params, paired, base, cfg, f"ds{no}", train_size=(10, 5),
                                          timing_samples=c.timing_samples))
        print(format_table(reports[-len(models) - 1 :]), end="", flush=True)

    emit_report(reports, out / "sweep.tsv")
    emit_report(reports, out / "sweep.txt", fmt="table")
    print(format_table(reports), end="")
    print(f"machine: {machine_descriptor()}")


if __name__ == "__main__":
    main(parse_overrides(Config()))
