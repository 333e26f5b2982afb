"""Depth sweep: optimality of GAT-Plain/Res/Dense at depths 1 to 4 on dataset No. 1.

    python scripts/ablation.py
    python scripts/ablation.py depths=1,2 variants=res,dense epochs=10

Writes <out_dir>/ablation.txt. Checkpoints are cached in <out_dir>.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from common import parse_overrides, sca_baseline

from nomanet.channels import generate_instances, split_dataset, standard_specs
from nomanet.evaluation import ablation_table, run_ablation
from nomanet.system import SystemConfig
from nomanet.training import TrainConfig


@dataclass
class Config:
    seed: int = 7
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 300
    epochs: int = 25
    learning_rate: float = 1e-4
    depths: tuple[int, ...] = (1, 2, 3, 4)
    variants: tuple[str, ...] = ("plain", "res", "dense")
    jobs: int = 1
    out_dir: str = "runs/ablation"


def main(c: Config):
    out = Path(c.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SystemConfig()
    spec = standard_specs(c.seed, numbers=[1])[0]
    parts = split_dataset(spec, generate_instances(spec))
    tr, va, te = parts["train"][: c.n_train], parts["val"][: c.n_val], parts["test"][: c.n_test]
    rows = sca_baseline("ds1", te, cfg, out, c.jobs)
    keep = [i for i, r in enumerate(rows) if r["feasible"]]
    base = TrainConfig(learning_rate=c.learning_rate, epochs=c.epochs, seed=c.seed)
    cells = run_ablation(tr, va, [te[i] for i in keep], [rows[i]["ee"] for i in keep], base, c.depths, c.variants, cfg,
                         cache_dir=out, progress=True)
    table = ablation_table(cells, c.depths, c.variants)
    (out / "ablation.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main(parse_overrides(Config()))
