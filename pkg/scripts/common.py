"""Helpers shared by the experiment scripts: config overrides and cached SCA sweeps."""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import get_type_hints

from nomanet.baselines import load_results, result_rows, sca_solve, solve_dataset, write_result_rows


def _convert(text: str, typ):
    origin = getattr(typ, "__origin__", None)
    if typ is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if origin is tuple or typ is tuple:
        inner = typ.__args__[0] if getattr(typ, "__args__", None) else str
        return tuple(_convert(x, inner) for x in text.split(",") if x)
    return typ(text)


def parse_overrides(config, argv: list[str] | None = None):
    """Return ``config`` with ``key=value`` arguments applied, e.g. ``epochs=10 depths=1,2``."""
    argv = sys.argv[1:] if argv is None else argv
    hints = get_type_hints(type(config))
    changes = {}
    for arg in argv:
        if arg in ("-h", "--help"):
            print(f"usage: {Path(sys.argv[0]).name} [key=value ...]\n")
            for f in dataclasses.fields(config):
                print(f"  {f.name}={getattr(config, f.name)!r}")
            sys.exit(0)
        key, sep, value = arg.partition("=")
        if not sep or key not in hints:
            sys.exit(f"unknown override {arg!r}; keys: {', '.join(hints)}")
        changes[key] = _convert(value, hints[key])
    return dataclasses.replace(config, **changes)


def sca_baseline(name: str, instances, cfg, cache_dir: Path, jobs: int = 1) -> list[dict]:
    """SCA result rows for ``instances``, solved once and cached as ``<cache_dir>/<name>.sca.tsv``."""
    path = cache_dir / f"{name}.sca.tsv"
    rows = {r["sample_id"]: r for r in load_results(path)} if path.exists() else {}
    missing = [i for i in instances if i.sample_id not in rows]
    if missing:
        print(f"solving {len(missing)} samples of {name} with SCA", flush=True)
        res, _ = solve_dataset(sca_solve, missing, cfg, jobs=jobs)
        rows.update((r["sample_id"], r) for r in result_rows(res, missing, cfg))
        write_result_rows(path, sorted(rows.values(), key=lambda r: r["sample_id"]))
    return [rows[i.sample_id] for i in instances]
