"""Rayleigh-fading instance generation and the line-delimited dataset format.

File layout: the first line is a JSON header; every following line is one sample,
``sample_id`` then N*K gains (subchannel-major), all tab-separated. Gains are
written with 17 significant digits so that loading reproduces them bit-exactly.
A ``.gz`` suffix turns on gzip compression.
"""

from __future__ import annotations

import enum
import gzip
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .system import InvalidInputError, NetworkInstance

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed, truncated or inconsistent dataset file."""


class DatasetKind(str, enum.Enum):
    TRAIN_VAL_TEST = "TrainValTest"
    TEST_ONLY = "TestOnly"


@dataclass(frozen=True)
class DatasetSpec:
    n_subchannels: int
    k_per_subchannel: int
    size: int
    kind: DatasetKind = DatasetKind.TEST_ONLY
    seed: int = 0
    snr_db: float = 20.0
    split: tuple[int, int, int] | None = None
    name: str = ""

    def __post_init__(self):
        if self.size < 1:
            raise InvalidInputError(f"dataset size must be >= 1, got {self.size}")
        if self.n_subchannels < 1 or self.k_per_subchannel < 1:
            raise InvalidInputError("N and K must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        if self.kind is DatasetKind.TRAIN_VAL_TEST:
            if self.split is None:
                raise InvalidInputError("a TrainValTest dataset needs a split")
        if self.split is not None:
            split = tuple(int(s) for s in self.split)
            if len(split) != 3 or min(split) < 0 or sum(split) != self.size:
                raise InvalidInputError(f"split {self.split} must be 3 counts summing to {self.size}")
            object.__setattr__(self, "split", split)

    def header(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "name": self.name,
            "N": self.n_subchannels,
            "K": self.k_per_subchannel,
            "size": self.size,
            "kind": self.kind.value,
            "seed": self.seed,
            "snr_db": self.snr_db,
            "split": list(self.split) if self.split is not None else None,
        }

    @classmethod
    def from_header(cls, h: dict) -> "DatasetSpec":
        return cls(
            n_subchannels=int(h["N"]),
            k_per_subchannel=int(h["K"]),
            size=int(h["size"]),
            kind=DatasetKind(h["kind"]),
            seed=int(h["seed"]),
            snr_db=float(h["snr_db"]),
            split=tuple(h["split"]) if h.get("split") is not None else None,
            name=h.get("name", ""),
        )


# (number, N, K, size, kind) rows of the dataset table.
STANDARD_DATASETS = [
    (1, 10, 5, 10_000, DatasetKind.TRAIN_VAL_TEST),
    (2, 10, 4, 1_000, DatasetKind.TEST_ONLY),
    (3, 10, 5, 1_000, DatasetKind.TEST_ONLY),
    (4, 10, 6, 1_000, DatasetKind.TEST_ONLY),
    (5, 8, 4, 1_000, DatasetKind.TEST_ONLY),
    (6, 8, 5, 1_000, DatasetKind.TEST_ONLY),
    (7, 8, 6, 1_000, DatasetKind.TEST_ONLY),
    (8, 12, 4, 1_000, DatasetKind.TEST_ONLY),
    (9, 12, 5, 1_000, DatasetKind.TEST_ONLY),
    (10, 12, 6, 1_000, DatasetKind.TEST_ONLY),
]
DEFAULT_SPLIT = (8_000, 1_000, 1_000)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Stable 64-bit seed derived from a base seed and integer keys."""
    ss = np.random.SeedSequence([int(base_seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def standard_specs(seed: int = 0, snr_db: float = 20.0, numbers: Iterable[int] | None = None) -> list[DatasetSpec]:
    wanted = set(numbers) if numbers is not None else None
    specs = []
    for no, n, k, size, kind in STANDARD_DATASETS:
        if wanted is not None and no not in wanted:
            continue
        specs.append(
            DatasetSpec(
                n_subchannels=n,
                k_per_subchannel=k,
                size=size,
                kind=kind,
                seed=derive_seed(seed, no),
                snr_db=snr_db,
                split=DEFAULT_SPLIT if kind is DatasetKind.TRAIN_VAL_TEST else None,
                name=f"ds{no}",
            )
        )
    return specs


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(sample_id)]))


def sample_instance(rng: np.random.Generator, n: int, k: int, snr_db: float = 20.0, sample_id: int = 0) -> NetworkInstance:
    """Draw N subchannels of K Rayleigh gains each, scaled to the mean SNR and SIC-sorted."""
    if n < 1 or k < 1:
        raise InvalidInputError("N and K must be >= 1")
    gains = 10.0 ** (snr_db / 10.0) * rng.standard_exponential((n, k))
    gains = -np.sort(-gains, axis=1, kind="stable")
    return NetworkInstance.from_matrix(gains, sample_id=sample_id, snr_db=snr_db)


def generate_instances(spec: DatasetSpec) -> list[NetworkInstance]:
    return [
        sample_instance(sample_rng(spec.seed, i), spec.n_subchannels, spec.k_per_subchannel, spec.snr_db, sample_id=i)
        for i in range(spec.size)
    ]


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_dataset(path: str | os.PathLike, spec: DatasetSpec, instances: Sequence[NetworkInstance]) -> Path:
    path = Path(path)
    if len(instances) != spec.size:
        raise DatasetFormatError(f"{len(instances)} instances for a spec of size {spec.size}")
    lines = [json.dumps(spec.header(), sort_keys=True)]
    for inst in instances:
        if inst.users_per_subchannel != (spec.k_per_subchannel,) * spec.n_subchannels:
            raise DatasetFormatError(
                f"sample {inst.sample_id} does not match N={spec.n_subchannels}, K={spec.k_per_subchannel}"
            )
        lines.append("\t".join([str(inst.sample_id)] + [_fmt(g) for sub in inst.subchannels for g in sub]))
    data = ("\n".join(lines) + "\n").encode("utf-8")
    if path.suffix == ".gz":
        # mtime=0 keeps compressed output byte-identical across runs
        data = gzip.compress(data, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def resolve_dataset_path(path: str | os.PathLike) -> Path:
    """Accept a path with or without its ``.tsv``/``.tsv.gz`` extension."""
    p = Path(path)
    if p.is_file():
        return p
    for suffix in (".tsv", ".tsv.gz"):
        q = p.with_name(p.name + suffix)
        if q.is_file():
            return q
    raise FileNotFoundError(f"no dataset at {p}")


def load_dataset(path: str | os.PathLike) -> tuple[DatasetSpec, list[NetworkInstance]]:
    path = resolve_dataset_path(path)
    with _open(path, "r") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}:1: malformed header: {e}") from None
        if header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}:1: unsupported format version {header.get('version')!r}")
        try:
            spec = DatasetSpec.from_header(header)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}:1: invalid header: {e}") from None
        n, k = spec.n_subchannels, spec.k_per_subchannel
        instances = []
        for lineno, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise DatasetFormatError(f"{path}:{lineno}: truncated record")
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 1 + n * k:
                raise DatasetFormatError(f"{path}:{lineno}: expected {1 + n * k} fields, got {len(fields)}")
            try:
                sid = int(fields[0])
                gains = np.array([float(x) for x in fields[1:]]).reshape(n, k)
                instances.append(NetworkInstance.from_matrix(gains, sample_id=sid, snr_db=spec.snr_db))
            except (ValueError, InvalidInputError) as e:
                raise DatasetFormatError(f"{path}:{lineno}: bad record: {e}") from None
    if len(instances) != spec.size:
        raise DatasetFormatError(f"{path}: header declares {spec.size} records, found {len(instances)}")
    return spec, instances


def split_dataset(spec: DatasetSpec, instances: Sequence[NetworkInstance]) -> dict[str, list[NetworkInstance]]:
    """Train/val/test partitions; a test-only dataset is all test."""
    if spec.split is None:
        return {"train": [], "val": [], "test": list(instances)}
    a, b, _ = spec.split
    return {"train": list(instances[:a]), "val": list(instances[a : a + b]), "test": list(instances[a + b :])}


def generate_datasets(specs: Sequence[DatasetSpec], out_dir: str | os.PathLike, compress: bool = False) -> list[Path]:
    names = [s.name or f"N{s.n_subchannels}_K{s.k_per_subchannel}" for s in specs]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"duplicate dataset names: {names}")
    out = Path(out_dir)
    suffix = ".tsv.gz" if compress else ".tsv"
    return [save_dataset(out / (name + suffix), spec, generate_instances(spec)) for name, spec in zip(names, specs)]
