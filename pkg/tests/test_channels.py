import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nomanet.channels import (
    DEFAULT_SPLIT,
    DatasetFormatError,
    DatasetKind,
    DatasetSpec,
    generate_datasets,
    generate_instances,
    load_dataset,
    sample_instance,
    sample_rng,
    save_dataset,
    split_dataset,
    standard_specs,
)
from nomanet.system import InvalidInputError


def small_spec(**kw):
    base = dict(n_subchannels=3, k_per_subchannel=2, size=5, seed=11)
    base.update(kw)
    return DatasetSpec(**base)


def test_mean_gain_matches_snr():
    rng = np.random.default_rng(0)
    inst = sample_instance(rng, 1000, 100, snr_db=20.0)
    assert inst.gain_matrix().mean() == pytest.approx(100.0, rel=0.02)


def test_gains_follow_unit_exponential():
    # KS distance of H / 10**(snr/10) against Exp(1) before sorting
    inst = sample_instance(np.random.default_rng(1), 1, 100_000, snr_db=20.0)
    x = np.sort(inst.subchannels[0] / 100.0)
    n = x.size
    cdf = -np.expm1(-x)
    d = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    assert d < 0.01


def test_single_gain_and_determinism():
    a = sample_instance(sample_rng(5, 3), 1, 1)
    assert a.n_users == 1 and a.subchannels[0][0] > 0
    assert sample_instance(sample_rng(5, 3), 4, 3) == sample_instance(sample_rng(5, 3), 4, 3)


def test_samples_are_sorted_and_schedule_independent():
    spec = small_spec(size=20)
    insts = generate_instances(spec)
    for inst in insts:
        for g in inst.subchannels:
            assert np.all(np.diff(g) <= 0)
    # sample i depends only on (seed, i)
    assert generate_instances(small_spec(size=3))[2] == insts[2]


def test_standard_dataset_rows():
    specs = standard_specs(seed=7)
    assert len(specs) == 10
    assert (specs[0].n_subchannels, specs[0].k_per_subchannel, specs[0].size) == (10, 5, 10_000)
    assert specs[0].split == DEFAULT_SPLIT == (8000, 1000, 1000)
    row5 = specs[4]
    assert (row5.n_subchannels, row5.k_per_subchannel, row5.size, row5.kind) == (8, 4, 1000, DatasetKind.TEST_ONLY)
    assert {(s.n_subchannels, s.k_per_subchannel) for s in specs[1:]} == {(n, k) for n in (8, 10, 12) for k in (4, 5, 6)}
    assert len({s.seed for s in specs}) == 10


@pytest.mark.parametrize("kw", [dict(size=0), dict(n_subchannels=0), dict(k_per_subchannel=0), dict(seed=-1),
                                dict(kind=DatasetKind.TRAIN_VAL_TEST), dict(split=(1, 1, 1))])
def test_invalid_specs(kw):
    with pytest.raises(InvalidInputError):
        small_spec(**kw)


@pytest.mark.parametrize("suffix", [".tsv", ".tsv.gz"])
def test_round_trip_bit_exact(tmp_path, suffix):
    spec = small_spec(kind=DatasetKind.TRAIN_VAL_TEST, split=(3, 1, 1), name="t")
    insts = generate_instances(spec)
    path = save_dataset(tmp_path / ("t" + suffix), spec, insts)
    spec2, insts2 = load_dataset(path)
    assert spec2 == spec
    assert insts2 == insts
    for a, b in zip(insts, insts2):
        for ga, gb in zip(a.subchannels, b.subchannels):
            assert ga.tobytes() == gb.tobytes()


def test_file_layout(tmp_path):
    spec = small_spec(size=2)
    path = save_dataset(tmp_path / "x.tsv", spec, generate_instances(spec))
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["version"] == 1 and header["N"] == 3 and header["K"] == 2 and header["split"] is None
    fields = lines[1].split("\t")
    assert fields[0] == "0" and len(fields) == 1 + 6


def test_files_are_byte_identical(tmp_path):
    specs = [small_spec(name="a"), small_spec(name="b", seed=12)]
    p1 = generate_datasets(specs, tmp_path / "one", compress=True)
    p2 = generate_datasets(specs, tmp_path / "two", compress=True)
    for a, b in zip(p1, p2):
        assert a.read_bytes() == b.read_bytes()
    assert gzip.decompress(p1[0].read_bytes()).startswith(b"{")


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(InvalidInputError):
        generate_datasets([small_spec(name="a"), small_spec(name="a")], tmp_path)


def test_load_without_extension(tmp_path):
    spec = small_spec()
    save_dataset(tmp_path / "ds.tsv", spec, generate_instances(spec))
    assert load_dataset(tmp_path / "ds")[0] == spec


def test_truncated_file_names_line(tmp_path):
    spec = small_spec(size=3)
    path = save_dataset(tmp_path / "t.tsv", spec, generate_instances(spec))
    text = path.read_text()
    path.write_text(text[: len(text) - 10])
    with pytest.raises(DatasetFormatError, match=":4:"):
        load_dataset(path)


def test_count_mismatch(tmp_path):
    spec = small_spec(size=3)
    path = save_dataset(tmp_path / "t.tsv", spec, generate_instances(spec))
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-1]))
    with pytest.raises(DatasetFormatError, match="declares 3"):
        load_dataset(path)


def test_bad_record_and_version(tmp_path):
    spec = small_spec(size=2)
    path = save_dataset(tmp_path / "t.tsv", spec, generate_instances(spec))
    lines = path.read_text().splitlines(keepends=True)
    bad = lines[:2] + ["1\t" + "\t".join(["1.0", "2.0"] * 3) + "\n"]  # unsorted gains
    path.write_text("".join(bad))
    with pytest.raises(DatasetFormatError, match=":3:"):
        load_dataset(path)
    header = json.loads(lines[0])
    header["version"] = 99
    path.write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_split():
    spec = small_spec(size=5, kind=DatasetKind.TRAIN_VAL_TEST, split=(3, 1, 1))
    parts = split_dataset(spec, generate_instances(spec))
    assert [len(parts[k]) for k in ("train", "val", "test")] == [3, 1, 1]
    assert parts["test"][0].sample_id == 4
    only = small_spec(size=2)
    assert len(split_dataset(only, generate_instances(only))["test"]) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**64 - 1),
       st.floats(-10, 40, allow_nan=False))
def test_round_trip_property(tmp_path_factory, n, k, size, seed, snr):
    spec = DatasetSpec(n, k, size, seed=seed, snr_db=snr)
    insts = generate_instances(spec)
    path = save_dataset(tmp_path_factory.mktemp("rt") / "d.tsv", spec, insts)
    spec2, insts2 = load_dataset(path)
    assert spec2 == spec and insts2 == insts
