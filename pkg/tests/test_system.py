import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nomanet.model import power_activation
from nomanet.system import (
    InvalidInputError,
    NetworkInstance,
    PowerAllocation,
    SystemConfig,
    check_feasibility,
    energy_efficiency,
    rates,
    sic_sort,
    sinr,
)

gain = st.floats(min_value=1e-3, max_value=1e4, allow_nan=False)
power = st.floats(min_value=0.0, max_value=10.0, allow_nan=False)


@st.composite
def subchannel(draw, max_k=6):
    k = draw(st.integers(1, max_k))
    g = sorted(draw(st.lists(gain, min_size=k, max_size=k)), reverse=True)
    p = draw(st.lists(power, min_size=k, max_size=k))
    return np.array(p), np.array(g)


@st.composite
def network(draw, max_n=4, max_k=5):
    n = draw(st.integers(1, max_n))
    subs = [draw(subchannel(max_k)) for _ in range(n)]
    inst = NetworkInstance(tuple(g for _, g in subs))
    alloc = PowerAllocation(tuple(p for p, _ in subs))
    return alloc, inst


@pytest.mark.parametrize(
    "gains, expected, perm",
    [([1, 3, 2], [3, 2, 1], [2, 0, 1]), ([5], [5], [0]), ([2, 2], [2, 2], [0, 1])],
)
def test_sic_sort(gains, expected, perm):
    g, p = sic_sort(gains)
    assert g.tolist() == expected
    assert p.tolist() == perm


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [1.0, math.inf], [0.0, 1.0], [-1.0]])
def test_sic_sort_rejects(bad):
    with pytest.raises(InvalidInputError):
        sic_sort(bad)


@given(st.lists(gain, min_size=1, max_size=12))
def test_sic_sort_permutation_maps_to_sorted_position(gains):
    g, perm = sic_sort(gains)
    assert np.all(np.diff(g) <= 0)
    assert np.array_equal(g[perm], np.asarray(gains))


def test_sinr_examples():
    assert sinr([1], [4], 1) == 4
    assert sinr([1, 2], [4, 1], 2) == pytest.approx(1.0)
    assert sinr([0, 0, 5], [9, 4, 1], 3) == 5


def test_sinr_errors():
    with pytest.raises(InvalidInputError):
        sinr([1, 2], [4, 1], 3)
    with pytest.raises(InvalidInputError):
        sinr([1, 2], [4], 1)


def test_rates_examples():
    assert rates([1], [1]).tolist() == [1.0]
    assert rates([0, 0], [3, 2]).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(rates([1, 2], [4, 1]), [math.log2(5), 1.0], rtol=1e-15)


def test_rates_accurate_for_tiny_sinr():
    # log2(1+x) ~ x/ln2 for small x; a naive log(1+x) loses all digits here
    r = rates([1e-14], [1.0])[0]
    assert r == pytest.approx(1e-14 / math.log(2), rel=1e-12)


def test_energy_efficiency_examples():
    inst = NetworkInstance.from_matrix([[1.0]])
    assert energy_efficiency(PowerAllocation(([1.0],)), inst, SystemConfig(p_circuit=1)) == 0.5
    assert energy_efficiency(PowerAllocation(([1.0],)), inst, SystemConfig(p_circuit=3)) == 0.25
    inst3 = NetworkInstance.from_matrix([[5.0, 3.0, 1.0]])
    assert energy_efficiency(PowerAllocation(([0.0, 0.0, 0.0],)), inst3, SystemConfig()) == 0.0


def test_shape_mismatch():
    inst = NetworkInstance.from_matrix([[2.0, 1.0]])
    with pytest.raises(InvalidInputError):
        energy_efficiency(PowerAllocation(([1.0],)), inst, SystemConfig())


def test_feasibility_examples():
    cfg = SystemConfig(p_max=10, r_req=0.1)
    inst = NetworkInstance.from_matrix([[1.0]])
    assert check_feasibility(PowerAllocation(([1.0],)), inst, cfg).feasible

    inst2 = NetworkInstance.from_matrix([[100.0, 50.0]])
    rep = check_feasibility(PowerAllocation(([2.0, 1.0],)), inst2, cfg)
    assert not rep.ordering_ok[0] and not rep.feasible

    rep = check_feasibility(PowerAllocation(([5.0, 5.0],)), inst2, cfg)
    assert rep.budget_ok
    rep = check_feasibility(PowerAllocation(([5.0, 5.0 + 1e-6],)), inst2, cfg)
    assert not rep.budget_ok


def test_feasibility_report_consistency():
    cfg = SystemConfig(r_req=1.0)
    inst = NetworkInstance.from_matrix([[10.0, 1.0], [4.0, 2.0]])
    rep = check_feasibility(PowerAllocation(([0.1, 0.2], [1.0, 2.0])), inst, cfg)
    assert rep.feasible == (all(q.all() for q in rep.qos_ok) and rep.ordering_ok.all() and rep.budget_ok)
    assert rep.worst_qos_slack < 0 and not rep.feasible


def test_instance_invariants():
    with pytest.raises(InvalidInputError):
        NetworkInstance.from_matrix([[1.0, 2.0]])
    with pytest.raises(InvalidInputError):
        NetworkInstance.from_matrix([[1.0, 0.0]])
    with pytest.raises(InvalidInputError):
        NetworkInstance(())
    with pytest.raises(InvalidInputError):
        SystemConfig(p_max=0)


@given(subchannel(), st.data())
def test_sinr_monotonicity(sub, data):
    p, g = sub
    i = data.draw(st.integers(1, len(p)))
    base = sinr(p, g, i)
    up = p.copy()
    up[i - 1] += 0.5
    assert sinr(up, g, i) >= base
    if i > 1:
        j = data.draw(st.integers(1, i - 1))
        more = p.copy()
        more[j - 1] += 0.5
        assert sinr(more, g, i) <= base


@given(network())
def test_ee_reconstruction_identity(pair):
    alloc, inst = pair
    cfg = SystemConfig()
    total_rate = sum(r.sum() for r in (rates(p, g) for p, g in zip(alloc.powers, inst.subchannels)))
    ee = energy_efficiency(alloc, inst, cfg)
    assert ee * (alloc.total() + cfg.p_circuit) == pytest.approx(total_rate, rel=1e-12, abs=1e-300)


@given(network(), gain)
def test_zero_power_user_leaves_sums_unchanged(pair, extra_gain):
    alloc, inst = pair
    # a new user appended last with the weakest gain and zero power
    g0 = inst.subchannels[0]
    new_gain = min(extra_gain, g0[-1])
    inst2 = NetworkInstance((np.append(g0, new_gain),) + inst.subchannels[1:])
    alloc2 = PowerAllocation((np.append(alloc.powers[0], 0.0),) + alloc.powers[1:])
    r1 = sum(r.sum() for r in (rates(p, g) for p, g in zip(alloc.powers, inst.subchannels)))
    r2 = sum(r.sum() for r in (rates(p, g) for p, g in zip(alloc2.powers, inst2.subchannels)))
    assert r1 == r2
    assert alloc.total() == alloc2.total()


@settings(max_examples=200)
@given(network(), st.lists(st.floats(-50, 50), min_size=30, max_size=30))
def test_activation_output_always_within_budget(pair, raw_pool):
    _, inst = pair
    cfg = SystemConfig()
    raw = [np.array(raw_pool[: g.size]) * 10 for g in inst.subchannels]
    alloc = power_activation(raw, cfg.p_max)
    assert check_feasibility(alloc, inst, cfg, tol=0.0).budget_ok
