"""Downlink NOMA system math: SIC ordering, SINR, rates, energy efficiency, feasibility.

Gains are normalized channel gains ``H = |h|^2 / sigma^2``. Within a subchannel the
users are indexed strongest first (non-increasing gain), and the power allocation
must be non-decreasing in that index so that each user can cancel the signals of
the weaker, higher-power users.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LN2 = math.log(2.0)
DEFAULT_TOL = 1e-9


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


@dataclass(frozen=True)
class SystemConfig:
    p_max: float = 10.0
    p_circuit: float = 1.0
    r_req: float = 0.1

    def __post_init__(self):
        for name in ("p_max", "p_circuit"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be positive and finite, got {v}")
        # a zero rate requirement is allowed (unconstrained-QoS studies)
        if not (math.isfinite(self.r_req) and self.r_req >= 0):
            raise InvalidInputError(f"r_req must be non-negative and finite, got {self.r_req}")

    @property
    def sinr_threshold(self) -> float:
        """Minimum SINR meeting the rate requirement, ``2**r_req - 1``."""
        return math.expm1(self.r_req * LN2)


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    """One channel realization: ``subchannels[n]`` holds the sorted gains of subchannel n."""

    subchannels: tuple[np.ndarray, ...]
    sample_id: int = 0
    snr_db: float = 20.0

    def __post_init__(self):
        subs = tuple(np.asarray(g, dtype=np.float64).reshape(-1) for g in self.subchannels)
        if len(subs) == 0:
            raise InvalidInputError("instance needs at least one subchannel")
        for n, g in enumerate(subs):
            if g.size == 0:
                raise InvalidInputError(f"subchannel {n} has no users")
            if not np.all(np.isfinite(g)) or np.any(g <= 0):
                raise InvalidInputError(f"subchannel {n} has non-positive or non-finite gains")
            if np.any(np.diff(g) > 0):
                raise InvalidInputError(f"subchannel {n} gains are not sorted non-increasing")
            g.setflags(write=False)
        object.__setattr__(self, "subchannels", subs)

    @property
    def n_subchannels(self) -> int:
        return len(self.subchannels)

    @property
    def users_per_subchannel(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.subchannels)

    @property
    def n_users(self) -> int:
        return sum(self.users_per_subchannel)

    def is_uniform(self) -> bool:
        return len(set(self.users_per_subchannel)) == 1

    def gain_matrix(self) -> np.ndarray:
        """(N, K) gain array; only valid when every subchannel has the same K."""
        if not self.is_uniform():
            raise InvalidInputError("gain_matrix requires equal users per subchannel")
        return np.stack(self.subchannels)

    def __eq__(self, other):
        if not isinstance(other, NetworkInstance):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.snr_db == other.snr_db
            and len(self.subchannels) == len(other.subchannels)
            and all(np.array_equal(a, b) for a, b in zip(self.subchannels, other.subchannels))
        )

    @classmethod
    def from_matrix(cls, gains, sample_id: int = 0, snr_db: float = 20.0) -> "NetworkInstance":
        return cls(tuple(np.asarray(gains, dtype=np.float64)), sample_id=sample_id, snr_db=snr_db)


@dataclass(frozen=True, eq=False)
class PowerAllocation:
    powers: tuple[np.ndarray, ...]

    def __post_init__(self):
        ps = tuple(np.asarray(p, dtype=np.float64).reshape(-1) for p in self.powers)
        for p in ps:
            if not np.all(np.isfinite(p)) or np.any(p < 0):
                raise InvalidInputError("powers must be finite and non-negative")
        object.__setattr__(self, "powers", ps)

    def total(self) -> float:
        return float(sum(p.sum() for p in self.powers))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.powers)

    @classmethod
    def from_flat(cls, flat, instance: NetworkInstance) -> "PowerAllocation":
        flat = np.asarray(flat, dtype=np.float64)
        splits = np.cumsum(instance.users_per_subchannel)[:-1]
        return cls(tuple(np.split(flat, splits)))

    def __eq__(self, other):
        if not isinstance(other, PowerAllocation):
            return NotImplemented
        return len(self.powers) == len(other.powers) and all(
            np.array_equal(a, b) for a, b in zip(self.powers, other.powers)
        )


@dataclass
class FeasibilityReport:
    qos_ok: list[np.ndarray]
    ordering_ok: np.ndarray
    budget_ok: bool
    worst_qos_slack: float
    feasible: bool = field(init=False)

    def __post_init__(self):
        self.feasible = bool(
            all(bool(np.all(q)) for q in self.qos_ok) and bool(np.all(self.ordering_ok)) and self.budget_ok
        )


def sic_sort(gains: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Sort gains non-increasing (stable). ``perm[k]`` is the sorted position of original entry k."""
    g = np.asarray(gains, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise InvalidInputError("empty gain vector")
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise InvalidInputError("gains must be finite and positive")
    order = np.argsort(-g, kind="stable")
    perm = np.empty_like(order)
    perm[order] = np.arange(order.size)
    return g[order], perm


def _check_pair(powers, gains) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(powers, dtype=np.float64).reshape(-1)
    h = np.asarray(gains, dtype=np.float64).reshape(-1)
    if p.shape != h.shape:
        raise InvalidInputError(f"shape mismatch: {p.shape} powers vs {h.shape} gains")
    return p, h


def sinr_vector(powers, gains) -> np.ndarray:
    p, h = _check_pair(powers, gains)
    interference = np.concatenate(([0.0], np.cumsum(p)[:-1]))
    return p * h / (1.0 + interference * h)


def sinr(powers, gains, i: int) -> float:
    """SINR of user ``i`` (1-based) after cancelling the weaker users' signals."""
    p, h = _check_pair(powers, gains)
    if not 1 <= i <= p.size:
        raise InvalidInputError(f"user index {i} out of range 1..{p.size}")
    return float(sinr_vector(p, h)[i - 1])


def rates(powers, gains) -> np.ndarray:
    """Spectral efficiencies log2(1 + SINR) in bit/s/Hz."""
    return np.log1p(sinr_vector(powers, gains)) / LN2


def _check_congruent(alloc: PowerAllocation, instance: NetworkInstance):
    if len(alloc.powers) != instance.n_subchannels or any(
        p.size != g.size for p, g in zip(alloc.powers, instance.subchannels)
    ):
        raise InvalidInputError("allocation shape does not match instance")


def all_rates(alloc: PowerAllocation, instance: NetworkInstance) -> list[np.ndarray]:
    _check_congruent(alloc, instance)
    return [rates(p, g) for p, g in zip(alloc.powers, instance.subchannels)]


def energy_efficiency(alloc: PowerAllocation, instance: NetworkInstance, cfg: SystemConfig) -> float:
    r = all_rates(alloc, instance)
    return float(sum(x.sum() for x in r) / (alloc.total() + cfg.p_circuit))


def check_feasibility(
    alloc: PowerAllocation, instance: NetworkInstance, cfg: SystemConfig, tol: float = DEFAULT_TOL
) -> FeasibilityReport:
    if tol < 0:
        raise InvalidInputError("tol must be non-negative")
    r = all_rates(alloc, instance)
    qos = [x >= cfg.r_req - tol for x in r]
    ordering = np.array([bool(np.all(np.diff(p) >= -tol)) for p in alloc.powers])
    budget = alloc.total() <= cfg.p_max + tol
    slack = float(min((x - cfg.r_req).min() for x in r))
    return FeasibilityReport(qos_ok=qos, ordering_ok=ordering, budget_ok=bool(budget), worst_qos_slack=slack)


def is_feasible(alloc: PowerAllocation, instance: NetworkInstance, cfg: SystemConfig, tol: float = DEFAULT_TOL) -> bool:
    return check_feasibility(alloc, instance, cfg, tol).feasible
