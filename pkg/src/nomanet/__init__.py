"""Graph-attention power allocation for energy-efficient downlink NOMA."""

from .system import (
    FeasibilityReport,
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

__version__ = "0.1.0"
