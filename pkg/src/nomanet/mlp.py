"""Fully connected baseline allocator.

The network reads the N*K sorted gains of a whole realization as one flat
vector and emits N*K raw powers, which go through the same joint budget
activation as the GAT model. Its input width fixes (N, K), so it cannot be
applied to other problem sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Batch, ParamSet, he_normal, input_features, mlp
from .system import InvalidInputError


class NotApplicableError(InvalidInputError):
    """The model cannot evaluate instances of this size."""


@dataclass(frozen=True)
class MLPConfig:
    n_subchannels: int = 10
    k_per_subchannel: int = 5
    hidden_dims: tuple[int, ...] = (128, 64)
    leaky_slope: float = 0.2
    input_transform: str = "log10"
    readout_gain: float = 0.001
    readout_bias: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.n_subchannels < 1 or self.k_per_subchannel < 1:
            raise InvalidInputError("N and K must be >= 1")
        if self.input_transform not in ("raw", "log10"):
            raise InvalidInputError(f"unknown input transform {self.input_transform!r}")

    @property
    def width(self) -> int:
        return self.n_subchannels * self.k_per_subchannel

    def supports(self, n: int, k: int) -> bool:
        return (n, k) == (self.n_subchannels, self.k_per_subchannel)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "n_subchannels": self.n_subchannels,
            "k_per_subchannel": self.k_per_subchannel,
            "hidden_dims": list(self.hidden_dims),
            "leaky_slope": self.leaky_slope,
            "input_transform": self.input_transform,
            "readout_gain": self.readout_gain,
            "readout_bias": self.readout_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        return cls(**{k: v for k, v in d.items() if k != "kind"})


def mlp_shapes(config: MLPConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    width = config.width
    for k, h in enumerate(config.hidden_dims + (config.width,)):
        shapes[f"mlp.{k}.w"] = (h, width)
        shapes[f"mlp.{k}.b"] = (h,)
        width = h
    return shapes


def init_mlp_params(rng: np.random.Generator, config: MLPConfig) -> ParamSet:
    """Same conventions as the GAT readout, including the last-layer gain and bias."""
    values = {}
    last = f"mlp.{len(config.hidden_dims)}"
    for name, shape in mlp_shapes(config).items():
        if name.endswith(".b"):
            values[name] = np.full(shape, config.readout_bias if name == last + ".b" else 0.0)
        else:
            values[name] = he_normal(rng, shape, shape[1])
            if name == last + ".w":
                values[name] *= config.readout_gain
    return ParamSet(config, values)


def mlp_raw_readouts(batch: Batch, params: Mapping[str, Tensor], config: MLPConfig) -> Tensor:
    n, k = config.n_subchannels, config.k_per_subchannel
    for inst in batch.instances:
        if inst.users_per_subchannel != (k,) * n:
            raise NotApplicableError(
                f"MLP trained for (N={n}, K={k}) cannot evaluate N={inst.n_subchannels}, K={inst.users_per_subchannel}"
            )
    x = Tensor(input_features(batch.gains, config).reshape(len(batch.instances), n * k))
    out = mlp(x, params, "mlp", len(config.hidden_dims) + 1, config.leaky_slope)
    return ad.reshape(out, (len(batch.instances) * n, k))
