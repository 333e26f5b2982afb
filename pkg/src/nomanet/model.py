"""Graph-attention power allocator.

Each subchannel becomes a subgraph whose nodes are the users sharing it, in SIC
order. Node i attends to itself and every stronger user j < i. All subgraphs
share one parameter set, so the model applies to any number of users and
subchannels. A node-level MLP produces one raw power per user, and a joint
ReLU-and-rescale activation maps the raw powers of a whole network realization
into the power budget.

Subgraphs are processed as a padded batch of shape (M, K_max). Because a node
only sees lower-index nodes, padding appended after the real users never
influences them; padded outputs are masked away.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .system import InvalidInputError, NetworkInstance, PowerAllocation


class Variant(str, enum.Enum):
    PLAIN = "plain"
    RESIDUAL = "res"
    DENSE = "dense"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. ``feature_dims[l]`` is F(l+1) in 1-based layer terms; ``feature_dims[0] == 1``."""

    depth: int = 2
    feature_dims: tuple[int, ...] = (1, 64, 64)
    head_counts: tuple[int, ...] = (4, 4)
    variant: Variant = Variant.RESIDUAL
    leaky_slope: float = 0.2
    mlp_hidden_dims: tuple[int, ...] = (64,)
    input_transform: str = "log10"
    readout_gain: float = 0.001
    readout_bias: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "feature_dims", tuple(int(f) for f in self.feature_dims))
        object.__setattr__(self, "head_counts", tuple(int(d) for d in self.head_counts))
        object.__setattr__(self, "mlp_hidden_dims", tuple(int(d) for d in self.mlp_hidden_dims))
        if self.depth < 1:
            raise InvalidInputError("depth must be >= 1")
        if len(self.feature_dims) != self.depth + 1 or len(self.head_counts) != self.depth:
            raise InvalidInputError("need depth+1 feature dims and depth head counts")
        if self.feature_dims[0] != 1:
            raise InvalidInputError("input feature dimension must be 1 (the gain)")
        for l, d in enumerate(self.head_counts):
            if d < 1 or self.feature_dims[l + 1] % d:
                raise InvalidInputError(f"layer {l + 1}: {self.feature_dims[l + 1]} not divisible by {d} heads")
        if self.input_transform not in ("raw", "log10"):
            raise InvalidInputError(f"unknown input transform {self.input_transform!r}")

    @classmethod
    def build(cls, variant="res", depth: int = 2, width: int = 64, heads: int = 4, **kw) -> "ModelConfig":
        return cls(
            depth=depth,
            feature_dims=(1,) + (width,) * depth,
            head_counts=(heads,) * depth,
            variant=variant,
            **kw,
        )

    def in_dims(self) -> list[int]:
        """Input width of each layer, followed by the readout input width."""
        dims = [1]
        for l in range(self.depth):
            out = self.feature_dims[l + 1]
            dims.append(out + dims[-1] if self.variant is Variant.DENSE else out)
        return dims

    @property
    def readout_dim(self) -> int:
        return self.in_dims()[-1]

    def to_dict(self) -> dict:
        return {
            "kind": "gat",
            "depth": self.depth,
            "feature_dims": list(self.feature_dims),
            "head_counts": list(self.head_counts),
            "variant": self.variant.value,
            "leaky_slope": self.leaky_slope,
            "mlp_hidden_dims": list(self.mlp_hidden_dims),
            "input_transform": self.input_transform,
            "readout_gain": self.readout_gain,
            "readout_bias": self.readout_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


@dataclass
class ParamSet:
    config: object
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.values.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.values.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    dims = config.in_dims()
    for l in range(config.depth):
        fin, fout, heads = dims[l], config.feature_dims[l + 1], config.head_counts[l]
        fh = fout // heads
        for d in range(heads):
            shapes[f"gal{l}.head{d}.w1"] = (fh, fin)
            shapes[f"gal{l}.head{d}.w2"] = (fh, fin)
            shapes[f"gal{l}.head{d}.a"] = (fh,)
        if config.variant is Variant.RESIDUAL:
            shapes[f"gal{l}.w_res"] = (fout, fin)
    width = config.readout_dim
    for k, h in enumerate(config.mlp_hidden_dims + (1,)):
        shapes[f"readout.{k}.w"] = (h, width)
        shapes[f"readout.{k}.b"] = (h,)
        width = h
    return shapes


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(rng: np.random.Generator, config: ModelConfig) -> ParamSet:
    """He-normal weights (fan-in = input width; attention vectors use their own length), zero biases.

    The last readout layer is the exception: its weights are scaled by
    ``readout_gain`` and its bias starts at ``readout_bias``, so the small
    positive bias dominates and almost every node starts with non-zero power.
    Without this a sizeable share of seeds begin with all readouts negative,
    where the relu in the power activation passes no gradient at all.

    In the residual variant the attention value map ``w2`` and ``w_res`` start
    at half the He variance. The two branches add, so full variance would
    double the feature scale per layer. At depth 3 and 4 that left training
    stuck near a third of the achievable EE.
    """
    values = {}
    last = f"readout.{len(config.mlp_hidden_dims)}"
    residual = config.variant is Variant.RESIDUAL
    for name, shape in expected_shapes(config).items():
        if name.endswith(".b"):
            values[name] = np.full(shape, config.readout_bias if name == last + ".b" else 0.0)
        elif name.endswith(".a"):
            values[name] = he_normal(rng, shape, shape[0])
        else:
            values[name] = he_normal(rng, shape, shape[1])
            if name == last + ".w":
                values[name] *= config.readout_gain
            elif residual and name.endswith((".w2", ".w_res")):
                values[name] *= np.sqrt(0.5)
    return ParamSet(config, values)


def validate_params(params: ParamSet):
    want = expected_shapes(params.config)
    if set(want) != set(params.values):
        raise InvalidInputError(f"parameter names do not match config: {sorted(set(want) ^ set(params.values))}")
    for k, shape in want.items():
        if params.values[k].shape != shape:
            raise InvalidInputError(f"{k}: shape {params.values[k].shape}, expected {shape}")
        if not np.all(np.isfinite(params.values[k])):
            raise InvalidInputError(f"{k}: non-finite entries")


# graph construction


@dataclass(frozen=True)
class Subgraph:
    node_features: np.ndarray
    adjacency: np.ndarray

    def neighborhood(self, i: int) -> list[int]:
        """0-based neighbours of node i, including the self-loop."""
        return [i] + [j for j in range(self.adjacency.shape[0]) if self.adjacency[i, j]]


def adjacency(k: int) -> np.ndarray:
    """Strictly lower-triangular: entry (i, j) is 1 iff i > j."""
    return np.tril(np.ones((k, k), dtype=np.int8), -1)


def build_subgraphs(instance: NetworkInstance) -> list[Subgraph]:
    return [Subgraph(g.copy(), adjacency(g.size)) for g in instance.subchannels]


@dataclass
class Batch:
    """Padded subgraphs of several instances.

    ``gains`` and ``mask`` are (M, K_max); ``owner`` (B, M) is the 0/1 matrix
    assigning subgraph m to instance b.
    """

    instances: list[NetworkInstance]
    gains: np.ndarray
    mask: np.ndarray
    owner: np.ndarray

    @property
    def k_max(self) -> int:
        return self.gains.shape[1]


def pack(instances: Sequence[NetworkInstance]) -> Batch:
    instances = list(instances)
    subs = [g for inst in instances for g in inst.subchannels]
    k_max = max(g.size for g in subs)
    gains = np.ones((len(subs), k_max))
    mask = np.zeros((len(subs), k_max))
    owner = np.zeros((len(instances), len(subs)))
    m = 0
    for b, inst in enumerate(instances):
        for g in inst.subchannels:
            gains[m, : g.size] = g
            mask[m, : g.size] = 1.0
            owner[b, m] = 1.0
            m += 1
    return Batch(instances, gains, mask, owner)


def attention_mask(k: int) -> np.ndarray:
    """Neighbourhoods with self-loops: node i attends to j <= i."""
    return np.tril(np.ones((k, k), dtype=bool))


def input_features(gains: np.ndarray, config) -> np.ndarray:
    if config.input_transform == "log10":
        return np.log10(gains)
    return gains


# layers


def attention_head(h: Tensor, w1, w2, a, slope: float, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """One head on padded node features ``h`` (M, K, F). Returns (alpha (M,K,K), beta (M,K,Fh))."""
    u = ad.linear(h, w1)
    v = ad.linear(h, w2)
    scores = ad.leaky_relu(ad.pairwise_add(u, v), slope)
    m, k, _ = h.shape
    logits = ad.reshape(ad.linear(scores, ad.reshape(a, (1, -1))), (m, k, k))
    alpha = ad.masked_softmax(logits, mask, axis=-1)
    return alpha, ad.bmm(alpha, v)


def graph_attention_layer(
    h: Tensor, params: Mapping[str, Tensor], config: ModelConfig, l: int, mask: np.ndarray | None = None
) -> Tensor:
    if mask is None:
        mask = attention_mask(h.shape[1])
    heads = []
    for d in range(config.head_counts[l]):
        p = f"gal{l}.head{d}."
        _, beta = attention_head(h, params[p + "w1"], params[p + "w2"], params[p + "a"], config.leaky_slope, mask)
        heads.append(beta)
    new = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    if config.variant is Variant.RESIDUAL:
        return ad.add(new, ad.linear(h, params[f"gal{l}.w_res"]))
    if config.variant is Variant.DENSE:
        return ad.concat([new, h], axis=-1)
    return new


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str, n_layers: int, slope: float) -> Tensor:
    """Dense stack with leaky-ReLU between layers and a linear last layer."""
    for k in range(n_layers):
        y = ad.linear(x, params[f"{prefix}.{k}.w"])
        x = ad.add(y, ad.broadcast_to(params[f"{prefix}.{k}.b"], y.shape))
        if k < n_layers - 1:
            x = ad.leaky_relu(x, slope)
    return x


def raw_readouts(batch: Batch, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Pre-activation power per node, (M, K_max); padded entries are garbage."""
    h = Tensor(input_features(batch.gains, config)[..., None])
    for l in range(config.depth):
        h = graph_attention_layer(h, params, config, l)
    out = mlp(h, params, "readout", len(config.mlp_hidden_dims) + 1, config.leaky_slope)
    return ad.reshape(out, batch.gains.shape)


def subgraph_readouts(sub: Subgraph, params: ParamSet) -> np.ndarray:
    """Raw readouts of one subgraph with attention restricted to its adjacency plus self-loops."""
    config = params.config
    k = sub.node_features.size
    mask = (np.asarray(sub.adjacency) != 0) | np.eye(k, dtype=bool)
    h = Tensor(input_features(np.asarray(sub.node_features, dtype=np.float64)[None], config)[..., None])
    t = params.tensors()
    for l in range(config.depth):
        h = graph_attention_layer(h, t, config, l, mask)
    out = mlp(h, t, "readout", len(config.mlp_hidden_dims) + 1, config.leaky_slope)
    return out.data.reshape(k)


def power_activation_tensor(raw: Tensor, batch: Batch, p_max: float) -> Tensor:
    """Joint activation over each realization: p = relu(raw) * P / max(P, sum relu(raw))."""
    q = ad.mul(ad.relu(raw), Tensor(batch.mask))
    totals = ad.matvec(Tensor(batch.owner), ad.sum(q, axis=1))
    s = ad.div(Tensor(p_max), ad.maximum(totals, p_max))
    s_per_sub = ad.reshape(ad.matvec(Tensor(batch.owner.T), s), (-1, 1))
    return ad.mul(q, ad.broadcast_to(s_per_sub, q.shape))


def fit_budget(alloc: PowerAllocation, p_max: float) -> PowerAllocation:
    """Shave rounding so the summed powers never exceed ``p_max`` in floating point."""
    powers = alloc.powers
    while sum(p.sum() for p in powers) > p_max:
        powers = tuple(p * (1.0 - 4 * np.finfo(float).eps) for p in powers)
    return PowerAllocation(powers) if powers is not alloc.powers else alloc


def power_activation(raw, p_max: float, instance: NetworkInstance | None = None):
    """Numeric form of the budget activation on one realization.

    ``raw`` may be a flat array (returned as a flat array, or as a PowerAllocation
    when ``instance`` is given) or a sequence of per-subchannel arrays (returned
    as a PowerAllocation).
    """
    if isinstance(raw, np.ndarray) or (len(raw) and np.isscalar(raw[0])):
        r = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
        out = r * (p_max / max(p_max, r.sum()))
        while out.sum() > p_max:
            out *= 1.0 - 4 * np.finfo(float).eps
        return fit_budget(PowerAllocation.from_flat(out, instance), p_max) if instance is not None else out
    parts = [np.maximum(np.asarray(x, dtype=np.float64), 0.0) for x in raw]
    s = p_max / max(p_max, float(np.sum([x.sum() for x in parts])))
    return fit_budget(PowerAllocation(tuple(x * s for x in parts)), p_max)


def unpack_powers(p: np.ndarray, batch: Batch, p_max: float = math.inf) -> list[PowerAllocation]:
    allocs = []
    m = 0
    for inst in batch.instances:
        subs = []
        for g in inst.subchannels:
            subs.append(p[m, : g.size].copy())
            m += 1
        allocs.append(fit_budget(PowerAllocation(tuple(subs)), p_max))
    return allocs


def as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamSet):
        return params.tensors()
    return params


def allocate(instances: Sequence[NetworkInstance], params: ParamSet, p_max: float) -> list[PowerAllocation]:
    """Batched inference for GAT or MLP parameter sets (no tape)."""
    from .mlp import MLPConfig, mlp_raw_readouts

    batch = pack(instances)
    t = as_tensors(params)
    if isinstance(params.config, MLPConfig):
        raw = mlp_raw_readouts(batch, t, params.config)
    else:
        raw = raw_readouts(batch, t, params.config)
    return unpack_powers(power_activation_tensor(raw, batch, p_max).data, batch, p_max)


def forward(instance: NetworkInstance, params: ParamSet, config: ModelConfig | None = None, p_max: float = 10.0) -> PowerAllocation:
    if config is not None and config != params.config:
        raise InvalidInputError("config does not match the parameter set")
    return allocate([instance], params, p_max)[0]


# single-node views of the layer, used to expose each step on its own


def attention_coefficients(l: int, d: int, features: np.ndarray, i: int, params: ParamSet) -> np.ndarray:
    """Weights of node ``i`` (0-based) over its neighbourhood 0..i for head ``d`` of layer ``l``.

    ``features`` are the layer inputs, (K, F) or (K,) when F = 1.
    """
    config = params.config
    t = params.tensors()
    p = f"gal{l}.head{d}."
    f = np.asarray(features, dtype=np.float64)
    h = Tensor((f[:, None] if f.ndim == 1 else f)[None])
    alpha, _ = attention_head(h, t[p + "w1"], t[p + "w2"], t[p + "a"], config.leaky_slope, attention_mask(h.shape[1]))
    return alpha.data[0, i, : i + 1]


def aggregate(weights, neighbour_features, w2) -> np.ndarray:
    """Sum over neighbours of weight * (w2 @ h)."""
    hs = np.atleast_2d(np.asarray(neighbour_features, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (hs.shape[0],):
        raise InvalidInputError("one weight per neighbour required")
    return ad.linear(Tensor(w[None, :] @ hs), Tensor(w2)).data[0]


def update_node(variant, heads: Sequence, h_i, w_res=None) -> np.ndarray:
    variant = Variant(variant)
    new = np.concatenate([np.asarray(b, dtype=np.float64).reshape(-1) for b in heads])
    h_i = np.asarray(h_i, dtype=np.float64).reshape(-1)
    if variant is Variant.RESIDUAL:
        w_res = np.asarray(w_res, dtype=np.float64)
        if w_res.shape != (new.size, h_i.size):
            raise InvalidInputError(f"w_res shape {w_res.shape}, expected {(new.size, h_i.size)}")
        return new + w_res @ h_i
    if variant is Variant.DENSE:
        return np.concatenate([new, h_i])
    return new


def readout(h, params: ParamSet) -> float:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.size != params.config.readout_dim:
        raise InvalidInputError(f"readout expects width {params.config.readout_dim}, got {h.size}")
    cfg = params.config
    return float(mlp(Tensor(h[None]), params.tensors(), "readout", len(cfg.mlp_hidden_dims) + 1, cfg.leaky_slope).data[0, 0])
