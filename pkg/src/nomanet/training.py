"""Unsupervised training with the penalty loss, Adam, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .mlp import MLPConfig, init_mlp_params, mlp_raw_readouts, mlp_shapes
from .model import (
    Batch,
    ModelConfig,
    ParamSet,
    expected_shapes,
    init_params,
    pack,
    power_activation_tensor,
    raw_readouts,
)
from .system import LN2, InvalidInputError, NetworkInstance, PowerAllocation, SystemConfig, all_rates

log = logging.getLogger(__name__)

EE_GUARD = 1e-12
CHECKPOINT_FORMAT = "nomanet-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, checkpoint=None, history=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history


class CheckpointError(ValueError):
    pass


def default_penalty(model) -> float:
    """Penalty weight picked on the validation feasibility/EE trade-off for each model family.

    The MLP's per-node outputs die under the stronger ordering penalty (no
    feasible validation sample at 10), so it gets a lighter weight.
    """
    return 3.0 if isinstance(model, MLPConfig) else 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    lam_qos: float | None = None  # None: default_penalty(model)
    lam_order: float | None = None
    seed: int = 0
    model: ModelConfig | MLPConfig = field(default_factory=ModelConfig)
    dataset: str = ""

    def __post_init__(self):
        lam = default_penalty(self.model)
        self.lam_qos = lam if self.lam_qos is None else float(self.lam_qos)
        self.lam_order = lam if self.lam_order is None else float(self.lam_order)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("learning_rate, batch_size must be positive and epochs non-negative")
        if self.lam_qos < 0 or self.lam_order < 0:
            raise InvalidInputError("penalty weights must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def config_from_dict(d: dict):
    return MLPConfig.from_dict(d) if d.get("kind") == "mlp" else ModelConfig.from_dict(d)


def param_shapes(config) -> dict[str, tuple[int, ...]]:
    return mlp_shapes(config) if isinstance(config, MLPConfig) else expected_shapes(config)


def new_params(rng: np.random.Generator, config) -> ParamSet:
    return init_mlp_params(rng, config) if isinstance(config, MLPConfig) else init_params(rng, config)


def model_powers(batch: Batch, params, config, p_max: float) -> Tensor:
    if isinstance(config, MLPConfig):
        raw = mlp_raw_readouts(batch, params, config)
    else:
        raw = raw_readouts(batch, params, config)
    return power_activation_tensor(raw, batch, p_max)


# loss


def _strict_lower(k: int) -> np.ndarray:
    return np.tril(np.ones((k, k)), -1)


def _order_diff(k: int) -> np.ndarray:
    """Rows map powers p to p[i-1] - p[i] for i = 1..k-1."""
    d = np.zeros((k - 1, k))
    idx = np.arange(k - 1)
    d[idx, idx] = 1.0
    d[idx, idx + 1] = -1.0
    return d


@dataclass
class LossTerms:
    total: Tensor
    inv_ee: Tensor
    qos: Tensor
    order: Tensor


def penalty_loss_terms(p: Tensor, batch: Batch, cfg: SystemConfig, lam_qos: float, lam_order: float) -> LossTerms:
    """Per-instance loss pieces on padded powers ``p`` (M, K_max).

    ``total`` is 1/max(EE, guard) + lam_qos * QoS shortfall + lam_order * ordering
    violation, averaged over the instances of the batch; the other fields are
    per-instance (B,) tensors.
    """
    k = batch.k_max
    gains = Tensor(batch.gains)
    mask = Tensor(batch.mask)
    owner = Tensor(batch.owner)
    interference = ad.linear(p, Tensor(_strict_lower(k)))
    sinr = ad.div(ad.mul(p, gains), ad.add(1.0, ad.mul(interference, gains)))
    rate = ad.mul(ad.scale(ad.log1p(sinr), 1.0 / LN2), mask)
    sum_rate = ad.matvec(owner, ad.sum(rate, axis=1))
    sum_power = ad.matvec(owner, ad.sum(p, axis=1))
    ee = ad.div(sum_rate, ad.add(sum_power, cfg.p_circuit))
    inv_ee = ad.div(1.0, ad.maximum(ee, EE_GUARD))
    qos = ad.matvec(owner, ad.sum(ad.mul(ad.relu(ad.sub(cfg.r_req, rate)), mask), axis=1))
    if k > 1:
        pair_mask = Tensor(batch.mask[:, 1:])
        viol = ad.mul(ad.relu(ad.linear(p, Tensor(_order_diff(k)))), pair_mask)
        order = ad.matvec(owner, ad.sum(viol, axis=1))
    else:
        order = Tensor(np.zeros(len(batch.instances)))
    per = ad.add(ad.add(inv_ee, ad.scale(qos, lam_qos)), ad.scale(order, lam_order))
    total = ad.scale(ad.sum(per), 1.0 / len(batch.instances))
    return LossTerms(total, inv_ee, qos, order)


def penalty_loss(p: Tensor, batch: Batch, cfg: SystemConfig, lam_qos: float, lam_order: float) -> Tensor:
    return penalty_loss_terms(p, batch, cfg, lam_qos, lam_order).total


def loss_value(alloc: PowerAllocation, instance: NetworkInstance, cfg: SystemConfig, lam_qos: float, lam_order: float) -> float:
    """Plain-numpy evaluation of the loss for one allocation."""
    r = all_rates(alloc, instance)
    ee = sum(x.sum() for x in r) / (alloc.total() + cfg.p_circuit)
    qos = sum(np.maximum(cfg.r_req - x, 0.0).sum() for x in r)
    order = sum(np.maximum(p[:-1] - p[1:], 0.0).sum() for p in alloc.powers)
    return 1.0 / max(ee, EE_GUARD) + lam_qos * qos + lam_order * order


def batch_loss(params: ParamSet, instances: Sequence[NetworkInstance], cfg: SystemConfig, lam_qos: float, lam_order: float) -> float:
    batch = pack(instances)
    p = model_powers(batch, params.tensors(), params.config, cfg.p_max)
    return float(penalty_loss(p, batch, cfg, lam_qos, lam_order).data)


def dataset_loss(params: ParamSet, instances, cfg, lam_qos, lam_order, chunk: int = 256) -> float:
    """Mean per-instance loss over a dataset, evaluated without a tape."""
    total = 0.0
    for s in range(0, len(instances), chunk):
        part = instances[s : s + chunk]
        total += batch_loss(params, part, cfg, lam_qos, lam_order) * len(part)
    return total / len(instances)


# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update. Rejects non-finite gradients before touching anything."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {bad}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise InvalidInputError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# training loop


@dataclass
class Checkpoint:
    config: object
    params: ParamSet
    train_config: TrainConfig | None = None
    best_val_loss: float = math.nan
    epoch: int = 0
    metrics: dict = field(default_factory=dict)


def train_step(params: ParamSet, instances, cfg: SystemConfig, tcfg: TrainConfig, state: AdamState) -> float:
    batch = pack(instances)
    leaves = params.tensors(requires_grad=True)
    with Tape() as tape:
        p = model_powers(batch, leaves, params.config, cfg.p_max)
        loss = penalty_loss(p, batch, cfg, tcfg.lam_qos, tcfg.lam_order)
    g = backward(tape, loss, wrt=leaves.values())
    adam_step(params.values, {k: g[t.id] for k, t in leaves.items()}, state, tcfg.learning_rate)
    return float(loss.data)


def train(
    train_set: Sequence[NetworkInstance],
    val_set: Sequence[NetworkInstance],
    tcfg: TrainConfig,
    cfg: SystemConfig = SystemConfig(),
    params: ParamSet | None = None,
    progress: bool = False,
) -> tuple[Checkpoint, dict]:
    """Train for ``tcfg.epochs`` epochs and keep the parameters with the lowest validation loss."""
    if not train_set or not val_set:
        raise InvalidInputError("training and validation sets must be non-empty")
    if params is None:
        params = new_params(np.random.default_rng([tcfg.seed, 0]), tcfg.model)
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    state = AdamState()
    val0 = dataset_loss(params, val_set, cfg, tcfg.lam_qos, tcfg.lam_order)
    history = {"train_loss": [math.nan], "val_loss": [val0]}
    best = Checkpoint(tcfg.model, params.copy(), tcfg, val0, 0)
    train_set = list(train_set)
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        try:
            for s in range(0, len(order), tcfg.batch_size):
                losses.append(train_step(params, [train_set[i] for i in order[s : s + tcfg.batch_size]], cfg, tcfg, state))
        except NonFiniteGradientError as e:
            raise TrainingDivergedError(f"epoch {epoch}: {e}", best, history) from e
        val = dataset_loss(params, val_set, cfg, tcfg.lam_qos, tcfg.lam_order)
        history["train_loss"].append(float(np.mean(losses)))
        history["val_loss"].append(val)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"epoch {epoch}: validation loss {val}", best, history)
        if val < best.best_val_loss:
            best = Checkpoint(tcfg.model, params.copy(), tcfg, val, epoch)
        msg = f"epoch {epoch:3d}  train {history['train_loss'][-1]:.5f}  val {val:.5f}  best {best.best_val_loss:.5f}@{best.epoch}"
        log.info(msg)
        if progress:
            print(msg, flush=True)
    return best, history


# checkpoint files


def params_digest(params: ParamSet) -> str:
    h = hashlib.sha256()
    for k in sorted(params.values):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.values[k], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike, binary: bool = False) -> Path:
    path = Path(path)
    names = list(param_shapes(ck.config))
    flat = np.concatenate([ck.params.values[k].reshape(-1) for k in names]) if names else np.zeros(0)
    if binary:
        payload = flat.astype("<f8").tobytes()
    else:
        payload = "".join("%.17g\n" % x for x in flat).encode("ascii")
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": ck.config.to_dict(),
        "train": ck.train_config.to_dict() if ck.train_config is not None else None,
        "best_val_loss": ck.best_val_loss,
        "epoch": ck.epoch,
        "metrics": ck.metrics,
        "param_order": [[k, list(ck.params.values[k].shape)] for k in names],
        "payload": "binary" if binary else "text",
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    return path


def load_checkpoint(path: str | os.PathLike, config=None) -> Checkpoint:
    """Read a checkpoint; with ``config`` given, its parameter shapes must fit that config."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r} v{header.get('version')!r}")
    payload = raw[nl + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupted file)")
    if header["payload"] == "binary":
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    else:
        flat = np.array([float(x) for x in payload.decode("ascii").split()])
    stored = config_from_dict(header["model"])
    order = [(k, tuple(s)) for k, s in header["param_order"]]
    want = param_shapes(stored)
    if dict(order) != want:
        raise CheckpointError(f"{path}: parameter layout inconsistent with embedded model config")
    if config is not None:
        target = param_shapes(config)
        if target != want:
            diff = sorted(set(target.items()) ^ set(want.items()))[:4]
            raise InvalidInputError(f"{path}: checkpoint shapes do not fit requested config ({diff} ...)")
    if flat.size != sum(int(np.prod(s)) for _, s in order):
        raise CheckpointError(f"{path}: payload has {flat.size} values, layout needs more/fewer")
    values = {}
    pos = 0
    for k, s in order:
        n = int(np.prod(s))
        values[k] = flat[pos : pos + n].reshape(s).copy()
        pos += n
    tc = None
    if header.get("train") is not None:
        td = dict(header["train"])
        td["model"] = config_from_dict(td["model"])
        tc = TrainConfig(**td)
    return Checkpoint(stored, ParamSet(stored, values), tc, header["best_val_loss"], header["epoch"], header.get("metrics", {}))
