"""Training loop: L1 loss, gradient accumulation, Adam and a OneCycle schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import kernels as K
from .augment import augment_graph, random_rotation
from .errors import EmptyDataset, EmptyMask, MissingTemperature, NonFiniteLoss
from .graph import build_graph, collate
from .metrics import adp_mae
from .model import CartNet, ModelConfig, TemperatureStats

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4
    grad_accumulation: int = 16
    lr_max: float = 1e-3
    epochs: int = 50
    pct_start: float = 0.01
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "l1"
    so3_augment: bool = True
    seed: int = 0
    eval_every: int = 1
    include_hydrogens: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.grad_accumulation < 1:
            raise ValueError("grad_accumulation must be >= 1")
        if not 0 < self.pct_start < 1:
            raise ValueError("pct_start must lie in (0, 1)")
        if self.loss != "l1":
            raise ValueError(f"unsupported loss {self.loss!r}; only 'l1' is implemented")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


def split_config(data):
    """Split one flat config mapping into (ModelConfig, TrainConfig)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    model_part = {k: v for k, v in data.items() if k in model_keys}
    train_part = {k: v for k, v in data.items() if k not in model_keys}
    return ModelConfig.from_dict(model_part), TrainConfig.from_dict(train_part)


# --- temperature ---------------------------------------------------------------

def compute_temperature_stats(structures):
    """Mean/std of training temperatures; a zero spread falls back to std = 1."""
    temps = [s.temperature for s in structures if s.temperature is not None]
    if not temps:
        log.warning("no training temperatures; using mean 0, std 1")
        return TemperatureStats(0.0, 1.0)
    t = np.asarray(temps, dtype=np.float64)
    std = float(t.std())
    if not std > 0:
        log.warning("training temperatures have zero spread; using std 1")
        std = 1.0
    return TemperatureStats(float(t.mean()), std)


def standardize_temperature(t, stats, required=True):
    if t is None or (np.ndim(t) == 0 and np.isnan(t)):
        if required:
            raise MissingTemperature("temperature is required by the model")
        return 0.0
    return stats.standardize(t)


# --- loss, schedule, optimizer ----------------------------------------------------

def l1_adp_loss(u_pred, u_true, mask=None):
    """Mean |dU| over the 9 entries of the masked atoms.

    ``u_pred`` is a Var (or array) [n, 3, 3]; ``mask`` selects rows of both.
    """
    u_pred = K.as_var(u_pred)
    u_true = np.asarray(u_true, dtype=np.float64)
    if mask is not None:
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            raise EmptyMask("no atoms selected for the loss")
        u_pred = K.gather(u_pred, idx)
        u_true = u_true[idx]
    if u_pred.value.shape[0] == 0:
        raise EmptyMask("no atoms selected for the loss")
    return K.mean(K.absolute(K.sub(u_pred, u_true)))


def l1_scalar_loss(pred, target):
    return K.mean(K.absolute(K.sub(K.as_var(pred), np.asarray(target, dtype=np.float64))))


def onecycle_lr(step, total_steps, lr_max, pct_start=0.01, div_factor=25.0,
                final_div_factor=1e4):
    """Cosine one-cycle: lr_max/div_factor -> lr_max at round(pct_start*T) -> floor at T-1."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lr_start = lr_max / div_factor
    lr_end = lr_start / final_div_factor
    peak = int(round(pct_start * total_steps))
    peak = min(max(peak, 0), total_steps - 1)

    def cos_interp(a, b, frac):
        return b + (a - b) * 0.5 * (1.0 + math.cos(math.pi * frac))

    if step <= peak:
        return lr_max if peak == 0 else cos_interp(lr_start, lr_max, step / peak)
    span = total_steps - 1 - peak
    return cos_interp(lr_max, lr_end, (step - peak) / span)


class Adam:
    """Adam without weight decay; state keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in params:
            g = p.grad
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- the loop ----------------------------------------------------------------------

@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "steps", "lr", "train_loss", "val_mae"])
            for e in self.epochs:
                w.writerow([e["epoch"], e["steps"], repr(e["lr"]), repr(e["train_loss"]),
                            "" if e["val_mae"] is None else repr(e["val_mae"])])


def make_graphs(structures, r_c, include_hydrogens=True):
    return [build_graph(s, r_c, include_hydrogens) for s in structures]


def validation_mae(model, graphs):
    """Mean per-atom ADP MAE (ADP head) or mean absolute error (scalar head)."""
    preds = model.predict_graphs(graphs)
    if model.config.head == "scalar":
        targets = np.array([g.target for g in graphs], dtype=np.float64)
        return float(np.mean(np.abs(preds - targets)))
    errs = [adp_mae(p, g.adp[g.node_has_target]) for p, g in zip(preds, graphs)]
    errs = np.concatenate([np.atleast_1d(e) for e in errs])
    return float(errs.mean())


def _micro_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _batch_loss(model, graphs, stats_required):
    batch = collate(graphs)
    pred = model.forward(batch, training=True)
    if model.config.head == "cholesky":
        return l1_adp_loss(pred, batch.adp[batch.node_has_target])
    if np.any(np.isnan(batch.targets)):
        raise EmptyMask("scalar head needs a target on every structure")
    return l1_scalar_loss(pred, batch.targets)


def train(train_structures, model_config, train_config=None, val_structures=None,
          callback=None):
    """Fit a CartNet; returns (model, history).

    With validation structures the returned model is the best-validation
    snapshot; otherwise it is the final one.
    """
    cfg = train_config or TrainConfig()
    if not train_structures:
        raise EmptyDataset("no training structures")
    stats = compute_temperature_stats(train_structures)
    model = CartNet(model_config, seed=cfg.seed, temperature_stats=stats)
    graphs = make_graphs(train_structures, model_config.cutoff, cfg.include_hydrogens)
    val_graphs = (make_graphs(val_structures, model_config.cutoff, cfg.include_hydrogens)
                  if val_structures else [])
    if model_config.head == "cholesky" and not any(g.node_has_target.any() for g in graphs):
        raise EmptyMask("no training atom carries an ADP target")

    n_micro = math.ceil(len(graphs) / cfg.batch_size)
    steps_per_epoch = math.ceil(n_micro / cfg.grad_accumulation)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    optimizer = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    params = model.parameters()
    history = TrainHistory()
    best_val, best_model = math.inf, None
    step = 0
    epoch = 0
    while step < total_steps:
        shuffle_rng = np.random.default_rng([cfg.seed, epoch, 0])
        if cfg.so3_augment:
            epoch_graphs = [
                augment_graph(g, random_rotation(np.random.default_rng([cfg.seed, epoch, 1, i])))
                for i, g in enumerate(graphs)
            ]
        else:
            epoch_graphs = graphs
        micro = _micro_batches(len(graphs), cfg.batch_size, shuffle_rng)
        epoch_losses = []
        lr = None
        for start in range(0, len(micro), cfg.grad_accumulation):
            if step >= total_steps:
                break
            group = micro[start:start + cfg.grad_accumulation]
            model.zero_grad()
            group_loss = 0.0
            for idx in group:
                chunk = [epoch_graphs[i] for i in idx]
                loss = _batch_loss(model, chunk, model_config.use_temperature)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise NonFiniteLoss(
                        f"non-finite loss {value} at epoch {epoch}, step {step}, "
                        f"structures {[g.structure_id for g in chunk]}")
                K.mul(loss, 1.0 / len(group)).backward()
                group_loss += value / len(group)
            lr = onecycle_lr(step, total_steps, cfg.lr_max, cfg.pct_start,
                             cfg.div_factor, cfg.final_div_factor)
            optimizer.step(params, lr)
            history.step_losses.append(group_loss)
            epoch_losses.append(group_loss)
            step += 1
            if callback is not None:
                callback(step, group_loss)
        val = None
        last = step >= total_steps
        if val_graphs and ((epoch + 1) % cfg.eval_every == 0 or last):
            val = validation_mae(model, val_graphs)
            if val < best_val:
                best_val, best_model = val, model.copy()
                history.best_epoch = epoch
        history.epochs.append({"epoch": epoch, "steps": step, "lr": lr,
                               "train_loss": float(np.mean(epoch_losses)) if epoch_losses
                               else float("nan"),
                               "val_mae": val})
        log.info("epoch %d: loss %.6g val %s", epoch, history.epochs[-1]["train_loss"], val)
        epoch += 1
    return (best_model if best_model is not None else model), history
