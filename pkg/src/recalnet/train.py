"""Loss, optimiser, schedule and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from recalnet import checkpoint
from recalnet.metrics import MetricsReport, per_sample_scores
from recalnet.model import SegNet
from recalnet.nn import ParamStore
from recalnet.synthdata import SampleBatch, augment
from recalnet.tensor import ConfigError, Tensor, accumulate_grad, make_result

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_iou_mean", "val_iou_std", "val_dice_mean", "val_dice_std")


class NumericalError(ArithmeticError):
    """NaN/inf in a loss or gradient; carries enough context to locate it."""


class DomainError(ValueError):
    pass


@dataclass
class LossConfig:
    lam: float = 0.8
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss lambda must lie in [0, 1], got {self.lam}")
        if self.sigma <= 0:
            raise ConfigError(f"loss sigma must be > 0, got {self.sigma}")


@dataclass
class TrainConfig:
    lr0: float = 0.005
    momentum: float = 0.9
    clip_threshold: float = 0.1
    clip_mode: str = "value"     # "value" (elementwise) or "norm" (global L2)
    decay_factor: float = 0.8
    decay_every: int = 2
    epochs: int = 30
    batch_size: int = 4
    steps_per_epoch: int = 0     # 0: one pass over the training set
    seed: int = 0
    augment: tuple[str, ...] = ()

    def __post_init__(self):
        self.augment = tuple(self.augment)
        for name in ("lr0", "clip_threshold", "decay_factor", "decay_every", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps_per_epoch < 0:
            raise ConfigError(f"steps_per_epoch must be >= 0, got {self.steps_per_epoch}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.clip_mode not in ("norm", "value"):
            raise ConfigError(f"clip_mode must be 'norm' or 'value', got {self.clip_mode!r}")


# ---------------------------------------------------------------------------
# loss


def loss(pred: Tensor, truth, cfg: LossConfig | None = None) -> Tensor:
    """lam * mean BCE - (1 - lam) * log soft-Dice, sums over the whole batch.

    ``pred`` must lie in (0, 1).  An exact 0 or 1 is accepted only where it
    equals the truth (0 log 0 = 0, so a perfect prediction scores exactly 0);
    anything that would make the loss infinite raises instead of being clamped.
    """
    cfg = cfg or LossConfig()
    p = pred.data
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth, dtype=p.dtype)
    if p.shape != t.shape:
        raise ConfigError(f"loss: pred shape {p.shape} != truth shape {t.shape}")
    if not np.all(np.isfinite(p)):
        raise NumericalError(f"loss: {int(np.sum(~np.isfinite(p)))} non-finite predictions")
    bad = ~((p > 0.0) & (p < 1.0)) & ~(((p == 0.0) | (p == 1.0)) & (p == t))
    if np.any(bad):
        raise DomainError(f"loss: predictions must lie in (0, 1); found {int(bad.sum())} values like {p[bad][0]!r}")
    n = p.size
    bce = -np.mean(xlogy(t, p) + xlogy(1.0 - t, 1.0 - p))
    num = 2.0 * np.sum(t * p) + cfg.sigma
    den = np.sum(t) + np.sum(p) + cfg.sigma
    value = cfg.lam * bce - (1.0 - cfg.lam) * math.log(num / den)

    def backward(g):
        pos = np.divide(t, p, out=np.zeros_like(p), where=t != 0)
        neg = np.divide(1.0 - t, 1.0 - p, out=np.zeros_like(p), where=t != 1)
        d_bce = -(pos - neg) / n
        d_dice = -2.0 * t / num + 1.0 / den
        accumulate_grad(pred, g.reshape(()) * (cfg.lam * d_bce + (1.0 - cfg.lam) * d_dice))

    return make_result(np.array(value).reshape(1, 1, 1, 1), (pred,), backward)


# ---------------------------------------------------------------------------
# optimiser


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float, mode: str = "norm") -> float:
    """Clip in place; returns the pre-clip global norm."""
    norm = global_norm(grads.values())
    if mode == "norm":
        if norm > threshold:
            scale = threshold / norm
            for g in grads.values():
                g *= scale
    else:
        for g in grads.values():
            np.clip(g, -threshold, threshold, out=g)
    return norm


class SGD:
    """Momentum SGD over a ParamStore: v <- mu * v + g;  w <- w - lr * v."""

    def __init__(self, params: ParamStore, momentum: float = 0.9, clip_threshold: float = 0.1,
                 clip_mode: str = "value"):
        self.params = params
        self.momentum = momentum
        self.clip_threshold = clip_threshold
        self.clip_mode = clip_mode
        self.velocity = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> float:
        grads = {}
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter slot {name!r}")
            grads[name] = p.grad
        norm = clip_gradients(grads, self.clip_threshold, self.clip_mode)
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            self.params[name].data -= lr * v
        return norm

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0, clip_threshold: float = 0.1,
             velocity: dict | None = None, clip_mode: str = "norm") -> float:
    """Functional single step; pass the same ``velocity`` dict across calls for momentum."""
    opt = SGD(params, momentum, clip_threshold, clip_mode)
    if velocity is not None:
        for name in opt.velocity:
            velocity.setdefault(name, opt.velocity[name])
        opt.velocity = velocity
    return opt.step(lr)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_iou: float = -1.0
    best_state: dict | None = None
    last_state: dict | None = None


def predict(model: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    outs = [model(Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model: SegNet, batch: SampleBatch, cls: str = "default") -> MetricsReport:
    prob = predict(model, batch.images)
    ious, dices = per_sample_scores(prob, batch.masks)
    report = MetricsReport()
    report.add(cls, batch.ids, ious, dices)
    return report


def epoch_batches(n: int, tcfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch.

    Without ``steps_per_epoch`` this is one shuffled pass.  With it, shuffled
    passes are chained until that many batches are drawn, so a tiny set can
    carry a fixed step budget through the decay schedule.
    """
    rng = np.random.default_rng([tcfg.seed, epoch])
    if not tcfg.steps_per_epoch:
        order = rng.permutation(n)
        return [order[b:b + tcfg.batch_size] for b in range(0, n, tcfg.batch_size)]
    out: list[np.ndarray] = []
    pool = np.empty(0, dtype=int)
    while len(out) < tcfg.steps_per_epoch:
        while len(pool) < tcfg.batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        # a batch never repeats a sample when batch_size <= n
        take = min(tcfg.batch_size, n)
        out.append(pool[:take])
        pool = pool[take:]
    return out


def train(model: SegNet, train_set: SampleBatch, tcfg: TrainConfig, lcfg: LossConfig | None = None,
          val_set: SampleBatch | None = None, out_dir=None, max_steps: int | None = None) -> TrainResult:
    """Epoch loop with the step-decay schedule and gradient clipping.

    Validation (on ``val_set``, or the training set when none is given) runs in
    eval mode after every epoch.  The best-by-IoU and last states are kept and,
    with ``out_dir``, written as ``best.ckpt``/``last.ckpt`` beside ``epochs.csv``.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    lcfg = lcfg or LossConfig()
    val_set = val_set if val_set is not None else train_set
    store = model.params()
    opt = SGD(store, tcfg.momentum, tcfg.clip_threshold, tcfg.clip_mode)
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg)
        batches = epoch_batches(len(train_set), tcfg, epoch)
        data = train_set
        if tcfg.augment:
            data = augment(train_set, tcfg.augment, seed=tcfg.seed * 100003 + epoch)
        model.train()
        losses = []
        for idx in batches:
            opt.zero_grad()
            pred = model(Tensor(data.images[idx]))
            try:
                value = loss(pred, data.masks[idx], lcfg)
            except (NumericalError, DomainError) as exc:
                # saturated outputs that miss the truth mean an infinite loss: divergence
                raise NumericalError(f"{exc} at epoch {epoch}, step {step}") from exc
            lv = value.item()
            if not math.isfinite(lv):
                raise NumericalError(f"loss is {lv} at epoch {epoch}, step {step}")
            value.backward()
            opt.step(lr)
            losses.append(lv)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        summary = evaluate(model, val_set).rows()[0]
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_iou_mean": summary["iou_mean"], "val_iou_std": summary["iou_std"],
               "val_dice_mean": summary["dice_mean"], "val_dice_std": summary["dice_std"]}
        result.rows.append(row)
        log.info("epoch %d lr %.6g loss %.5f val IoU %.4f", epoch, lr, row["train_loss"], row["val_iou_mean"])
        if row["val_iou_mean"] > result.best_iou:
            result.best_iou = row["val_iou_mean"]
            result.best_epoch = epoch
            result.best_state = checkpoint.snapshot(model)
        if max_steps is not None and step >= max_steps:
            break
    result.last_state = checkpoint.snapshot(model)
    if out_dir is not None:
        write_log(out_dir / "epochs.csv", result.rows)
        checkpoint.save(out_dir / "best.ckpt", model.config, result.best_state)
        checkpoint.save(out_dir / "last.ckpt", model.config, result.last_state)
    return result


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (r[k] if k == "epoch" else repr(float(r[k]))) for k in LOG_FIELDS})
