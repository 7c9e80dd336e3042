"""Losses, AdamW, cosine schedule, freeze window, metrics and the training loop."""
from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InvalidArgument
from .model import PRETRAINED_TAG, CrackMamba, ModelOutput, coerce
from .nn import functional as F
from .nn.tensor import Tensor, no_grad

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 60
    freeze_epochs: int = 10
    ds_weights: tuple = (8 / 15, 4 / 15, 2 / 15, 1 / 15)
    batch_size: int = 8
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise InvalidArgument("invalid train config field 'lr0': must be positive")
        if self.epochs < 1:
            raise InvalidArgument("invalid train config field 'epochs': must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("invalid train config field 'batch_size': must be >= 1")
        if len(self.ds_weights) != 4 or abs(sum(self.ds_weights) - 1.0) > 1e-9:
            raise InvalidArgument("invalid train config field 'ds_weights': need 4 weights summing to 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise InvalidArgument("invalid train config field 'betas'")

    def to_lines(self) -> list:
        out = []
        for key, val in asdict(self).items():
            if isinstance(val, (tuple, list)):
                val = ",".join(repr(float(v)) for v in val)
            out.append(f"{key}={val}")
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise InvalidArgument(f"unknown train config key {key!r}")
            default = known[key].default
            if isinstance(default, tuple) and isinstance(raw, str):
                try:
                    kwargs[key] = tuple(float(v) for v in raw.split(",") if v.strip())
                except ValueError:
                    raise InvalidArgument(f"cannot parse {raw!r} for config key {key!r}") from None
            else:
                kwargs[key] = coerce(default, raw, key)
        return cls(**kwargs)


# ---------------------------------------------------------------- losses

def _check_target(target: np.ndarray, shape) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != shape:
        raise InvalidArgument(f"target shape {target.shape} does not match logits {shape}")
    if not np.isin(target, (0, 1)).all():
        raise InvalidArgument("target values must be 0 or 1")
    return target.astype(np.int64)


def dice_ce_loss(logits: Tensor, target) -> Tensor:
    """Cross-entropy plus soft Dice over both classes.

    Dice sums run over every pixel of the batch, per class, then the two class
    scores are averaged: ``1 - mean_c (2*sum p*g + eps) / (sum p + sum g + eps)``.
    """
    n, c, h, w = logits.shape
    target = _check_target(target, (n, h, w))
    onehot = np.stack([target == k for k in range(c)], axis=1).astype(logits.dtype)
    g = Tensor(onehot, dtype=logits.dtype)
    ce = F.mul(F.sum(F.mul(F.log_softmax(logits, axis=1), g)), -1.0 / (n * h * w))
    p = F.softmax(logits, axis=1)
    inter = F.sum(F.mul(p, g), axis=(0, 2, 3))
    denom = F.add(F.sum(p, axis=(0, 2, 3)), Tensor(onehot.sum(axis=(0, 2, 3)), dtype=logits.dtype))
    dice = F.div(F.add(F.mul(inter, 2.0), DICE_EPS), F.add(denom, DICE_EPS))
    return F.add(ce, F.sub(1.0, F.mean(dice)))


def downsample_mask(target: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsampling (top-left sample of each cell)."""
    return np.ascontiguousarray(target[:, ::factor, ::factor])


def deep_supervision_loss(output: ModelOutput, target, weights=TrainConfig.ds_weights) -> Tensor:
    """Weighted sum of dice+CE over the full-resolution and auxiliary heads.

    ``weights`` are ordered full, /2, /4, /8; ``output.aux_logits`` is
    ordered coarse to fine.
    """
    heads = [output.logits_full] + list(reversed(output.aux_logits))
    if len(weights) != len(heads):
        raise InvalidArgument(f"{len(weights)} weights for {len(heads)} heads")
    target = np.asarray(target)
    total = None
    for head, wgt in zip(heads, weights):
        factor = target.shape[-1] // head.shape[-1]
        term = F.mul(dice_ce_loss(head, downsample_mask(target, factor)), float(wgt))
        total = term if total is None else F.add(total, term)
    return total


# ---------------------------------------------------------------- optimisation

def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise InvalidArgument(f"epoch {epoch} outside [0, {total_epochs})")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
               weight_decay: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One in-place AdamW update of ``param``; ``state`` holds m, v and the step count."""
    b1, b2 = betas
    if not state:
        state.update(step=0, m=np.zeros_like(param), v=np.zeros_like(param))
    state["step"] += 1
    t = state["step"]
    if weight_decay:
        param -= lr * weight_decay * param
    m, v = state["m"], state["v"]
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class AdamW:
    def __init__(self, params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.weight_decay, self.betas, self.eps = weight_decay, tuple(betas), eps
        self.state = {id(p): {} for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.state[id(p)], lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def freeze_policy(epoch: int, model, freeze_epochs: int = 10) -> None:
    """Freeze the pretrained-analog parameters (cross-scan VSS branches) for the first epochs."""
    frozen = epoch < freeze_epochs
    for p in model.parameters():
        if PRETRAINED_TAG in p.tags:
            p.frozen = frozen


# ---------------------------------------------------------------- metrics

@dataclass
class SegMetrics:
    """Confusion counts for the crack class; background counts are their mirror."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def merge(self, other: "SegMetrics") -> "SegMetrics":
        return SegMetrics(self.tp + other.tp, self.fp + other.fp,
                          self.fn + other.fn, self.tn + other.tn)

    @property
    def pixels(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @staticmethod
    def _ratio(num, den):
        return 1.0 if den == 0 else num / den

    @property
    def iou(self) -> list:
        # background: TP=tn, FP=fn, FN=fp
        return [self._ratio(self.tn, self.tn + self.fn + self.fp),
                self._ratio(self.tp, self.tp + self.fp + self.fn)]

    @property
    def miou(self) -> float:
        return sum(self.iou) / 2

    @property
    def f1(self) -> float:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def sensitivity(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)


def compute_metrics(pred_mask, gt_mask) -> SegMetrics:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return SegMetrics(tp, fp, fn, pred.size - tp - fp - fn)


# ---------------------------------------------------------------- loops

def predict(model: CrackMamba, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode argmax masks ``[N,H,W]`` for ``[N,3,H,W]`` images."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size], dtype=model.config.dtype)
            logits = model(x).logits_full.data
            out.append((logits[:, 1] > logits[:, 0]).astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.uint8)


def evaluate(model: CrackMamba, images: np.ndarray, masks: np.ndarray, batch_size: int = 8) -> SegMetrics:
    total = SegMetrics()
    for i in range(0, len(images), batch_size):
        pred = predict(model, images[i:i + batch_size], batch_size)
        total = total.merge(compute_metrics(pred, masks[i:i + batch_size]))
    return total


def dataset_loss(model: CrackMamba, images, masks, cfg: TrainConfig) -> float:
    """Eval-mode deep-supervision loss averaged over ``images``."""
    was_training = model.training
    model.eval()
    total = 0.0
    with no_grad():
        for i in range(0, len(images), cfg.batch_size):
            x = Tensor(images[i:i + cfg.batch_size], dtype=model.config.dtype)
            loss = deep_supervision_loss(model(x), masks[i:i + cfg.batch_size], cfg.ds_weights)
            total += loss.item() * len(x)
    model.train(was_training)
    return total / len(images)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_miou: float
    val_f1: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.6e}\t{self.train_loss:.8f}\t{self.val_miou:.6f}\t{self.val_f1:.6f}"


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_miou: float


def fit(model: CrackMamba, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
        val_images: np.ndarray | None = None, val_masks: np.ndarray | None = None,
        log=None, echo="stdout", restore_best: bool = True) -> TrainResult:
    """Train with AdamW + cosine decay; one tab-separated log line per epoch.

    ``echo`` is a second stream for the log lines; the default follows
    whatever ``sys.stdout`` is at call time and ``None`` silences it.
    Validation defaults to the training set. With ``restore_best`` the weights
    of the epoch with the highest validation mIoU are loaded back at the end.
    """
    cfg.validate()
    if echo == "stdout":
        echo = sys.stdout
    if val_images is None:
        val_images, val_masks = images, masks
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = AdamW(model.parameters(), cfg.weight_decay, cfg.betas, cfg.adam_eps)
    dtype = model.config.dtype
    history, best, best_state = [], (-1.0, -1), None

    with threadpool_limits(limits=cfg.threads):
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
            freeze_policy(epoch, model, cfg.freeze_epochs)
            model.train()
            order = rng.permutation(len(images))
            loss_sum = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[i:i + cfg.batch_size])
                out = model(Tensor(images[idx], dtype=dtype), rng)
                loss = deep_supervision_loss(out, masks[idx], cfg.ds_weights)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                loss_sum += loss.item() * len(idx)
            metrics = evaluate(model, val_images, val_masks, cfg.batch_size)
            rec = EpochRecord(epoch, lr, loss_sum / len(images), metrics.miou, metrics.f1)
            history.append(rec)
            for stream in (log, echo):
                if stream is not None:
                    stream.write(rec.line() + "\n")
                    stream.flush()
            if rec.val_miou > best[0]:
                best = (rec.val_miou, epoch)
                best_state = [p.data.copy() for p in model.parameters()]

    if restore_best and best_state is not None:
        for p, saved in zip(model.parameters(), best_state):
            p.data = saved
    for p in model.parameters():
        p.frozen = False
    return TrainResult(history, best[1], best[0])
