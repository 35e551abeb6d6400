"""Optimization loop: Adam, stepwise schedule with warm-up, weight decay
policy, mixup, top-k evaluation and metrics logging."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from r2b.data import Dataset, augment_batch
from r2b.losses import LossConfig, compute_losses
from r2b.tensor import Tensor, no_grad, one_hot

logger = logging.getLogger(__name__)


@dataclass
class OptimizerPolicy:
    lr: float = 1e-3
    step_epochs: List[int] = field(default_factory=lambda: [150, 250, 320])
    decay_factor: float = 0.1
    warmup_epochs: int = 5
    weight_decay: float = 1e-5
    epochs: int = 350
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        steps = list(self.step_epochs)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"step_epochs must be strictly increasing: {steps}")
        if steps and steps[-1] >= self.epochs:
            raise ValueError(f"step epoch {steps[-1]} not below epochs={self.epochs}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")

    @classmethod
    def stage1(cls, **kw) -> "OptimizerPolicy":
        """Real weights: lr 1e-3, 5 warm-up epochs, weight decay 1e-5."""
        return cls(**kw)

    @classmethod
    def stage2(cls, **kw) -> "OptimizerPolicy":
        """Binary weights: lr 2e-4, no warm-up, no weight decay."""
        base = dict(lr=2e-4, warmup_epochs=0, weight_decay=0.0)
        base.update(kw)
        return cls(**base)

    def rescaled(self, epochs: int) -> "OptimizerPolicy":
        """Same schedule shape squeezed into ``epochs`` epochs."""
        ratio = epochs / self.epochs
        steps = sorted({max(1, int(round(s * ratio))) for s in self.step_epochs})
        steps = [s for s in steps if s < epochs]
        warm = min(self.warmup_epochs, int(math.ceil(self.warmup_epochs * ratio)))
        return replace(self, epochs=epochs, step_epochs=steps, warmup_epochs=warm)


def lr_at(epoch: float, policy: OptimizerPolicy) -> float:
    """Learning rate at a (fractional) epoch: linear warm-up from 0, then step decay."""
    if policy.warmup_epochs > 0 and epoch < policy.warmup_epochs:
        return policy.lr * epoch / policy.warmup_epochs
    n_steps = sum(1 for s in policy.step_epochs if epoch >= s)
    return policy.lr * policy.decay_factor ** n_steps


class Adam:
    """Adam with L2 weight decay folded into the gradient of eligible weights."""

    def __init__(self, params, policy: OptimizerPolicy, decay_params=()):
        self.params = list(params)
        self.policy = policy
        self.decay_ids = {id(p) for p in decay_params if not getattr(p, "binary", False)}
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def regularized_grad(self, p) -> Optional[np.ndarray]:
        if p.grad is None:
            return None
        if self.policy.weight_decay and id(p) in self.decay_ids:
            return p.grad + self.policy.weight_decay * p.data
        return p.grad

    def step(self, lr: float) -> None:
        pol = self.policy
        self.t += 1
        c1 = 1.0 - pol.beta1 ** self.t
        c2 = 1.0 - pol.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = self.regularized_grad(p)
            if g is None:
                continue
            m *= pol.beta1
            m += (1.0 - pol.beta1) * g
            v *= pol.beta2
            v += (1.0 - pol.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + pol.adam_eps)).astype(p.dtype)
            if getattr(p, "binary", False):
                np.clip(p.data, -1.0, 1.0, out=p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def mixup_batch(x: np.ndarray, y_onehot: np.ndarray, alpha: float, rng: np.random.Generator,
                lam: Optional[float] = None):
    """Convex combination of the batch with a shuffled copy of itself."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    perm = rng.permutation(len(x))
    x_mix = lam * x + (1.0 - lam) * x[perm]
    y_mix = lam * y_onehot + (1.0 - lam) * y_onehot[perm]
    return x_mix.astype(x.dtype), y_mix.astype(y_onehot.dtype)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int] = (1, 5)) -> Dict[int, float]:
    order = np.argsort(-logits, axis=1, kind="stable")
    out = {}
    for k in ks:
        hit = (order[:, :min(k, logits.shape[1])] == labels[:, None]).any(axis=1)
        out[k] = 100.0 * float(hit.mean()) if len(labels) else 0.0
    return out


def predict(net, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = net.training
    net.eval()
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            outs.append(net(Tensor(images[s:s + batch_size])).data)
    net.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def evaluate(net, data: Dataset, batch_size: int = 256) -> Dict[str, float]:
    """Top-1 / top-5 accuracy (percent) with BatchNorm in eval mode."""
    acc = topk_accuracy(predict(net, data.images, batch_size), data.labels)
    return {"top1": acc[1], "top5": acc[5]}


class TrainingDivergedError(RuntimeError):
    pass


CSV_FIELDS = ["stage", "epoch", "split", "loss", "ce", "att", "kd", "lr", "top1", "top5", "wall_ms"]


class MetricsLog:
    """One JSON object per line, mirrored to CSV.

    With ``deterministic`` set, wall-clock fields are written as 0 so that
    repeated runs produce byte-identical logs.
    """

    def __init__(self, jsonl_path=None, csv_path=None, deterministic: bool = False):
        self.records: List[dict] = []
        self.deterministic = deterministic
        self.jsonl_path = Path(jsonl_path) if jsonl_path else None
        self.csv_path = Path(csv_path) if csv_path else None
        if self.csv_path and not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_FIELDS)

    def write(self, record: dict) -> None:
        record = dict(record)
        if self.deterministic:
            record["wall_ms"] = 0
        self.records.append(record)
        if self.jsonl_path:
            with open(self.jsonl_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.csv_path:
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(record.get(k, "")) for k in CSV_FIELDS])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


@dataclass
class TrainConfig:
    augment: str = "eval"
    mixup_alpha: float = 0.0
    stage: str = ""
    eval_every: int = 1


def train_stage(net, data: Dataset, policy: OptimizerPolicy, losses: LossConfig, teacher=None,
                eval_data: Optional[Dataset] = None, log: Optional[MetricsLog] = None,
                config: Optional[TrainConfig] = None) -> List[dict]:
    """Train ``net`` in place for ``policy.epochs`` epochs; returns per-epoch records."""
    config = config or TrainConfig()
    log = log or MetricsLog()
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(policy.seed)
    opt = Adam(net.parameters(), policy, net.decay_parameters())
    steps_per_epoch = -(-len(data) // policy.batch_size)
    need_teacher = teacher is not None and (losses.att_weight > 0 or losses.kd_weight > 0)
    if teacher is not None:
        teacher.eval()
    records = []
    net.train()
    for epoch in range(policy.epochs):
        start = time.perf_counter()
        sums: Dict[str, float] = {}
        correct = seen = 0
        order = rng.permutation(len(data))
        for b, (idx, x, y) in enumerate(data.batches(policy.batch_size, order)):
            lr = lr_at(epoch + b / steps_per_epoch, policy)
            x = augment_batch(x, idx, policy.seed, epoch, config.augment)
            target = y
            if config.mixup_alpha > 0:
                x, target = mixup_batch(x, one_hot(y, data.class_count), config.mixup_alpha, rng)
            xt = Tensor(x)
            logits, transfers = net.forward_with_transfer_points(xt)
            t_logits = t_transfers = None
            if need_teacher:
                with no_grad():
                    t_logits, t_transfers = teacher.forward_with_transfer_points(xt)
            parts = compute_losses(logits, transfers, target, losses, t_logits,
                                   t_transfers if losses.att_weight > 0 else None)
            values = {k: float(v.item()) for k, v in parts.items()}
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}: {values}")
            parts["total"].backward()
            opt.step(lr)
            opt.zero_grad()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        rec = {"stage": config.stage, "epoch": epoch, "split": "train",
               "loss": sums.get("total", 0.0) / seen, "lr": lr_at(epoch, policy),
               "top1": 100.0 * correct / seen, "top5": None,
               "wall_ms": int(1000 * (time.perf_counter() - start))}
        for k in ("ce", "att", "kd"):
            if k in sums:
                rec[k] = sums[k] / seen
        log.write(rec)
        records.append(rec)
        logger.info("epoch %d loss %.4f top1 %.2f", epoch, rec["loss"], rec["top1"])
        last = epoch == policy.epochs - 1
        if eval_data is not None and (last or (epoch + 1) % config.eval_every == 0):
            start = time.perf_counter()
            acc = evaluate(net, eval_data)
            rec = {"stage": config.stage, "epoch": epoch, "split": eval_data.split, **acc,
                   "wall_ms": int(1000 * (time.perf_counter() - start))}
            log.write(rec)
            records.append(rec)
    return records
