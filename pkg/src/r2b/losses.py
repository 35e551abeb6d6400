"""Attention transfer, logit matching and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from r2b.tensor import Tensor, log_softmax, row_norm, softmax_cross_entropy

NORM_EPS = 1e-8


@dataclass
class LossConfig:
    """Term weights of the training objective.

    ``att_weight`` multiplies the attention loss summed over the active
    transfer points; ``points`` selects which block outputs are matched
    (None = all).
    """

    ce_weight: float = 1.0
    att_weight: float = 10.0 / 8
    kd_weight: float = 1.0
    temperature: float = 3.0
    points: Optional[Sequence[int]] = None

    def __post_init__(self):
        if min(self.ce_weight, self.att_weight, self.kd_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def default_for(cls, num_points: int, **kw) -> "LossConfig":
        return cls(att_weight=10.0 / num_points, **kw)


def attention_map(a: Tensor) -> Tensor:
    """Sum over channels of squared activations: [N,C,H,W] -> [N,H,W]."""
    return (a * a).sum(axis=1)


def _normalized_rows(q: Tensor) -> Tensor:
    flat = q.reshape(q.shape[0], -1)
    return flat / (row_norm(flat).reshape(q.shape[0], 1) + NORM_EPS)


def attention_transfer_loss(student_maps: Sequence[Tensor], teacher_maps: Sequence[Tensor]) -> Tensor:
    """Sum over points of the batch-mean L2 distance between normalized maps."""
    if len(student_maps) != len(teacher_maps):
        raise ValueError(f"{len(student_maps)} student maps vs {len(teacher_maps)} teacher maps")
    if not student_maps:
        raise ValueError("no transfer points")
    total = None
    for qs, qt in zip(student_maps, teacher_maps):
        if qs.shape != qt.shape:
            raise ValueError(f"attention maps not aligned: {qs.shape} vs {qt.shape}")
        dist = row_norm(_normalized_rows(qs) - _normalized_rows(qt)).mean()
        total = dist if total is None else total + dist
    return total


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """tau^2 * KL(softmax(t/tau) || softmax(s/tau)), averaged over the batch."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    log_pt = log_softmax(teacher_logits * (1.0 / temperature))
    log_ps = log_softmax(student_logits * (1.0 / temperature))
    pt = log_pt.exp()
    kl = (pt * (log_pt - log_ps)).sum() * (1.0 / student_logits.shape[0])
    return kl * (temperature ** 2)


def combined_loss(ce: Optional[Tensor], att: Optional[Tensor], kd: Optional[Tensor], config: LossConfig) -> Tensor:
    total = None
    for value, weight in ((ce, config.ce_weight), (att, config.att_weight), (kd, config.kd_weight)):
        if weight == 0 or value is None:
            continue
        term = value * weight
        total = term if total is None else total + term
    if total is None:
        raise ValueError("combined loss has no active term")
    return total


def compute_losses(student_logits: Tensor, student_transfers, labels: np.ndarray, config: LossConfig,
                   teacher_logits: Optional[Tensor] = None, teacher_transfers=None) -> dict:
    """Evaluate every active term; returns the parts and their weighted total."""
    parts = {}
    ce = att = kd = None
    if config.ce_weight > 0:
        ce = softmax_cross_entropy(student_logits, labels)
        parts["ce"] = ce
    if config.att_weight > 0 and teacher_transfers is not None:
        idx = range(len(student_transfers)) if config.points is None else config.points
        att = attention_transfer_loss([attention_map(student_transfers[i]) for i in idx],
                                      [attention_map(teacher_transfers[i]) for i in idx])
        parts["att"] = att
    if config.kd_weight > 0 and teacher_logits is not None:
        kd = kd_loss(student_logits, teacher_logits, config.temperature)
        parts["kd"] = kd
    parts["total"] = combined_loss(ce, att, kd, config)
    return parts
