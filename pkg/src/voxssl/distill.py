"""Self-distillation objective: reconstruction + global/patch alignment.

The teacher side is sharpened (temperature tau_t) after subtracting an
exponentially averaged centre vector; the student side keeps a fixed
temperature tau_s = 0.1. Global alignment averages the cross-entropy over
all teacher-view/student-view pairs except self-pairs; patch alignment is a
per-token cross-entropy on the two global crops of the same view index.
The total objective is L_global + L_patch + lambda_rec * L_rec with
lambda_rec defaulting to 100.

Teacher outputs enter every function as plain arrays (or are detached), so
no gradient can flow into teacher parameters or centre state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from . import autodiff as ad
from .autodiff import Tensor
from .vit3d import ModelParams


@dataclass(frozen=True)
class TemperatureConfig:
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    warmup_epochs: int = 10

    def __post_init__(self):
        if min(self.tau_s, self.tau_t_start, self.tau_t_end) <= 0:
            raise ValueError("temperatures must be positive")
        if max(self.tau_t_start, self.tau_t_end) > self.tau_s:
            raise ValueError("teacher temperature must not exceed the student's")

    def tau_t_at(self, epoch: int) -> float:
        """Linear warmup from start to end over warmup_epochs, then constant."""
        if self.warmup_epochs <= 0 or epoch >= self.warmup_epochs:
            return self.tau_t_end
        return self.tau_t_start + (self.tau_t_end - self.tau_t_start) * (epoch / self.warmup_epochs)


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 100.0

    def __post_init__(self):
        if self.lambda_rec < 0:
            raise ValueError(f"lambda_rec must be >= 0, got {self.lambda_rec}")


@dataclass
class CenterState:
    """EMA centres for the global and patch heads; never receives gradients."""

    c_global: np.ndarray
    c_patch: np.ndarray
    momentum: float = 0.9

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"centre momentum must be in [0,1), got {self.momentum}")

    @classmethod
    def initial(cls, k: int, momentum: float = 0.9) -> "CenterState":
        return cls(c_global=np.zeros(k), c_patch=np.zeros(k), momentum=momentum)


@dataclass
class LossReport:
    l_global: float
    l_patch: float
    l_rec: float
    total: float
    teacher_entropy: float
    mask_ratio: float
    n_pairs: int

    def to_line(self, step: int, **extra) -> str:
        rec = {"step": step, "l_global": self.l_global, "l_patch": self.l_patch,
               "l_rec": self.l_rec, "total": self.total,
               "teacher_entropy": self.teacher_entropy,
               "mask_ratio": self.mask_ratio, "n_pairs": self.n_pairs}
        rec.update(extra)
        return json.dumps(rec)


def _as_array(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def teacher_distribution(logits, center: np.ndarray, tau_t: float) -> np.ndarray:
    """softmax((logits - center) / tau_t), detached from any tape."""
    if tau_t <= 0:
        raise ValueError(f"tau_t must be positive, got {tau_t}")
    z = (_as_array(logits) - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy over leading axes (natural log)."""
    h = -xlogy(probs, probs).sum(axis=-1)
    return float(np.mean(h))


def n_alignment_pairs(n_views: int) -> int:
    return 2 * (n_views - 1)


def global_loss(teacher_logits: Sequence, student_logits: Sequence[Tensor],
                center: np.ndarray, tau_s: float, tau_t: float) -> tuple[Tensor, int]:
    """Mean cross-entropy over the 2(V-1) teacher/student view pairs.

    Student views are ordered [global 1, global 2, locals...]; teacher view
    i is excluded from pairing with student view i (same global crop).
    """
    if len(teacher_logits) != 2:
        raise ValueError(f"expected 2 teacher global views, got {len(teacher_logits)}")
    n_views = len(student_logits)
    if n_views < 2:
        raise ValueError(f"need at least 2 student views, got {n_views}")
    terms: list[Tensor] = []
    for i, tl in enumerate(teacher_logits):
        t = teacher_distribution(tl, center, tau_t)
        for j, s in enumerate(student_logits):
            if j == i:
                continue
            terms.append(ad.cross_entropy(Tensor(t.astype(s.dtype)), ad.div(s, tau_s)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms))), len(terms)


def patch_loss(teacher_patch: Sequence, student_patch: Sequence[Tensor],
               center: np.ndarray, tau_s: float, tau_t: float) -> Tensor:
    """Per-token cross-entropy on the global crops, averaged over tokens and views."""
    if len(teacher_patch) != len(student_patch):
        raise ValueError(f"view count mismatch: {len(teacher_patch)} teacher vs "
                         f"{len(student_patch)} student")
    terms: list[Tensor] = []
    for tp, sp in zip(teacher_patch, student_patch):
        tp = _as_array(tp)
        if tp.shape != sp.shape:
            raise ValueError(f"patch token mismatch: teacher {tp.shape} vs student {sp.shape}")
        t = teacher_distribution(tp, center, tau_t)
        terms.append(ad.cross_entropy(Tensor(t.astype(sp.dtype)), ad.div(sp, tau_s)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms)))


def reconstruction_loss(x: np.ndarray, x_bar: Tensor, voxel_mask: np.ndarray) -> Tensor:
    """Mean squared error over masked voxels only."""
    if tuple(x.shape) != tuple(x_bar.shape):
        raise ValueError(f"shape mismatch: {x.shape} vs {x_bar.shape}")
    return ad.l2_loss(x_bar, Tensor(np.asarray(x, dtype=x_bar.dtype)), voxel_mask)


def total_loss(l_global: Tensor, l_patch: Tensor, l_rec: Tensor,
               weights: LossWeights, *, teacher_entropy: float = float("nan"),
               mask_ratio: float = float("nan"), n_pairs: int = 0,
               ) -> tuple[Tensor, LossReport]:
    total = ad.add(ad.add(l_global, l_patch), ad.mul(l_rec, weights.lambda_rec))
    report = LossReport(l_global=float(l_global.data), l_patch=float(l_patch.data),
                        l_rec=float(l_rec.data), total=float(total.data),
                        teacher_entropy=teacher_entropy, mask_ratio=mask_ratio,
                        n_pairs=n_pairs)
    return total, report


def update_center(center: CenterState, teacher_global_logits: Sequence,
                  teacher_patch_logits: Sequence) -> CenterState:
    """EMA step from one mini-batch of teacher logits (never from the student)."""
    rho = center.momentum
    g = np.stack([_as_array(x) for x in teacher_global_logits]).mean(axis=0)
    p = np.concatenate([_as_array(x) for x in teacher_patch_logits], axis=0).mean(axis=0)
    return CenterState(c_global=rho * center.c_global + (1 - rho) * g,
                       c_patch=rho * center.c_patch + (1 - rho) * p,
                       momentum=rho)


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    """teacher <- m * teacher + (1-m) * student, elementwise and in place."""
    if not 0 <= m <= 1:
        raise ValueError(f"EMA momentum must be in [0,1], got {m}")
    t_names = list(teacher.tensors)
    s_names = list(student.tensors)
    if t_names != s_names:
        raise ValueError("teacher/student parameter names differ")
    for name in t_names:
        t, s = teacher[name], student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        if m == 1.0:
            continue
        t.data *= m
        t.data += (1.0 - m) * s.data
    return teacher
