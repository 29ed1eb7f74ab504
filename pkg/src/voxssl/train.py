"""Pretraining driver: optimizer, schedules, accumulation, checkpointing.

Mini-batches are single volumes. Gradients accumulate (scaled by 1/A) and
the optimizer fires every A mini-batches, but centre and EMA teacher
updates run on every mini-batch; accumulation is therefore deliberately not
equivalent to a true batch of A. Teacher parameters never enter the
optimizer; their only mutation path is the EMA update.

Everything is deterministic given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, apply_mask, make_views
from .distill import (CenterState, LossReport, LossWeights, TemperatureConfig,
                      ema_update, entropy, global_loss, patch_loss,
                      reconstruction_loss, teacher_distribution, total_loss,
                      update_center)
from .vit3d import (ModelConfig, ModelParams, decode, encode, patchify_embed,
                    save_checkpoint, summarise)


class TrainAbort(RuntimeError):
    """Non-finite loss; carries the last loss report."""

    def __init__(self, message: str, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int | None = None  # defaults to the dataset size
    accum: int = 8
    base_lr: float = 5e-4
    warmup_epochs: int = 10
    final_lr_frac: float = 0.0
    weight_decay: float = 0.04
    ema_start: float = 0.996
    ema_end: float = 1.0
    center_momentum: float = 0.9
    grad_clip: float | None = None
    dtype: str = "float32"
    seed: int = 0
    # ablation/diagnostic switches; both on for real training
    center_update: bool = True
    ema_update: bool = True

    def __post_init__(self):
        if self.accum < 1:
            raise ValueError(f"accumulation factor must be >= 1, got {self.accum}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base lr must be positive, got {self.base_lr}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def resolved(self, n_volumes: int) -> "TrainConfig":
        if self.steps_per_epoch is not None:
            return self
        return replace(self, steps_per_epoch=n_volumes)

    @property
    def total_steps(self) -> int:
        if self.steps_per_epoch is None:
            raise ValueError("steps_per_epoch not resolved")
        return self.epochs * self.steps_per_epoch


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to final_lr_frac * base_lr."""
    if step < 0:
        raise ValueError("step must be >= 0")
    spe = cfg.steps_per_epoch
    if spe is None:
        raise ValueError("steps_per_epoch not resolved")
    warmup = cfg.warmup_epochs * spe
    if step < warmup:
        return cfg.base_lr * step / warmup
    last = cfg.total_steps - 1
    denom = max(last - warmup, 1)
    t = min((step - warmup) / denom, 1.0)
    w = 0.5 * (1.0 + math.cos(math.pi * t))
    return w * cfg.base_lr + (1.0 - w) * (cfg.final_lr_frac * cfg.base_lr)


def momentum_at(step: int, cfg: TrainConfig) -> float:
    """Cosine ramp of the EMA momentum from ema_start to ema_end over all steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    last = cfg.total_steps - 1
    t = 1.0 if last <= 0 else min(step / last, 1.0)
    w = 0.5 * (1.0 + math.cos(math.pi * t))
    return w * cfg.ema_start + (1.0 - w) * cfg.ema_end


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_init(params: ModelParams) -> OptimizerState:
    return OptimizerState(m={n: np.zeros_like(t.data) for n, t in params.named()},
                          v={n: np.zeros_like(t.data) for n, t in params.named()})


def optimizer_step(params: ModelParams, state: OptimizerState, lr: float,
                   weight_decay: float) -> None:
    """Decoupled-weight-decay adaptive-moment update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.named():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainAbort(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * update
        if weight_decay:
            p.data -= lr * weight_decay * p.data


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    total = 0.0
    for _, p in params.named():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params.named():
            if p.grad is not None:
                p.grad *= scale
    return norm


def view_seed(base_seed: int, epoch: int, step: int) -> int:
    """Per-mini-batch augmentation seed; exposed so tests can replay views."""
    return int(np.random.SeedSequence([base_seed, epoch, step]).generate_state(1)[0])


def student_losses(volume_views, student: ModelParams, teacher: ModelParams,
                   center: CenterState, tau_s: float, tau_t: float,
                   weights: LossWeights):
    """One mini-batch forward: teacher on clean globals, student on all views."""
    teacher_globals, teacher_patches = [], []
    for gv in volume_views.global_views:
        tokens = encode(patchify_embed(gv.teacher, teacher), teacher)
        g, p = summarise(tokens, teacher)
        teacher_globals.append(g.data)
        teacher_patches.append(p.data)

    student_globals, student_patches, rec_terms = [], [], []
    masked_voxels = 0
    view_voxels = 0
    for gv in volume_views.global_views:
        masked, voxmask = apply_mask(gv.student, gv.mask)
        tokens = encode(patchify_embed(masked, student), student)
        g, p = summarise(tokens, student)
        student_globals.append(g)
        student_patches.append(p)
        rec_terms.append(reconstruction_loss(gv.student, decode(tokens, student, masked.shape), voxmask))
        masked_voxels += int(voxmask.sum())
        view_voxels += voxmask.size
    for lv in volume_views.local_views:
        tokens = encode(patchify_embed(lv, student), student)
        g, _ = summarise(tokens, student)
        student_globals.append(g)

    l_global, n_pairs = global_loss(teacher_globals, student_globals,
                                    center.c_global, tau_s, tau_t)
    l_patch = patch_loss(teacher_patches, student_patches, center.c_patch,
                         tau_s, tau_t)
    l_rec = rec_terms[0]
    for r in rec_terms[1:]:
        l_rec = ad.add(l_rec, r)
    l_rec = ad.div(l_rec, float(len(rec_terms)))

    ent = float(np.mean([entropy(teacher_distribution(t, center.c_global, tau_t))
                         for t in teacher_globals]))
    loss, report = total_loss(l_global, l_patch, l_rec, weights,
                              teacher_entropy=ent,
                              mask_ratio=masked_voxels / view_voxels,
                              n_pairs=n_pairs)
    return loss, report, teacher_globals, teacher_patches


@dataclass
class TrainResult:
    final_report: LossReport
    last_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    n_optimizer_steps: int
    reports: list[LossReport]
    student: ModelParams
    teacher: ModelParams
    center: CenterState


def train_loop(volumes: Sequence[np.ndarray], model_cfg: ModelConfig,
               train_cfg: TrainConfig, aug_cfg: AugmentConfig,
               temps: TemperatureConfig | None = None,
               weights: LossWeights | None = None,
               out_dir: Path | str = "runs/pretrain") -> TrainResult:
    if len(volumes) == 0:
        raise ValueError("dataset is empty")
    temps = temps or TemperatureConfig()
    weights = weights or LossWeights()
    cfg = train_cfg.resolved(len(volumes))
    dtype = np.float32 if cfg.dtype == "float32" else np.float64

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"

    student = ModelParams.init(model_cfg, seed=cfg.seed, dtype=dtype)
    teacher = student.copy(requires_grad=False)
    center = CenterState.initial(model_cfg.proj_dim, momentum=cfg.center_momentum)
    opt = optimizer_init(student)

    global_step = 0
    n_opt_steps = 0
    best_loss = math.inf
    report: LossReport | None = None
    reports: list[LossReport] = []

    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(volumes))
            tau_t = temps.tau_t_at(epoch)
            epoch_total = 0.0
            for s in range(cfg.steps_per_epoch):
                volume = volumes[order[s % len(volumes)]]
                views = make_views(np.asarray(volume, dtype=dtype), aug_cfg,
                                   view_seed(cfg.seed, epoch, s))
                loss, report, t_globals, t_patches = student_losses(
                    views, student, teacher, center, temps.tau_s, tau_t, weights)
                reports.append(report)
                if not math.isfinite(report.total):
                    raise TrainAbort(f"non-finite loss at step {global_step}", report)
                loss.backward(scale=1.0 / cfg.accum)

                # per-mini-batch side effects (not once per optimizer step)
                if cfg.center_update:
                    center = update_center(center, t_globals, t_patches)
                ema_m = momentum_at(global_step, cfg)
                if cfg.ema_update:
                    ema_update(teacher, student, ema_m)
                assert all(t.grad is None for t in teacher.values()), \
                    "gradient leaked into teacher parameters"

                lr = lr_at(global_step, cfg)
                if (global_step + 1) % cfg.accum == 0:
                    if cfg.grad_clip is not None:
                        clip_gradients(student, cfg.grad_clip)
                    optimizer_step(student, opt, lr, cfg.weight_decay)
                    ad.zero_grads(student.values())
                    n_opt_steps += 1

                log.write(report.to_line(global_step, epoch=epoch, lr=lr,
                                         ema_momentum=ema_m) + "\n")
                epoch_total += report.total
                global_step += 1

            save_checkpoint(last_path, model_cfg, student, teacher, step=global_step)
            epoch_mean = epoch_total / cfg.steps_per_epoch
            if epoch_mean < best_loss:
                best_loss = epoch_mean
                save_checkpoint(best_path, model_cfg, student, teacher, step=global_step)

    assert report is not None
    return TrainResult(final_report=report, last_checkpoint=last_path,
                       best_checkpoint=best_path, log_path=log_path,
                       n_optimizer_steps=n_opt_steps, reports=reports,
                       student=student, teacher=teacher, center=center)
