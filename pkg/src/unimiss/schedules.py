"""Modality alternation, learning-rate and teacher-momentum schedules."""
from __future__ import annotations

import math

from .config import DistillConfig, TrainSchedule
from .mit import DimTag


def modality_for_step(step: int, upsilon: int) -> DimTag:
    """Blocks of ``upsilon`` 2D steps then ``upsilon`` 3D steps, repeating."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if upsilon < 1:
        raise ValueError(f"interval must be >= 1, got {upsilon}")
    return DimTag.D2 if (step // upsilon) % 2 == 0 else DimTag.D3


def lr_for_step(step: int, sched: TrainSchedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay towards 0 at ``total_steps``."""
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    w = sched.warmup_steps
    if step < w:
        return sched.base_lr * step / w
    progress = (step - w) / (sched.total_steps - w)
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * progress))


def momentum_for_step(step: int, total_steps: int, cfg: DistillConfig | None = None) -> float:
    """Cosine ramp of the teacher momentum from ``lambda_base`` at step 0 to ``lambda_final`` at the last step."""
    cfg = DistillConfig() if cfg is None else cfg
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return cfg.lambda_final
    ramp = (1.0 - math.cos(math.pi * step / (total_steps - 1))) / 2.0
    return cfg.lambda_base + (cfg.lambda_final - cfg.lambda_base) * ramp
