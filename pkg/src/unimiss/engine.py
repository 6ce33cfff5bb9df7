"""Self-supervised pretraining: 2D/3D alternation, dual-path step, checkpointed run loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .config import FullConfig, serialize_config
from .data import PretrainPools, augment, build_pools
from .metrics import MetricsLog, StepMetrics, export_columns, read_metrics
from .mit import DimTag, MiT
from .schedules import lr_for_step, modality_for_step, momentum_for_step
from .ssl import (Projector, SSLNet, ema_update, init_center, loss_2d, loss_3d, slice_representation,
                  teacher_entropy, update_center)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, metrics: StepMetrics, last_metrics: StepMetrics | None = None):
        super().__init__(f"non-finite loss at step {metrics.step} ({metrics.modality}): {metrics.loss}")
        self.metrics = metrics
        self.last_metrics = last_metrics


@dataclass
class DualPathState:
    student: SSLNet
    teacher: SSLNet
    center: Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0
    # index of the next batch to draw; batches are pure functions of (run seed, cursor)
    data_cursor: int = 0


def build_network(cfg: FullConfig) -> SSLNet:
    backbone = MiT(cfg.mit)
    return SSLNet(backbone, Projector(backbone.embed_dim, cfg.projector))


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or "pos_embed" in name or "ssl_token" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def build_state(cfg: FullConfig, seed: int | None = None) -> DualPathState:
    seed = cfg.run.seed if seed is None else seed
    torch.manual_seed(seed)
    student = build_network(cfg)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(param_groups(student, cfg.schedule.weight_decay), lr=cfg.schedule.base_lr)
    return DualPathState(student, teacher, init_center(cfg.projector.output_dim), opt)


def restore_state(cfg: FullConfig, path: str | Path) -> DualPathState:
    tensors, meta = ckpt.load_checkpoint(path)
    state = build_state(cfg)
    state.student.load_state_dict(tensors["student"])
    state.teacher.load_state_dict(tensors["teacher"])
    state.optimizer.load_state_dict(tensors["optimizer"])
    state.center = tensors["center"]
    state.step = int(meta["step"])
    state.data_cursor = int(meta["data_cursor"])
    return state


def sample_batch(pools: PretrainPools, cursor: int, modality: DimTag, cfg: FullConfig, run_seed: int):
    """Deterministic batch for a data cursor: two augmented views stacked as [B, 1, ...] tensors."""
    rng = np.random.default_rng([run_seed, cursor])
    if modality is DimTag.D2:
        source, bs = pools.images, cfg.schedule.batch_size_2d
    else:
        source, bs = pools.volumes, cfg.schedule.batch_size_3d
    idx = rng.integers(0, len(source), size=bs)
    seeds = rng.integers(0, 2**31 - 1, size=bs)
    pairs = [augment(source[i], int(s), modality, cfg.augment) for i, s in zip(idx, seeds)]
    v1 = torch.from_numpy(np.stack([p.view1 for p in pairs]))[:, None]
    v2 = torch.from_numpy(np.stack([p.view2 for p in pairs]))[:, None]
    return v1, v2


def forward_outputs(state: DualPathState, v1: Tensor, v2: Tensor, modality: DimTag, volume_slice: bool) -> dict:
    """Student and teacher projector outputs for both views (teacher under no_grad)."""
    b = v1.shape[0]
    both = torch.cat([v1, v2])
    out: dict[str, Tensor] = {}
    s = state.student(both)
    out["s_1"], out["s_2"] = s[:b], s[b:]
    with torch.no_grad():
        t = state.teacher(both)
    out["t_1"], out["t_2"] = t[:b], t[b:]
    if modality is DimTag.D3 and volume_slice:
        s_sl = slice_representation(state.student, both)
        out["s_sl1"], out["s_sl2"] = s_sl[:b], s_sl[b:]
        with torch.no_grad():
            t_sl, t_per_slice = slice_representation(state.teacher, both, return_slices=True)
        out["t_sl1"], out["t_sl2"] = t_sl[:b], t_sl[b:]
        out["t_per_slice"] = t_per_slice.reshape(-1, t_per_slice.shape[-1])
    return out


def train_step(state: DualPathState, batch: tuple[Tensor, Tensor], modality: DimTag | str, cfg: FullConfig,
               lr: float | None = None, lam: float | None = None, record: dict | None = None):
    """One optimizer update of the student, then teacher EMA and center update.

    ``record``, when given, receives the projector outputs and the center used by the loss.
    """
    modality = DimTag(modality)
    v1, v2 = batch
    if DimTag.of(v1) is not modality or v1.shape != v2.shape:
        raise ValueError(f"batch of shape {tuple(v1.shape)} does not match modality {modality}")
    sched, dcfg = cfg.schedule, cfg.distill
    lr = lr_for_step(state.step, sched) if lr is None else lr
    lam = momentum_for_step(state.step, sched.total_steps, dcfg) if lam is None else lam
    for g in state.optimizer.param_groups:
        g["lr"] = lr

    center = state.center
    volume_slice = dcfg.volume_slice
    out = forward_outputs(state, v1, v2, modality, volume_slice)
    if not all(bool(torch.isfinite(v).all()) for v in out.values()):
        raise NonFiniteLossError(StepMetrics(state.step, str(modality), math.nan, math.nan, float(lr), float(lam)))
    if modality is DimTag.D2:
        loss = loss_2d(out["s_1"], out["s_2"], out["t_1"], out["t_2"], center, dcfg)
        targets = torch.cat([out["t_1"], out["t_2"]])
        center_feed = targets
    else:
        loss = loss_3d(out["s_1"], out.get("s_sl1"), out["s_2"], out.get("s_sl2"),
                       out["t_1"], out.get("t_sl1"), out["t_2"], out.get("t_sl2"),
                       center, dcfg, volume_slice=volume_slice)
        targets = torch.cat([out["t_1"], out["t_2"]])
        center_feed = targets
        if volume_slice:
            targets = torch.cat([targets, out["t_sl1"], out["t_sl2"]])
            center_feed = torch.cat([center_feed, out["t_per_slice"]])

    metrics = StepMetrics(state.step, str(modality), float(loss.detach()),
                          float(teacher_entropy(targets, center, dcfg)), float(lr), float(lam))
    if not math.isfinite(metrics.loss):
        raise NonFiniteLossError(metrics)
    if record is not None:
        record.update({k: v.detach().clone() for k, v in out.items()})
        record["center"] = center.clone()

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if sched.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), sched.clip_grad)
    state.optimizer.step()
    ema_update(state.teacher, state.student, lam)
    state.center = update_center(center, center_feed, dcfg.omega)
    state.step += 1
    state.data_cursor += 1
    return state, metrics


class CollapseMonitor:
    """Warns once teacher entropy stays below ``ratio * log K`` for ``patience`` consecutive steps."""

    def __init__(self, k: int, ratio: float = 0.1, patience: int = 50):
        self.threshold = ratio * math.log(k)
        self.patience = patience
        self.run = 0
        self.fired = False

    def update(self, m: StepMetrics) -> bool:
        self.run = self.run + 1 if m.teacher_entropy < self.threshold else 0
        if self.run >= self.patience and not self.fired:
            self.fired = True
            log.warning("collapse alarm: teacher entropy below %.3f for %d steps (step %d)",
                        self.threshold, self.run, m.step)
        return self.run >= self.patience


@dataclass
class PretrainResult:
    out_dir: Path
    final_checkpoint: Path
    backbone: Path
    metrics: list[StepMetrics] = field(default_factory=list)
    wall_time: float = 0.0
    collapse_alarm: bool = False


def pretrain(cfg: FullConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
             stop_at: int | None = None, pools: PretrainPools | None = None) -> PretrainResult:
    """Run ``total_steps`` of ``train_step`` under the alternation schedule.

    Checkpoints every ``run.checkpoint_every`` steps (``last.ckpt`` always points at
    the newest); ``stop_at`` ends the run early, as an interruption would.
    """
    cfg.validate()
    out_dir = Path(cfg.run.out_dir if out_dir is None else out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = serialize_config(cfg)
    (out_dir / "config.txt").write_text(config_text)
    sched = cfg.schedule
    run_seed = cfg.run.seed

    state = restore_state(cfg, resume) if resume is not None else build_state(cfg)
    metrics_log = MetricsLog(out_dir / "metrics.jsonl", truncate_from_step=state.step if resume else None)
    pools = build_pools(cfg.data, run_seed) if pools is None else pools
    monitor = CollapseMonitor(cfg.projector.output_dim)
    end = sched.total_steps if stop_at is None else min(stop_at, sched.total_steps)
    last: StepMetrics | None = None
    t0 = time.perf_counter()

    def write(name: str) -> Path:
        path = ckpt.save_checkpoint(out_dir / name, state, config_text)
        ckpt.save_checkpoint(out_dir / "last.ckpt", state, config_text)
        return path

    while state.step < end:
        modality = modality_for_step(state.step, sched.interval)
        batch = sample_batch(pools, state.data_cursor, modality, cfg, run_seed)
        try:
            state, m = train_step(state, batch, modality, cfg)
        except NonFiniteLossError as err:
            err.last_metrics = last
            dump = {"failed": err.metrics.to_record(), "last": last.to_record() if last else None}
            (out_dir / "diagnostic.json").write_text(json.dumps(dump, indent=2))
            raise
        metrics_log.append(m)
        monitor.update(m)
        last = m
        if state.step % cfg.run.checkpoint_every == 0 and state.step < sched.total_steps:
            write(f"step_{state.step:06d}.ckpt")
        if state.step % 100 == 0:
            log.info("step %d/%d %s loss %.4f entropy %.3f lr %.2e", state.step, sched.total_steps,
                     m.modality, m.loss, m.teacher_entropy, m.lr)

    wall = time.perf_counter() - t0
    info_path = out_dir / "run_info.json"
    if resume is not None and info_path.exists():
        wall += json.loads(info_path.read_text()).get("wall_time", 0.0)
    info_path.write_text(json.dumps({"wall_time": wall, "steps": state.step, "collapse_alarm": monitor.fired}))
    final = write("final.ckpt") if state.step >= sched.total_steps else write(f"step_{state.step:06d}.ckpt")
    backbone = ckpt.save_backbone(out_dir / "backbone.mit", state.teacher.backbone, config_text)
    history = read_metrics(out_dir / "metrics.jsonl")
    export_columns(history, out_dir / "metrics.csv")
    return PretrainResult(out_dir, final, backbone, history, wall, monitor.fired)
