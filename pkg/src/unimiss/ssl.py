"""Student-teacher self-distillation: projector, losses, centering and EMA."""
from __future__ import annotations

import math
import typing

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.parametrizations import weight_norm

from .config import DistillConfig, ProjectorConfig
from .mit import MiT, ShapeError


class Projector(nn.Module):
    """n-layer MLP head; the last layer is weight-normalized and emits K logits."""

    def __init__(self, in_dim: int, cfg: ProjectorConfig | None = None):
        super().__init__()
        cfg = ProjectorConfig() if cfg is None else cfg
        cfg.validate()
        self.cfg = cfg
        self.in_dim = in_dim
        layers: list[nn.Module] = []
        d = in_dim
        for _ in range(cfg.n_layers - 1):
            layers += [nn.Linear(d, cfg.hidden_dim), nn.GELU()]
            d = cfg.hidden_dim
        self.mlp = nn.Sequential(*layers)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self.last_layer = weight_norm(nn.Linear(d, cfg.output_dim, bias=False))
        w = self.last_layer.parametrizations.weight
        w.original0.data.fill_(1.0)
        if cfg.norm_last_layer:
            w.original0.requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"projector expects input dim {self.in_dim}, got {x.shape[-1]}")
        x = self.mlp(x)
        if self.cfg.l2_norm:
            x = F.normalize(x, dim=-1, p=2)
        return self.last_layer(x)


class SSLNet(nn.Module):
    """One path of the dual-path model: MiT backbone followed by the projector."""

    def __init__(self, backbone: MiT, projector: Projector):
        super().__init__()
        self.backbone = backbone
        self.projector = projector

    def forward(self, x: Tensor) -> Tensor:
        return self.projector(self.backbone(x))


def _check_logits(*tensors: Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite projector outputs passed to the distillation loss")


def distill_loss(f1: Tensor, f2: Tensor, center: Tensor, cfg: DistillConfig) -> Tensor:
    """Cross-entropy of the student softmax against the centered, sharpened teacher softmax.

    ``f1`` is the student output, ``f2`` the teacher output ([K] or [B, K]);
    ``f2`` is detached. Per-sample values are averaged over the batch.
    """
    if f1.shape[-1] != center.shape[-1] or f2.shape[-1] != center.shape[-1]:
        raise ShapeError(f"output dim mismatch: f1 {tuple(f1.shape)}, f2 {tuple(f2.shape)}, C {tuple(center.shape)}")
    _check_logits(f1, f2, center)
    target = F.softmax((f2.detach() - center) / cfg.tau_t, dim=-1)
    log_p = F.log_softmax(f1 / cfg.tau_s, dim=-1)
    return -(target * log_p).sum(dim=-1).mean()


def teacher_entropy(f2: Tensor, center: Tensor, cfg: DistillConfig) -> Tensor:
    """Mean entropy of the centered, sharpened teacher distribution."""
    logp = F.log_softmax((f2.detach() - center) / cfg.tau_t, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1).mean()


@torch.no_grad()
def update_center(center: Tensor, teacher_outputs: Tensor, omega: float) -> Tensor:
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"center rate must lie in [0, 1), got {omega}")
    if teacher_outputs.dim() != 2 or teacher_outputs.shape[0] == 0:
        raise ValueError("teacher outputs must be a non-empty [batch, K] array")
    return omega * center + (1.0 - omega) * teacher_outputs.mean(dim=0)


def _student_params(theta) -> list[Tensor]:
    return list(theta.parameters()) if isinstance(theta, nn.Module) else list(theta)


@torch.no_grad()
def ema_update(mu: nn.Module | typing.Iterable[Tensor], theta: nn.Module | typing.Iterable[Tensor], lam: float):
    """In-place ``mu <- lam * mu + (1 - lam) * theta`` over every parameter; returns ``mu``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {lam}")
    mu_params = _student_params(mu)
    theta_params = _student_params(theta)
    if len(mu_params) != len(theta_params):
        raise ShapeError(f"teacher has {len(mu_params)} parameter arrays, student {len(theta_params)}")
    for m, t in zip(mu_params, theta_params):
        if m.shape != t.shape:
            raise ShapeError(f"parameter shape mismatch {tuple(m.shape)} vs {tuple(t.shape)}")
    if lam == 1.0:
        return mu
    for m, t in zip(mu_params, theta_params):
        m.mul_(lam).add_(t.detach(), alpha=1.0 - lam)
    return mu


def slice_representation(net: nn.Module, volumes: Tensor, return_slices: bool = False):
    """Average projected output of every depth slice, each run through ``net`` in 2D mode.

    ``volumes`` is [B, C, m, H, W]; returns [B, K] (and the [B, m, K] per-slice outputs).
    """
    if volumes.dim() != 5:
        raise ShapeError(f"expected [B, C, D, H, W] volumes, got {tuple(volumes.shape)}")
    b, c, m, h, w = volumes.shape
    if m == 0:
        raise ShapeError("slice_representation needs at least one slice")
    slices = volumes.permute(0, 2, 1, 3, 4).reshape(b * m, c, h, w)
    out = net(slices).reshape(b, m, -1)
    rep = out.mean(dim=1)
    return (rep, out) if return_slices else rep


def loss_2d(student_f1: Tensor, student_f2: Tensor, teacher_f1: Tensor, teacher_f2: Tensor,
            center: Tensor, cfg: DistillConfig) -> Tensor:
    """Symmetrized loss: each student view against the teacher on the opposite view, averaged."""
    return 0.5 * (distill_loss(student_f1, teacher_f2, center, cfg)
                  + distill_loss(student_f2, teacher_f1, center, cfg))


def loss_3d(student_vol1: Tensor, student_sl1: Tensor, student_vol2: Tensor, student_sl2: Tensor,
            teacher_vol1: Tensor, teacher_sl1: Tensor, teacher_vol2: Tensor, teacher_sl2: Tensor,
            center: Tensor, cfg: DistillConfig, volume_slice: bool | None = None) -> Tensor:
    """Mean of the eight volume/slice cross terms (student first, opposite-view teacher second).

    With ``volume_slice`` False only the two volume-volume terms are kept.
    """
    volume_slice = cfg.volume_slice if volume_slice is None else volume_slice
    student = {1: (student_vol1, student_sl1), 2: (student_vol2, student_sl2)}
    teacher = {1: (teacher_vol1, teacher_sl1), 2: (teacher_vol2, teacher_sl2)}
    reps = (0, 1) if volume_slice else (0,)
    terms = []
    for s_view, t_view in ((1, 2), (2, 1)):
        for i in reps:
            for j in reps:
                terms.append(distill_loss(student[s_view][i], teacher[t_view][j], center, cfg))
    return torch.stack(terms).mean()


def init_center(k: int, dtype=torch.float32) -> Tensor:
    return torch.zeros(k, dtype=dtype)


def max_entropy(k: int) -> float:
    return math.log(k)
