"""Fine-tuning heads, Dice/AUC metrics and the random-vs-pretrained harness."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import CheckpointError, load_backbone_state
from .config import ConfigError, FinetuneConfig, MiTConfig, config_from_text
from .data import TaskDataset
from .mit import DimTag, MiT


class Classifier(nn.Module):
    """MiT encoder with a fully connected layer on the final SSL token."""

    def __init__(self, backbone: MiT, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.fc = nn.Linear(backbone.embed_dim, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.backbone(x))


class SegmentationHead(nn.Module):
    """Transpose conv back to input resolution, Conv-IN-LeakyReLU, then a 1-kernel conv."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.up_2d = nn.ConvTranspose2d(in_dim, in_dim, kernel_size=2, stride=2)
        self.up_3d = nn.ConvTranspose3d(in_dim, in_dim, kernel_size=2, stride=2)
        self.conv_2d = nn.Conv2d(in_dim, in_dim, kernel_size=3, padding=1)
        self.conv_3d = nn.Conv3d(in_dim, in_dim, kernel_size=3, padding=1)
        self.norm_2d = nn.InstanceNorm2d(in_dim, affine=True)
        self.norm_3d = nn.InstanceNorm3d(in_dim, affine=True)
        self.act = nn.LeakyReLU(0.01)
        self.out_2d = nn.Conv2d(in_dim, n_classes, kernel_size=1)
        self.out_3d = nn.Conv3d(in_dim, n_classes, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        s = "_2d" if DimTag.of(x) is DimTag.D2 else "_3d"
        x = getattr(self, "up" + s)(x)
        x = self.act(getattr(self, "norm" + s)(getattr(self, "conv" + s)(x)))
        return getattr(self, "out" + s)(x)


class Segmenter(nn.Module):
    def __init__(self, backbone: MiT, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = SegmentationHead(backbone.cfg.embed_dims[0], n_classes)

    def forward(self, x: Tensor) -> Tensor:
        stages, _ = self.backbone.encode(x)
        return self.head(self.backbone.decode(stages))


def _load_pretrained(backbone: MiT, init: str | Path) -> list[str]:
    """Copy every backbone parameter by name; returns the transferred names."""
    state, meta = load_backbone_state(init)
    src_mit = config_from_text(meta.get("mit_config") or meta["config"]).mit
    if src_mit != backbone.cfg:
        raise ConfigError("mit", f"checkpoint {init} was built with a different MiT config")
    own = backbone.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"{init}: parameter names do not match (missing {missing[:3]}, "
                              f"unexpected {unexpected[:3]})")
    backbone.load_state_dict(state, strict=True)
    return sorted(state)


def build_classifier(n_classes: int, mit_cfg: MiTConfig | None = None, init: str | Path | None = None,
                     seed: int = 0) -> Classifier:
    """``init`` is None / "random" for random init, else a ``mit-v1`` or run checkpoint path."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    torch.manual_seed(seed)
    model = Classifier(MiT(mit_cfg), n_classes)
    model.transferred = _load_pretrained(model.backbone, init) if init not in (None, "random") else []
    return model


def build_segmenter(n_classes: int, mit_cfg: MiTConfig | None = None, init: str | Path | None = None,
                    seed: int = 0) -> Segmenter:
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    torch.manual_seed(seed)
    model = Segmenter(MiT(mit_cfg), n_classes)
    model.transferred = _load_pretrained(model.backbone, init) if init not in (None, "random") else []
    return model


# ---------------------------------------------------------------------------
# metrics


def dice(pred, gt, n_classes: int) -> tuple[np.ndarray, float]:
    """Per-foreground-class Dice and their mean.

    A class absent from both maps scores 1, absent from exactly one scores 0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    scores = np.empty(n_classes - 1)
    for c in range(1, n_classes):
        p, g = pred == c, gt == c
        denom = p.sum() + g.sum()
        scores[c - 1] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom
    return scores, float(scores.mean())


def auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney), ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    seeds: list[int] = field(default_factory=list)
    per_seed: list[float] = field(default_factory=list)
    label_fraction: float = 1.0
    init: str = "random"

    @classmethod
    def combine(cls, reports: list["EvalReport"]) -> "EvalReport":
        first = reports[0]
        seeds = [s for r in reports for s in r.seeds]
        vals = [v for r in reports for v in r.per_seed]
        return cls(first.task, first.metric, float(np.mean(vals)), seeds, vals, first.label_fraction, first.init)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def select_labeled(n_train: int, fraction: float, seed: int) -> np.ndarray:
    k = math.ceil(round(fraction * n_train, 9))
    return np.sort(np.random.default_rng(seed).permutation(n_train)[:k])


def soft_dice_loss(logits: Tensor, target: Tensor, n_classes: int, eps: float = 1e-5) -> Tensor:
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps))[:, 1:].mean()


@torch.no_grad()
def predict(model: nn.Module, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    outs = [model(torch.from_numpy(x[i:i + batch_size])[:, None]) for i in range(0, len(x), batch_size)]
    model.train()
    return torch.cat(outs).numpy()


def evaluate(model: nn.Module, dataset: TaskDataset) -> float:
    logits = predict(model, dataset.test_x)
    if dataset.kind.startswith("seg"):
        pred = logits.argmax(axis=1)
        return float(np.mean([dice(p, g, dataset.n_classes)[1] for p, g in zip(pred, dataset.test_y)]))
    probs = torch.from_numpy(logits).softmax(dim=1)[:, 1].numpy()
    return auc(probs, dataset.test_y)


def finetune(model: nn.Module, dataset: TaskDataset, cfg: FinetuneConfig) -> tuple[nn.Module, EvalReport]:
    """Supervised training on the labeled fraction, then evaluation on the held-out split.

    Dice+CE for segmentation, CE for classification; all parameters are updated.
    """
    cfg.validate()
    is_seg = dataset.kind.startswith("seg")
    if is_seg != isinstance(model, Segmenter):
        raise ValueError(f"model head does not match task {dataset.kind}")
    idx = select_labeled(len(dataset.train_x), cfg.label_fraction, cfg.seed)
    x_all = torch.from_numpy(dataset.train_x[idx])[:, None]
    y_all = torch.from_numpy(dataset.train_y[idx])
    bs = cfg.batch_size_3d if dataset.dim_tag is DimTag.D3 else cfg.batch_size_2d
    rng = np.random.default_rng([cfg.seed, 1])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    for step in range(cfg.steps):
        b = rng.integers(0, len(idx), size=min(bs, len(idx)))
        x, y = x_all[b], y_all[b]
        logits = model(x)
        loss = F.cross_entropy(logits, y)
        if is_seg:
            loss = loss + soft_dice_loss(logits, y, dataset.n_classes)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite fine-tuning loss at step {step}: {float(loss)}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    value = evaluate(model, dataset)
    init = cfg.init if cfg.init == "random" else "pretrained"
    report = EvalReport(dataset.kind, "dice" if is_seg else "auc", value, [cfg.seed], [value],
                        cfg.label_fraction, init)
    return model, report


def build_for_task(kind: str, n_classes: int, mit_cfg: MiTConfig, init, seed: int) -> nn.Module:
    build = build_segmenter if kind.startswith("seg") else build_classifier
    return build(n_classes, mit_cfg, init, seed)
