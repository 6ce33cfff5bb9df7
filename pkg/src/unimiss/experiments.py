"""Random-init vs pretrained fine-tuning comparisons over seeds."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_backbone_state
from .config import FullConfig, MiTConfig, config_from_text
from .data import make_downstream_task
from .downstream import EvalReport, build_for_task, finetune


def checkpoint_mit_config(path: str | Path) -> MiTConfig:
    _, meta = load_backbone_state(path)
    return config_from_text(meta.get("mit_config") or meta["config"]).mit


def run_finetune(cfg: FullConfig, task: str, init: str | Path, seed: int,
                 label_fraction: float | None = None) -> EvalReport:
    """Fine-tune one model on a freshly generated task; the task data depends on ``seed`` too."""
    ft = dataclasses.replace(cfg.finetune, task=task, seed=seed,
                             init="random" if init in (None, "random") else str(init),
                             label_fraction=cfg.finetune.label_fraction if label_fraction is None else label_fraction)
    mit_cfg = cfg.mit if ft.init == "random" else checkpoint_mit_config(init)
    ds = make_downstream_task(task, ft.n_train, ft.n_test, seed, aug=cfg.augment, phantom=cfg.data.phantom)
    model = build_for_task(task, ds.n_classes, mit_cfg, None if ft.init == "random" else init, seed)
    _, report = finetune(model, ds, ft)
    return report


def run_seeds(cfg: FullConfig, task: str, init, seeds, label_fraction: float | None = None) -> EvalReport:
    return EvalReport.combine([run_finetune(cfg, task, init, s, label_fraction) for s in seeds])


@dataclass
class Comparison:
    task: str
    random: EvalReport
    pretrained: EvalReport

    @property
    def gap(self) -> float:
        return self.pretrained.value - self.random.value

    def line(self) -> str:
        scale = 100.0 if self.random.metric == "dice" else 1.0
        return (f"{self.task} {self.random.metric}: random {scale * self.random.value:.3f} "
                f"pretrained {scale * self.pretrained.value:.3f} gap {scale * self.gap:+.3f}")


def compare_inits(cfg: FullConfig, task: str, backbone: str | Path, seeds=(0, 1, 2),
                  label_fraction: float = 0.2) -> Comparison:
    return Comparison(task, run_seeds(cfg, task, "random", seeds, label_fraction),
                      run_seeds(cfg, task, backbone, seeds, label_fraction))


def report_table(reports: list[EvalReport]) -> str:
    """Method x label-fraction table per task; Dice in points, AUC as a fraction."""
    lines = []
    for task in sorted({r.task for r in reports}):
        rows = [r for r in reports if r.task == task]
        fracs = sorted({r.label_fraction for r in rows})
        metric = rows[0].metric
        scale = 100.0 if metric == "dice" else 1.0
        header = f"{task} ({metric})".ljust(22) + "".join(f"{int(round(100 * f))}%".rjust(18) for f in fracs)
        lines += [header, "-" * len(header)]
        for method in sorted({r.init for r in rows}):
            cells = []
            for f in fracs:
                match = [r for r in rows if r.init == method and r.label_fraction == f]
                if not match:
                    cells.append("-".rjust(18))
                    continue
                vals = scale * np.asarray([v for r in match for v in r.per_seed])
                cells.append(f"{vals.mean():.2f} ± {vals.std():.2f} (n={len(vals)})".rjust(18))
            lines.append(method.ljust(22) + "".join(cells))
        lines.append("")
    return "\n".join(lines)
