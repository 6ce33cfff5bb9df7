"""Line-delimited step metrics and the columnar export used for plotting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

COLUMNS = ("step", "loss", "teacher_entropy", "lr", "lambda")


@dataclass
class StepMetrics:
    step: int
    modality: str
    loss: float
    teacher_entropy: float
    lr: float
    lam: float

    def to_record(self) -> dict:
        # fixed field order; "lambda" is not a legal attribute name
        return {"step": self.step, "modality": self.modality, "loss": self.loss,
                "teacher_entropy": self.teacher_entropy, "lr": self.lr, "lambda": self.lam}

    @classmethod
    def from_record(cls, rec: dict) -> "StepMetrics":
        return cls(int(rec["step"]), rec["modality"], float(rec["loss"]), float(rec["teacher_entropy"]),
                   float(rec["lr"]), float(rec["lambda"]))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.loss, self.teacher_entropy, self.lr, self.lam))


RECORD_FIELDS = ("step", "modality", "loss", "teacher_entropy", "lr", "lambda")


class MetricsLog:
    """Append-only JSON-lines sink, one record per step."""

    def __init__(self, path: str | Path, truncate_from_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_from_step is not None and self.path.exists():
            kept = [m for m in read_metrics(self.path) if m.step < truncate_from_step]
            write_metrics(kept, self.path)
        elif truncate_from_step is None:
            self.path.write_text("")

    def append(self, m: StepMetrics) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(m.to_record()) + "\n")


def write_metrics(stream: Iterable[StepMetrics], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for m in stream:
            fh.write(json.dumps(m.to_record()) + "\n")
    return path


def read_metrics(path: str | Path) -> list[StepMetrics]:
    with Path(path).open() as fh:
        return [StepMetrics.from_record(json.loads(line)) for line in fh if line.strip()]


def export_columns(stream: Iterable[StepMetrics], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for m in stream:
            rec = m.to_record()
            w.writerow([repr(rec[c]) if isinstance(rec[c], float) else rec[c] for c in COLUMNS])
    return path


def emit_metrics(stream: Iterable[StepMetrics], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``metrics.jsonl`` and ``metrics.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = list(stream)
    return write_metrics(items, out_dir / "metrics.jsonl"), export_columns(items, out_dir / "metrics.csv")
