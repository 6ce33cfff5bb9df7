"""Pretrain (or reuse) a full and a slice-ablated run, then compare inits on every task.

    python3 scripts/run_desk_experiments.py --root runs/desk --fractions 0.2
"""
from __future__ import annotations

import argparse
from pathlib import Path

from unimiss.config import LABEL_FRACTIONS, TASK_KINDS, parse_config, serialize_config
from unimiss.engine import pretrain
from unimiss.experiments import report_table, run_seeds


def pretrained(root: Path, name: str, overrides: list[str]) -> Path:
    cfg = parse_config(overrides=overrides)
    out = root / name
    config_file = out / "config.txt"
    if (out / "backbone.mit").exists() and config_file.exists() and config_file.read_text() == serialize_config(cfg):
        print(f"reusing {out}")
    else:
        res = pretrain(cfg, out)
        print(f"{name}: {len(res.metrics)} steps in {res.wall_time:.0f}s")
    return out / "backbone.mit"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", type=Path, default=Path("runs/desk"))
    p.add_argument("--tasks", default=",".join(TASK_KINDS))
    p.add_argument("--fractions", default="0.2", help=f"subset of {LABEL_FRACTIONS}")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--set", dest="overrides", action="append", default=[], help="fine-tune config overrides")
    args = p.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    full = pretrained(args.root, "full", [])
    ablated = pretrained(args.root, "no_slices", ["distill.volume_slice=false"])
    cfg = parse_config(overrides=args.overrides)

    reports = []
    for task in args.tasks.split(","):
        for frac in (float(f) for f in args.fractions.split(",")):
            for init in ("random", full) + ((ablated,) if task == "seg3d" else ()):
                rep = run_seeds(cfg, task, init, seeds, frac)
                if init == ablated:
                    rep.init = "pretrained (no slice terms)"
                rep.save(args.root / "reports" / f"{task}_{Path(str(init)).parent.name or init}_{round(100 * frac)}.json")
                reports.append(rep)
                print(f"{task} {frac:.0%} {rep.init}: {rep.value:.4f}")
    table = report_table(reports)
    (args.root / "table.txt").write_text(table)
    print(table)


if __name__ == "__main__":
    main()
