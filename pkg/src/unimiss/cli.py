"""Command line: ``gen-data``, ``pretrain``, ``finetune`` and ``eval``.

Exit codes: 0 success, 2 config error, 3 non-finite loss, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import LABEL_FRACTIONS, TASK_KINDS, ConfigError, describe_keys, parse_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("unimiss")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="sets run.seed and finetune.seed")
    return p


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (defaults):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="unimiss", description="Dimension-free self-distillation pretraining "
                                     "on synthetic 2D/3D phantoms.", epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    sub.add_parser("gen-data", parents=[common], epilog=epilog, formatter_class=fmt,
                   help="write the pretraining pools to the data cache")

    p = sub.add_parser("pretrain", parents=[common], epilog=epilog, formatter_class=fmt,
                       help="run self-distillation pretraining")
    p.add_argument("--resume", type=Path, help="run checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="end the run after this step")

    p = sub.add_parser("finetune", parents=[common], epilog=epilog, formatter_class=fmt,
                       help="fine-tune on a synthetic task and write an EvalReport")
    p.add_argument("--init", default="random", help="'random' or a backbone/run checkpoint path")
    p.add_argument("--task", choices=TASK_KINDS, required=True)
    p.add_argument("--label-fraction", type=float, choices=LABEL_FRACTIONS, default=0.2)
    p.add_argument("--seeds", help="comma-separated fine-tune seeds (default: finetune.seed)")

    p = sub.add_parser("eval", help="print the method x label-fraction table of a report directory")
    p.add_argument("report_dir", type=Path)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"finetune.seed={args.seed}"]
    return parse_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .data import cache_dir, write_pool_cache

    cfg = _config(args)
    root = args.out or cache_dir()
    if root is None:
        raise ConfigError("--out", "give --out or set UNIMISS_CACHE")
    counts = write_pool_cache(root, cfg.data, cfg.run.seed)
    print(f"wrote {counts['2d']} 2D and {counts['3d']} 3D samples to {root}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .engine import pretrain

    cfg = _config(args)
    res = pretrain(cfg, args.out, resume=args.resume, stop_at=args.stop_at)
    tail = res.metrics[-200:]
    mean_h = sum(m.teacher_entropy for m in tail) / max(len(tail), 1)
    print(f"steps {len(res.metrics)}  wall {res.wall_time:.1f}s  last-200 teacher entropy {mean_h:.3f}"
          f"{'  COLLAPSE ALARM' if res.collapse_alarm else ''}")
    print(f"checkpoint {res.final_checkpoint}\nbackbone {res.backbone}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .experiments import run_seeds

    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.finetune.seed]
    if args.init != "random" and not Path(args.init).exists():
        raise FileNotFoundError(args.init)
    report = run_seeds(cfg, args.task, args.init, seeds, args.label_fraction)
    out = args.out or Path("runs/reports")
    method = "random" if args.init == "random" else Path(args.init).stem
    name = f"{args.task}_{method}_{int(round(100 * args.label_fraction))}.json"
    report.save(out / name)
    print(f"{args.task} {report.metric} {report.value:.4f} over seeds {report.seeds} -> {out / name}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .downstream import EvalReport
    from .experiments import report_table

    files = sorted(Path(args.report_dir).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no reports in {args.report_dir}")
    print(report_table([EvalReport.load(f) for f in files]))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None) -> int:
    from .checkpoint import CheckpointError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
