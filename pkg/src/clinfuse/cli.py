"""Command-line entry point: ``clinfuse <subcommand> [--seed N] [--config FILE] [--out PATH]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides
from .data_synth import generate_cohort, read_pgm, save_dataset, write_pgm
from .errors import CheckpointMismatchError, ConfigError, DatasetError, NonFiniteError
from .pipeline import emit_report, load_run_metrics, run_ablation, run_experiment
from .preprocess import ClaheParams, clahe
from .robustness import DEFAULT_FRACTIONS, MODES, robustness_grid

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, help="sets the data, split and training seeds")
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. fusion.kind=lstm (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired cohort")
    _common(p, "dataset directory")
    p.add_argument("--n-patients", type=int)
    p.add_argument("--pairing-rate", type=float)
    p.add_argument("--task", choices=["mortality", "phenotyping"])

    for name, text in (("pretrain", "pretrain the encoders"), ("finetune", "pretrain (cached) and fine-tune"),
                       ("evaluate", "run or resume every stage and score the test split")):
        _common(sub.add_parser(name, help=text), "run directory")

    p = sub.add_parser("ablate", help="run the ablation table")
    _common(p, "ablation directory")
    p.add_argument("--rows", nargs="+", help="subset of row names")

    p = sub.add_parser("robustness", help="noise-injection grid")
    _common(p, "grid directory")
    p.add_argument("--fractions", type=float, nargs="+", default=list(DEFAULT_FRACTIONS))
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--models", nargs="+", default=["attention", "lstm"])
    p.add_argument("--additive", action="store_true", help="add zero-mean noise instead of replacing values")

    p = sub.add_parser("report", help="tabulate finished runs")
    _common(p, "report directory")
    p.add_argument("runs", nargs="+", type=Path, help="run directories holding metrics.json")
    p.add_argument("--title", default="Results")

    p = sub.add_parser("clahe", help="contrast-limited adaptive equalisation of a PGM image")
    _common(p, "output PGM")
    p.add_argument("input", type=Path)
    p.add_argument("--tiles", type=int, nargs=2, default=[8, 8], metavar=("ROWS", "COLS"))
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--backend", choices=["cython", "python"])
    return parser


def load_config(args) -> ExperimentConfig:
    raw = json.loads(args.config.read_text()) if args.config else ExperimentConfig().to_dict()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"seeds.data={args.seed}", f"seeds.split={args.seed}", f"seeds.train={args.seed}"]
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides)).validate()


def _print_headline(name, rep) -> None:
    h = rep.headline()
    print(f"{name}: " + "  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in h.items()))


def cmd_synth(args) -> int:
    cfg = load_config(args)
    synth = cfg.synth_config()
    if args.n_patients is not None:
        synth.n_patients = args.n_patients
    if args.pairing_rate is not None:
        synth.pairing_rate = args.pairing_rate
    if args.task is not None:
        synth.task = args.task
    synth.validate()
    out = args.out or Path("data/synth")
    records = generate_cohort(synth, cfg.seeds.data)
    save_dataset(records, out, synth.task_spec(), seed=cfg.seeds.data, config=synth.to_dict())
    paired = sum(r.has_image for r in records)
    print(f"wrote {len(records)} records ({paired} with images) to {out}")
    return 0


def _run(args, stages) -> int:
    cfg = load_config(args)
    art = run_experiment(cfg, args.out, stages=stages)
    print(f"run {art.config_hash} in {art.out_dir}")
    if art.metrics is not None:
        _print_headline(cfg.name, art.metrics)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    res = run_ablation(cfg, args.out or Path(cfg.output_dir) / "ablation", rows=args.rows)
    print(res.files["txt"].read_text(), end="")
    failed = [n for n, a, _ in res.rows if a is None]
    if failed:
        print(f"failed rows: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def cmd_robustness(args) -> int:
    cfg = load_config(args)
    res = robustness_grid(cfg, args.out or Path(cfg.output_dir) / "robustness", args.fractions, args.modes,
                          args.models, noise_seed=cfg.seeds.data, additive=args.additive)
    for mode in args.modes:
        print(mode)
        print(res.files[f"{mode}_txt"].read_text())
    return 0


def cmd_report(args) -> int:
    rows = [load_run_metrics(r) for r in args.runs]
    files = emit_report(rows, args.out or Path("report"), title=args.title)
    print(files["txt"].read_text(), end="")
    return 0


def cmd_clahe(args) -> int:
    if args.out is None:
        raise ConfigError("--out", "an output path is required")
    params = ClaheParams(tuple(args.tiles), args.clip)
    write_pgm(args.out, clahe(read_pgm(args.input), params, backend=args.backend))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": lambda a: _run(a, ("pretrain",)),
    "finetune": lambda a: _run(a, ("pretrain", "finetune")),
    "evaluate": lambda a: _run(a, ("pretrain", "finetune", "evaluate")),
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "report": cmd_report,
    "clahe": cmd_clahe,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointMismatchError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
