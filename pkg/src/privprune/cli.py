"""Command-line entry point.

Subcommands map onto the staged pipeline: `train` runs through defended
training, `prune` through surgery, `attack` through reconstruction, and
`evaluate` through metric reports. `report` aggregates completed runs into
comparison tables/plots and `sweep` expands value grids over a base config.
All randomness is controlled by the config's seed list; set
PRIVPRUNE_OUTPUT_ROOT to redirect artifact output.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from .config import config_from_dict, load_config
from .errors import ConfigurationError
from .experiment import output_root, run_experiment
from .report import emit_report, load_records


def _add_config_arg(parser):
    parser.add_argument("config", help="path to a YAML experiment config")
    parser.add_argument("--force", action="store_true",
                        help="recompute stages even if the ledger marks them done")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privprune",
        description="Privacy-oriented pruning for split inference: train, prune, "
                    "attack and evaluate defenses.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, stage, desc in (
            ("train", "train", "pretrain the backbone and run defended training"),
            ("prune", "prune", "run stages through pruning surgery"),
            ("attack", "attack", "run stages through inversion attacks"),
            ("evaluate", "evaluate", "run the full pipeline through metric reports")):
        p = sub.add_parser(name, help=desc)
        _add_config_arg(p)
        p.set_defaults(stage=stage)

    p = sub.add_parser("report", help="aggregate completed runs into comparison tables")
    p.add_argument("run_dirs", nargs="+", help="run directories containing record.json")
    p.add_argument("--out", default="report", help="output directory for tables/plots")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("sweep", help="expand value grids over a base config and run all")
    _add_config_arg(p)
    p.add_argument("--set", dest="grid", action="append", default=[],
                   metavar="KEY=V1,V2,...",
                   help="dotted config key and comma-separated values, e.g. "
                        "defense.strength=0,0.5,1")
    p.add_argument("--out", default=None, help="directory for the combined report")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_key(data: dict, dotted: str, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def _expand_grid(base: dict, grid_args):
    combos = [dict()]
    for item in grid_args:
        if "=" not in item:
            raise ConfigurationError(f"bad --set {item!r}; expected KEY=V1,V2,...")
        key, _, values = item.partition("=")
        parsed = [_parse_value(v) for v in values.split(",")]
        combos = [dict(c, **{key: v}) for c in combos for v in parsed]
    configs = []
    for combo in combos:
        data = copy.deepcopy(base)
        for key, value in combo.items():
            _set_key(data, key, value)
        configs.append(config_from_dict(data))
    return configs


def _run_stage(args) -> int:
    config = load_config(args.config)
    records = run_experiment(config, until_stage=args.stage, force=args.force)
    failed = [r for r in records if r.status.startswith("failed")]
    for record in records:
        print(f"seed {record.seed}: {record.status}  -> {record.run_dir}")
        if record.error:
            print(f"  {record.error}", file=sys.stderr)
    return 1 if failed else 0


def _run_report(args) -> int:
    records = load_records(args.run_dirs)
    rows = emit_report(records, args.out, plots=not args.no_plots)
    print(f"wrote {len(rows)} comparison rows to {args.out}/comparison.csv")
    return 0


def _run_sweep(args) -> int:
    with open(args.config) as f:
        import yaml
        base = yaml.safe_load(f) or {}
    configs = _expand_grid(base, args.grid)
    all_records = []
    status = 0
    for config in configs:
        records = run_experiment(config, force=args.force)
        for record in records:
            print(f"[{config.hash}] seed {record.seed}: {record.status}")
            if record.status.startswith("failed"):
                status = 1
                if record.error:
                    print(f"  {record.error}", file=sys.stderr)
        all_records.extend(r for r in records if r.status == "completed")
    if all_records:
        out = args.out or (output_root(configs[0]) / "sweep-report")
        emit_report(all_records, out)
        print(f"combined report in {out}")
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _run_report(args)
        if args.command == "sweep":
            return _run_sweep(args)
        return _run_stage(args)
    except ConfigurationError as exc:
        print(f"[config] error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"[{getattr(args, 'command', '?')}] error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
