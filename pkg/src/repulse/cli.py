"""Command-line experiment runner.

Subcommands map to the experiments in :mod:`repulse.experiments`:

    repulse toy-bimodal  [--config cfg.yaml] [--out DIR] [--seeds N] ...
    repulse gamma-sweep  ...
    repulse invert       ...            (conjugate task by default; set
                                         `preset: inverse_coverage` or
                                         `inverse_rho_sweep` in the config)
    repulse compare      ...
    repulse bw-flow      ...
    repulse report DIR                  (summarize a finished run)

Flags override the config: --seed-base/--seeds reshape the seed list,
--deterministic forces single-threaded execution, --out redirects output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from .experiments import merge_config, preset_config, run_experiment

_SUBCOMMANDS = {
    "toy-bimodal": "toy_bimodal",
    "gamma-sweep": "gamma_sweep",
    "invert": "inverse_task",
    "compare": "sampler_compare",
    "bw-flow": "bw_flow",
}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        loaded = yaml.safe_load(fh)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise SystemExit(f"config {path} must be a mapping")
    return loaded


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repulse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in _SUBCOMMANDS:
        p = sub.add_parser(cmd, help=f"run the {_SUBCOMMANDS[cmd]} experiment")
        p.add_argument("--config", type=str, default=None, help="YAML config merged over the preset")
        p.add_argument("--seed-base", type=int, default=None, help="first seed")
        p.add_argument("--seeds", type=int, default=None, help="number of seeds")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
        p.add_argument("--out", type=str, default=None, help="output directory")
    rp = sub.add_parser("report", help="summarize a finished run directory")
    rp.add_argument("directory", type=str)
    return parser


def _report(directory: str) -> None:
    path = os.path.join(directory, "record.json")
    if not os.path.exists(path):
        raise SystemExit(f"no record.json under {directory}")
    with open(path) as fh:
        record = json.load(fh)
    print(f"experiment:   {record['experiment']}")
    print(f"config hash:  {record['config_hash']}")
    print(f"backend:      {record['backend']}")
    print(f"wall time:    {record['wall_time_s']:.2f} s")
    print(f"seeds:        {len(record['per_seed'])} rows")
    print("aggregate:")
    print(json.dumps(record["aggregate"], indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "report":
        _report(args.directory)
        return 0

    user = _load_config(args.config)
    preset_name = user.pop("preset", _SUBCOMMANDS[args.command])
    config = merge_config(preset_config(preset_name), user)
    if args.seed_base is not None or args.seeds is not None:
        seeds = config["seeds"] if isinstance(config["seeds"], dict) else {"base": config["seeds"][0], "count": len(config["seeds"])}
        base = args.seed_base if args.seed_base is not None else seeds.get("base", 0)
        count = args.seeds if args.seeds is not None else seeds.get("count", 1)
        config["seeds"] = {"base": int(base), "count": int(count)}
    if args.deterministic:
        config["deterministic"] = True
    if args.out is not None:
        config["output_dir"] = args.out

    record = run_experiment(config)
    print(f"[{record['experiment']}] done in {record['wall_time_s']:.2f} s "
          f"-> {config['output_dir']} (config {record['config_hash']}, backend {record['backend']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
