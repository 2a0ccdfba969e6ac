#!/usr/bin/env python3
"""Command line argument parsing and configuration building."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from config import (
    CentralConfig,
    EdgeConfig,
    Experiment,
    ExperimentConfig,
    FederatedConfig,
    FleetConfig,
)
from errors import UnknownPresetError
from logging_utils import Logger
from netlink import get_preset, load_presets
from security import SecurityValidator

# Exit codes
EXIT_MISSING_ARGUMENTS = 2
EXIT_UNKNOWN_PRESET = 20
EXIT_UNKNOWN_EXPERIMENT = 21

COMMANDS: Dict[str, Dict[str, Experiment]] = {
    "bench": {
        "rtt": Experiment.RTT,
        "throughput": Experiment.THROUGHPUT,
        "stability": Experiment.STABILITY,
    },
    "experiment": {
        "ids-compare": Experiment.IDS_COMPARE,
        "fl-pools": Experiment.FL_POOLS,
    },
    "scenario": {
        "response": Experiment.RESPONSE_SCENARIO,
    },
}

SECTIONS = {
    "fleet": FleetConfig,
    "federated": FederatedConfig,
    "central": CentralConfig,
    "edge": EdgeConfig,
}

TOP_LEVEL_KEYS = (
    "presets",
    "payload_sizes",
    "trials",
    "seed",
    "seeds",
    "duration_s",
    "output_dir",
    "presets_file",
    "rules_file",
)


def _create_argument_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    parser = argparse.ArgumentParser(
        description="Simulate vehicle SOAR over charging-point edges and benchmark it",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s bench rtt --preset EVSOAR-PLC100M,VSOC-5G --trials 101
  %(prog)s bench stability --preset EVSOAR-PLC100M --duration 300
  %(prog)s experiment ids-compare --config configs/ids-compare.yaml --seeds 5
  %(prog)s experiment fl-pools --seed 7 --out results/fl
  %(prog)s scenario response --preset EVSOAR-PLC100M,VSOC-5G,VSOC-4G
        """,
    )
    return parser


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    """Add flags shared by every subcommand."""
    parser.add_argument(
        "target",
        help="What to run under this command",
    )
    parser.add_argument(
        "--config",
        dest="config_file",
        help="YAML experiment configuration; flags override its values",
    )
    parser.add_argument(
        "--seed",
        dest="seed",
        type=int,
        help="Base random seed (default: 0)",
    )
    parser.add_argument(
        "--seeds",
        dest="seeds",
        type=int,
        help="Number of consecutive seeds to run (default: 1)",
    )
    parser.add_argument(
        "--out",
        dest="output_dir",
        help="Directory for CSV reports (default: results)",
    )
    parser.add_argument(
        "--preset",
        dest="presets",
        help="Comma-separated link preset names (default: every preset)",
    )
    parser.add_argument(
        "--presets-file",
        dest="presets_file",
        help="YAML link table replacing the shipped presets.yaml",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        dest="verbose",
        help="Log every simulated session event",
    )


def _add_bench_arguments(parser: argparse.ArgumentParser) -> None:
    """Add link benchmark arguments to parser."""
    parser.add_argument(
        "--sizes",
        dest="payload_sizes",
        help="Comma-separated payload sizes in bytes for rtt/throughput",
    )
    parser.add_argument(
        "--trials",
        dest="trials",
        type=int,
        help="Trials per (preset, size) point (default: 101)",
    )
    parser.add_argument(
        "--duration",
        dest="duration_s",
        type=int,
        help="Stability series length in seconds (default: 300)",
    )


def _add_scenario_arguments(parser: argparse.ArgumentParser) -> None:
    """Add edge arguments to parser."""
    parser.add_argument(
        "--rules",
        dest="rules_file",
        help="YAML edge rule set replacing the shipped rules.yaml",
    )


def _add_experiment_arguments(parser: argparse.ArgumentParser) -> None:
    """Add federated pooling arguments to parser."""
    parser.add_argument(
        "--no-mix",
        action="store_true",
        dest="no_mix",
        help="Disable mixed-OEM pooling at the central",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = _create_argument_parser()
    commands = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = commands.add_parser(
            command, help=f"{command} targets: {', '.join(COMMANDS[command])}"
        )
        _add_common_arguments(sub)
        if command == "bench":
            _add_bench_arguments(sub)
        elif command == "experiment":
            _add_experiment_arguments(sub)
        else:
            _add_scenario_arguments(sub)
    return parser


def _resolve_experiment(command: str, target: str) -> Experiment:
    experiment = COMMANDS[command].get(target)
    if experiment is None:
        Logger.error(
            f"unknown {command} target '{target}' "
            f"(known: {', '.join(COMMANDS[command])})"
        )
        sys.exit(EXIT_UNKNOWN_EXPERIMENT)
    return experiment


def load_config_file(path: str) -> Dict[str, Any]:
    validated = SecurityValidator.validate_file_path(path)
    with open(validated, encoding="utf-8") as handle:
        document = yaml.safe_load(handle) or {}
    if not isinstance(document, dict):
        raise ValueError(f"{validated}: top level must be a mapping")
    return document


def _section(cls, values: Optional[Dict[str, Any]]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    if "layer_sizes" in values:
        values["layer_sizes"] = tuple(int(n) for n in values["layer_sizes"])
    return cls(**values)


def build_experiment_config(
    experiment: Experiment, document: Dict[str, Any], overrides: Dict[str, Any]
) -> ExperimentConfig:
    """Merge file values and command-line overrides into an ExperimentConfig."""
    allowed = set(TOP_LEVEL_KEYS) | set(SECTIONS)
    unknown = sorted(set(document) - allowed)
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")

    top = {key: document[key] for key in TOP_LEVEL_KEYS if key in document}
    top.update({k: v for k, v in overrides.items() if v is not None})
    sections = {
        name: _section(cls, document.get(name)) for name, cls in SECTIONS.items()
    }
    return ExperimentConfig(experiment=experiment, **top, **sections)


def _parse_int_list(raw: str) -> List[int]:
    values = [int(part) for part in raw.split(",") if part.strip()]
    if not values:
        raise ValueError("empty size list")
    return values


def _validate_parsed_arguments(args) -> Tuple[Experiment, Dict[str, Any]]:
    """Validate and sanitize parsed arguments."""
    experiment = _resolve_experiment(args.command, args.target)
    try:
        overrides: Dict[str, Any] = {
            "seed": args.seed,
            "seeds": args.seeds,
            "output_dir": args.output_dir,
            "presets_file": args.presets_file,
        }
        if args.seed is not None:
            SecurityValidator.validate_seed(args.seed)
        if args.seeds is not None and not 1 <= args.seeds <= 1000:
            raise ValueError("seeds must be between 1 and 1000")
        if args.output_dir:
            overrides["output_dir"] = SecurityValidator.validate_file_path(
                args.output_dir
            )
        if args.presets:
            overrides["presets"] = SecurityValidator.validate_preset_list(args.presets)
        if args.command == "bench":
            if args.payload_sizes:
                sizes = _parse_int_list(args.payload_sizes)
                if min(sizes) < 1:
                    raise ValueError("payload sizes must be >= 1 byte")
                overrides["payload_sizes"] = sizes
            overrides["trials"] = args.trials
            overrides["duration_s"] = args.duration_s
        elif args.command == "scenario":
            overrides["rules_file"] = args.rules_file

        Logger.security_event(
            "CONFIG_VALIDATION", "successfully validated all configuration inputs"
        )
        return experiment, overrides

    except ValueError as e:
        Logger.security_event(
            "CONFIG_VALIDATION_FAILED", f"configuration validation failed: {e}"
        )
        Logger.error(f"configuration validation error: {e}")
        sys.exit(EXIT_MISSING_ARGUMENTS)


def _check_presets(cfg: ExperimentConfig) -> None:
    """Every named preset must exist in the active link table."""
    try:
        table = load_presets(cfg.presets_file)
        for name in cfg.presets:
            get_preset(name, table)
    except UnknownPresetError as e:
        Logger.error(f"error: {e}")
        sys.exit(EXIT_UNKNOWN_PRESET)


def parse_arguments(argv: Optional[Sequence[str]] = None) -> ExperimentConfig:
    """Parse command line arguments and return configuration object."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    Logger.set_verbose(args.verbose)

    experiment, overrides = _validate_parsed_arguments(args)
    try:
        document = load_config_file(args.config_file) if args.config_file else {}
        cfg = build_experiment_config(experiment, document, overrides)
        if args.command == "experiment" and args.no_mix:
            cfg.central.mix_pooling = False
    except (ValueError, TypeError, OSError, yaml.YAMLError) as e:
        Logger.security_event(
            "CONFIG_VALIDATION_FAILED", f"configuration file rejected: {e}"
        )
        Logger.error(f"configuration error: {e}")
        sys.exit(EXIT_MISSING_ARGUMENTS)

    _check_presets(cfg)
    return cfg
