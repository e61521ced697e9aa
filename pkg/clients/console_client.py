#!/usr/bin/env python3
"""
Console client for the federated eye-state simulator
Provides the generate / run / sweep / compare commands
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.config_loader import load_experiment_config, load_sweep_spec
from src.errors import ConfigError, FedSupError
from src.models import SyntheticBlinkSpec
from src.presets import PresetLoader
from src.result_cache import ResultCache
from src.settings import FedSupSettings
from clients.shared.experiment_operations import (
    compare_run_dirs,
    generate_dataset,
    run_experiment,
    run_sweep,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "checkpoint_every", None) is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    return overrides


def _format_stat(value, spec: str = ".4f") -> str:
    return "n/a" if value is None else format(value, spec)


def handle_generate(args, settings: FedSupSettings) -> int:
    try:
        spec = SyntheticBlinkSpec(
            image_size=(args.size, args.size),
            num_samples=args.samples,
            noise_std=args.noise,
            jitter_px=args.jitter,
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError("Invalid generator settings", [str(e)]) from e
    print(generate_dataset(spec, args.out))
    return EXIT_OK


def handle_run(args, settings: FedSupSettings) -> int:
    loader = PresetLoader(settings.presets_path)
    config = load_experiment_config(args.config, loader, _overrides(args))
    out_root = args.out or settings.out
    document = run_experiment(config, out_root, jobs=args.jobs)
    stats = document["aggregate"]
    print(f"{config.name}: {stats['runs']} run(s) written to {Path(out_root) / config.name}")
    print(f"  best accuracy  {_format_stat(stats['best_accuracy_mean'])} ({_format_stat(stats['best_accuracy_std'])})")
    print(f"  rounds to {config.target_accuracy:.2f}  {_format_stat(stats['rounds_mean'], '.1f')} "
          f"({_format_stat(stats['rounds_std'], '.1f')}), reached in {stats['reached']}/{stats['runs']}")
    print(f"  upload ratio   {_format_stat(stats['upload_ratio_mean'])}")
    return EXIT_OK


def handle_sweep(args, settings: FedSupSettings) -> int:
    loader = PresetLoader(settings.presets_path)
    spec = load_sweep_spec(args.config, loader, _overrides(args))
    cache_path = args.cache or settings.cache_path
    cache = ResultCache(cache_path) if cache_path else None
    rows = run_sweep(spec, args.out or settings.out, jobs=args.jobs, cache=cache)
    for row in rows:
        print(f"{row['axis']}={row['value']}: best accuracy {_format_stat(row.get('best_accuracy_mean'))}, "
              f"rounds {_format_stat(row.get('rounds_mean'), '.1f')}, failed {row['failed']}")
    return EXIT_FAILURE if any(row["failed"] for row in rows) else EXIT_OK


def handle_compare(args, settings: FedSupSettings) -> int:
    out_dir = args.out or str(Path(args.baseline).parent / f"compare_{Path(args.baseline).name}")
    document = compare_run_dirs(args.baseline, args.candidates, out_dir)
    for name, report in document["candidates"].items():
        reduction = report["round_reduction"]
        print(f"{name} vs {document['baseline']}: round reduction "
              f"{'n/a' if reduction is None else f'{reduction:.1%}'} ({report['reduction_bound']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Uncertainty-aware hierarchical federated learning simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    python -m clients.console_client generate --samples 2500 --seed 0 --out data/eyes.fsds
    python -m clients.console_client run --config configs/desk_uwaa.cfg --jobs 4
    python -m clients.console_client sweep --config configs/sweep_epsilon.cfg --cache runs/cache.db
    python -m clients.console_client compare runs/desk-fedavg runs/desk-uwaa
        """
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Write a synthetic eye-state dataset")
    generate.add_argument("--samples", type=int, default=2500)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--size", type=int, default=24, help="Image height and width")
    generate.add_argument("--noise", type=float, default=0.15)
    generate.add_argument("--jitter", type=int, default=2)
    generate.add_argument("--out", required=True, help="Dataset file to write")

    for name, help_text in (("run", "Run every seed of a config"), ("sweep", "Run a one-axis parameter sweep")):
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="Flat key = value config file")
        command.add_argument("--seed", type=int, help="Run this seed only")
        command.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")
        command.add_argument("--out", help="Output root (default: FEDSUP_OUT or runs)")
        if name == "run":
            command.add_argument("--checkpoint-every", type=int, help="Save ω^C every N rounds")
        else:
            command.add_argument("--cache", help="SQLite cache of finished cells")

    compare = commands.add_parser("compare", help="Compare run sets against a baseline")
    compare.add_argument("baseline", help="Baseline run directory")
    compare.add_argument("candidates", nargs="+", help="Candidate run directories")
    compare.add_argument("--out", help="Directory for comparison.json and plot CSVs")
    return parser


HANDLERS = {
    "generate": handle_generate,
    "run": handle_run,
    "sweep": handle_sweep,
    "compare": handle_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    load_dotenv()
    settings = FedSupSettings()
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "jobs", 1) < 1:
        print("Error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        return HANDLERS[args.command](args, settings)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FedSupError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
