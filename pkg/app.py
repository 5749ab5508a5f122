"""
DC-SMC - Main Application
-------------------------
Command-line entry point. The model verbs (ising, gsm, hier) run an
experiment from a config file; the worker verb serves distributed tasks.

    python app.py ising --config runs/ising.ini --seed 7 --out results/ising
    python app.py worker --bind tcp://0.0.0.0:5570
"""

import argparse
import sys

from components.experiment_runner import ExperimentConfig, apply_cli_overrides, load_config, run_experiment
from components.worker_console import run_worker
from config.constants import APP_NAME, APP_TAGLINE, MESSAGES
from services.errors import DcSmcError
from services.model_factory import ModelConfig
from utils.logger import dcsmc_logger

MODEL_VERBS = ("ising", "gsm", "hier")


def build_parser():
    parser = argparse.ArgumentParser(prog=APP_NAME, description=APP_TAGLINE)
    verbs = parser.add_subparsers(dest="verb", required=True)

    for verb in MODEL_VERBS:
        sub = verbs.add_parser(verb, help=f"run a {verb} experiment")
        sub.add_argument("--config", help="experiment config file (INI sections)")
        sub.add_argument("--seed", type=int, help="master seed, overrides the config")
        sub.add_argument("--out", help="output directory, overrides the config")
        sub.add_argument("--workers", help="worker roster host:port,host:port")
        sub.add_argument("--transport", choices=("inprocess", "socket"),
                         help="distributed transport; inprocess runs local worker threads")
        sub.add_argument("--workers-count", type=int, help="number of in-process workers")

    worker = verbs.add_parser("worker", help="serve distributed tasks")
    worker.add_argument("--bind", help="listen address (defaults to DCSMC_BIND)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    if args.verb == "worker":
        run_worker(args.bind)
        return 0

    try:
        config = load_config(args.config) if args.config else ExperimentConfig(model=ModelConfig(kind=args.verb))
        config = apply_cli_overrides(
            config, args.verb,
            seed=args.seed, out=args.out, workers=args.workers,
            transport=args.transport, workers_count=args.workers_count,
        )
        if not config.distributed and (args.transport or args.workers):
            dcsmc_logger.warning(MESSAGES["NO_ROSTER"])
        result = run_experiment(config)
    except DcSmcError as e:
        dcsmc_logger.error(f"❌ {e}")
        return 2
    except Exception as e:
        dcsmc_logger.error(f"❌ Unexpected error: {e!r}")
        return 1

    if result["error"]:
        dcsmc_logger.error(f"❌ {result['error']}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
