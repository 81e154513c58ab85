"""Entry point: `python -m physics_worker [--config worker.json]`."""

import argparse

from .config import WorkerConfig, load_config
from .protocol import Server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="physics-worker")
    parser.add_argument("--config", help="worker config file (JSON)")
    args = parser.parse_args(argv)
    config = load_config(args.config) if args.config else WorkerConfig()
    Server(config).serve()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
