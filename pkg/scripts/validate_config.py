#!/usr/bin/env python3
"""
Validate one or more run configuration files against the run config schema.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from src.occupancy.config import load_run_config
from src.occupancy.errors import ConfigInvalid


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Validate YAML run configs against the run config schema"
    )
    parser.add_argument("config_files", nargs="+", help="Run config YAML files")
    parser.add_argument(
        "--check-paths",
        action="store_true",
        help="Also require history_path (and gt/second paths) to exist",
    )
    args = parser.parse_args(argv)

    failures = 0
    for path in args.config_files:
        try:
            config = load_run_config(path)
        except ConfigInvalid as e:
            print(f"{path}: {e.one_line()}")
            failures += 1
            continue

        if args.check_paths:
            missing = [
                value
                for value in (
                    config.history_path,
                    config.gt_path,
                    config.second_path,
                )
                if value is not None and not Path(value).exists()
            ]
            if missing:
                print(f"{path}: missing inputs {', '.join(missing)}")
                failures += 1
                continue

        print(f"{path}: config validation passed")

    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
