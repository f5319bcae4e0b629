"""Run every shipped config (or the ones named on the command line) and
print a status table.  Outputs land in out/<config name>/ under the cwd."""

import argparse
import sys
import time
from pathlib import Path

from fsdemc import cli, config

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="*", help="config files (default: all of configs/)")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    paths = [Path(p) for p in args.configs] or sorted((ROOT / "configs").glob("*.toml"))
    worst = 0
    for p in paths:
        cfg = config.load(p)
        cfg.sim.threads = args.threads
        t0 = time.perf_counter()
        rep = cli.run_experiment(cfg)
        statuses = " ".join(f"{k}={v['status']}" for k, v in rep.results.items())
        print(f"{p.stem:16s} {time.perf_counter() - t0:7.1f}s  {statuses}")
        worst = max(worst, rep.exit_code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
