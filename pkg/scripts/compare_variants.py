"""Recall loss curves for membart, memformer_insert and membart_shared.

    python3 scripts/compare_variants.py [--steps 2000] [--out runs/compare]

curves.tsv holds one smoothed-loss column per variant; plot it with any tool.
"""

import argparse
import sys
from pathlib import Path

from membart import cli

CFG = Path(__file__).resolve().parents[1] / "configs" / "recall.cfg"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--variants", default="membart,memformer_insert,membart_shared")
    args = ap.parse_args()
    return cli.main(["compare-variants", "--config", str(CFG), "--steps", str(args.steps), "--out", args.out,
                     "--set", f"run.variants={args.variants}"])


if __name__ == "__main__":
    sys.exit(main())
