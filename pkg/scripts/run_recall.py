"""Train membart on the text recall task, then evaluate with and without memory.

    python3 scripts/run_recall.py [--steps 2000] [--out runs/recall]
"""

import argparse
import sys
from pathlib import Path

from membart import cli

CFG = Path(__file__).resolve().parents[1] / "configs" / "recall.cfg"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", default="runs/recall")
    ap.add_argument("--config", default=str(CFG))
    args = ap.parse_args()
    base = ["--config", args.config, "--out", args.out]
    code = cli.main(["train", *base, "--steps", str(args.steps)])
    if code:
        return code
    ckpt = str(Path(args.out) / cli.CHECKPOINT_NAME)
    # the step budget is not part of the config digest, so eval accepts the checkpoint
    for extra in ([], ["--no-history"]):
        code = cli.main(["eval", *base, "--checkpoint", ckpt, *extra])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
