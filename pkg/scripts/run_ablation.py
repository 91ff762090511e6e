"""Both ablation tables through the CLI: objective variants and conditioning modes.

    python3 scripts/run_ablation.py --iterations 500 --out runs/ablation
"""
import argparse
import sys
from pathlib import Path

from vcstar.cli import main as vcstar


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--plot", action="store_true")
    args = p.parse_args()
    out = Path(args.out)
    data = out / "data"
    steps = [
        ["synthdata", "--out", data, "--domains", args.domains, "--utterances", 8, "--eval-utterances", 2],
        ["ablate", "--data", data, "--axis", "objective", "--iterations", args.iterations, "--out", out],
        ["ablate", "--data", data, "--axis", "conditioning", "--iterations", args.iterations, "--out", out],
    ]
    for step in steps:
        if args.plot and step[0] == "ablate":
            step = step + ["--plot"]
        code = vcstar([str(s) for s in step])
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
