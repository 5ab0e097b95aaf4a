"""Generate train/test cohorts, train with the default schedule, evaluate, and print the metric table.

    python3 scripts/table1_analog.py --out runs/table1
"""
import argparse
import json
import time
from pathlib import Path

from regforge.cli import main as cli

STAGES = ("input", "affine", "composite")
METRICS = ("dice", "hausdorff_mm", "urethra_dev_mm", "landmark_err_mm")


def run(*argv) -> None:
    code = cli([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-test", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    out = args.out
    run("gen-phantoms", "--n", args.n_train, "--seed", 1, "--out", out / "train")
    run("gen-phantoms", "--n", args.n_test, "--seed", 2, "--out", out / "test")
    t0 = time.time()
    run("train", "--data", out / "train", "--out", out / "model", "--seed", args.seed, "--epochs", args.epochs)
    run("evaluate", "--data", out / "test", "--out", out / "eval", "--model", out / "model" / "model.rgfn")
    table = json.loads((out / "eval" / "summary.json").read_text())["table"]
    print(f"{'stage':<10}" + "".join(f"{m:>18}" for m in METRICS))
    for st in STAGES:
        print(f"{st:<10}" + "".join(f"{table[st][m]['cell']:>18}" for m in METRICS))
    i, c = table["input"], table["composite"]
    for m in ("hausdorff_mm", "landmark_err_mm"):
        print(f"{m} reduction: {1 - c[m]['mean'] / i[m]['mean']:.1%}")
    print(f"train + evaluate: {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
