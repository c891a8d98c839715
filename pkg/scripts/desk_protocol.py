#!/usr/bin/env python3
"""Run the desk-scale protocol and print the trend checks.

    python scripts/desk_protocol.py --source cifar10 --dir data/cifar-10-batches-bin --out runs/desk
    python scripts/desk_protocol.py --source synthetic --out runs/desk-synthetic
    python scripts/desk_protocol.py --source synthetic --arms rni --rni-lambda 0.08 --out runs/desk-rni-8e-2

Finished steps are reused, so the script can be interrupted and rerun.
"""
import argparse
import logging
import statistics

from rniprune import desk
from rniprune.reports import build_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", choices=("cifar10", "synthetic"), default="cifar10")
    ap.add_argument("--dir", default="data/cifar-10-batches-bin")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--arms", nargs="+", default=list(desk.ARMS), choices=list(desk.ARMS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(desk.SEEDS))
    ap.add_argument("--rni-lambda", type=float, help="override the RNI arm's λ_S")
    args = ap.parse_args()
    if args.rni_lambda is not None:
        norm, method, _, b = desk.ARMS["rni"]
        desk.ARMS["rni"] = (norm, method, args.rni_lambda, b)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = desk.DeskData(source=args.source, dir=args.dir)
    out = desk.run_arms(data, args.out, args.arms, tuple(args.seeds), args.epochs)
    build_report(out)
    seeds = tuple(args.seeds)

    if {"bn", "sigma"} <= set(args.arms):
        print(f"bn acc     {desk.trained_acc(out, 'bn', seeds)}")
        print(f"sigma acc  {desk.trained_acc(out, 'sigma', seeds)}")
        print(f"parity gap {desk.parity_gap(out, seeds):.2f} points")
    if "rni" in args.arms:
        for s, m in zip(seeds, desk.importance_modes(out, "rni", seeds)):
            print(f"rni seed {s}: low {m['low']:.3f} high {m['high']:.3f}")
    if {"rni", "slimming"} <= set(args.arms):
        for arm in ("rni", "slimming"):
            for r in desk.RATIOS:
                print(f"{arm} r={r} finetuned {desk.finetuned_acc(out, arm, r, seeds)}")
            print(f"{arm} conv1+2 removed at 0.9: "
                  f"{desk.early_layer_fraction(out, arm, 0.9, seeds):.3f}")
        if "sigma" in args.arms:
            base = statistics.median(desk.trained_acc(out, "sigma", seeds))
            rni = statistics.median(desk.finetuned_acc(out, "rni", 0.5, seeds))
            print(f"rni@0.5 vs unpruned sigma: {100 * (rni - base):+.2f} points")


if __name__ == "__main__":
    main()
