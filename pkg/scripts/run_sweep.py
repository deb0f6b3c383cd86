"""Instance AUC-PR across bag sizes or witness rates on MNIST-bags.

    python scripts/run_sweep.py --axis bag_size --values 10,25,50,100 --epochs 20
"""

import argparse
from dataclasses import replace
from pathlib import Path

from targetedmil.data import load_mnist_split
from targetedmil.eval import SweepBase, sweep
from targetedmil.experiments import MnistBagsConfig, default_data_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", type=Path, default=default_data_dir())
    ap.add_argument("--axis", choices=["bag_size", "witness_rate"], required=True)
    ap.add_argument("--values", required=True, help="comma-separated")
    ap.add_argument("--method", choices=["targetedmil", "baseline"], default="targetedmil")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n-bags", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/sweep.csv"))
    args = ap.parse_args()
    if args.data_dir is None:
        ap.error("no MNIST directory; pass --data-dir or set TMIL_DATA_DIR")

    cfg = MnistBagsConfig()
    base = SweepBase(
        train_pool=load_mnist_split(args.data_dir, "train"),
        test_pool=load_mnist_split(args.data_dir, "test"),
        target_class=cfg.target_class,
        train=replace(cfg.train, epochs=args.epochs),
        n_train_bags=args.n_bags,
        n_test_bags=cfg.n_test_bags,
        method=args.method,
    )
    report = sweep(args.axis, [float(v) for v in args.values.split(",")], base, repeats=args.repeats)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out)
    for p in report.points:
        print(f"{args.axis}={p.axis_value:g}: AUC-PR {p.mean_auc_pr:.4f} +- {p.std_auc_pr:.4f}")


if __name__ == "__main__":
    main()
