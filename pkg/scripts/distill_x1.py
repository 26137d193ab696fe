"""Unsupervised distillation on X1 at 0 dB: train a 25-particle LF-SIS PF
against a 300-particle teacher, then compare held-out OSPA with plain SIS.

    python3 scripts/distill_x1.py --out runs/x1 [--epochs 5] [--n-train 500]

Takes about five minutes on one core with the defaults.
"""

import argparse
import csv
import logging
import time
from pathlib import Path

import numpy as np

from lfpf.lf import LfHyperparams, LfModule
from lfpf.loss import GridSpec, LossConfig
from lfpf.pf import FilterConfig
from lfpf.ssm import generate_dataset, make_synthetic
from lfpf.train import TrainConfig, evaluate_record, train


def mean_ospa(module, model, records, n, seed):
    per_traj = [evaluate_record(module, model, r, FilterConfig(n), np.random.default_rng([seed, i])).mean()
                for i, r in enumerate(records)]
    return float(np.mean(per_traj)), float(np.std(per_traj) / np.sqrt(len(per_traj)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/x1"))
    ap.add_argument("--snr", type=float, default=0.0)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--seed", type=int, default=6)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    model = make_synthetic("X1", snr_db=args.snr)
    data = [r.unsupervised() for r in generate_dataset(model, args.n_train, 15, seed=60)]
    val = generate_dataset(model, 50, 15, seed=61)
    test = generate_dataset(model, args.n_test, 15, seed=62)
    cfg = TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=args.epochs, batch_size=50, student_n=25,
                      teacher_n=300, window=(9, 15), seed=args.seed,
                      loss=LossConfig(lambda3=0.1, grid=GridSpec(n_samples=1000)))
    module = LfModule(LfHyperparams(), model.d_sp, np.random.default_rng(args.seed))
    t0 = time.perf_counter()
    result = train(data, model, cfg, module, val_records=val, out_dir=args.out)
    print(f"training took {time.perf_counter() - t0:.0f}s, best validation OSPA {result.best_value:.4f}")

    rows = []
    for name, mod, n in (("plain", None, 25), ("lf", result.module, 25), ("plain", None, 100),
                         ("plain", None, 300)):
        m, se = mean_ospa(mod, model, test, n, 62)
        rows.append({"filter": name, "N": n, "mean_ospa": m, "stderr": se})
        print(f"{name:5s} N={n:<4d} OSPA {m:.4f} +- {se:.4f}")
    with open(args.out / "test_ospa.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
