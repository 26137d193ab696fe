"""Regenerate the frozen synthetic-setting matrices (A, C, base noise covariances).

The output is checked in at src/lfpf/data/synthetic_matrices.json; rerunning
with the default seed reproduces it bit for bit.
"""

import argparse
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "lfpf" / "data" / "synthetic_matrices.json"


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def spd_unit_norm(rng, n, lo=0.2):
    u = orthogonal(rng, n)
    eig = np.linspace(lo, 1.0, n)
    s = (u * eig) @ u.T
    return 0.5 * (s + s.T)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=20240501)
    ap.add_argument("--d-sp", type=int, default=10)
    ap.add_argument("--d-m", type=int, default=8)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    d, m = args.d_sp, args.d_m
    A = (orthogonal(rng, d) * np.linspace(0.6, 0.98, d)) @ orthogonal(rng, d).T
    C = (orthogonal(rng, m) * np.linspace(0.5, 1.5, m)) @ orthogonal(rng, d)[:m]
    payload = {
        "seed": args.seed,
        "A": A.tolist(),
        "C": C.tolist(),
        "sigma_v": spd_unit_norm(rng, d).tolist(),
        "sigma_e": spd_unit_norm(rng, m).tolist(),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(payload, indent=1))
    print(f"cond(A)={np.linalg.cond(A):.2f} cond(C)={np.linalg.cond(C):.2f} -> {args.out}")


if __name__ == "__main__":
    main()
