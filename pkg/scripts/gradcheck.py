"""Compare analytic gaze-loss gradients with central differences on random maps."""

import argparse

import numpy as np

from gaze_align.losses import gaze_loss


def numeric_grad(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--size", type=int, default=8)
    ap.add_argument("--step", type=float, default=1e-6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    errors = []
    for _ in range(args.pairs):
        m, g = rng.random((2, args.size, args.size))
        n_fix, q = int(rng.integers(1, 40)), float(rng.uniform(0.1, 1))
        analytic = gaze_loss(m, g, n_fix, q).grad
        numeric = numeric_grad(lambda x: gaze_loss(x, g, n_fix, q).gaze_total, m.copy(),
                               args.step)
        denom = np.maximum(np.maximum(abs(analytic), abs(numeric)), 1e-6)
        errors.append(float(np.max(abs(analytic - numeric) / denom)))
    print(f"max relative error {max(errors):.3e}, median {np.median(errors):.3e} "
          f"over {args.pairs} pairs")


if __name__ == "__main__":
    main()
