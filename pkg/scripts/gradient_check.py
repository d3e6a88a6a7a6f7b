"""Central-difference check of every loss gradient on random logits."""
import argparse

import numpy as np

from calmargin.losses import KINDS, LossConfig, compound_loss


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    logits = rng.normal(0, 3, (3, 3, 4))
    labels = rng.integers(0, 4, (3, 3))
    for kind in KINDS:
        cfg = LossConfig(kind, margin=2.0)
        ev = compound_loss(cfg, logits, labels)
        num = fd_grad(lambda l: compound_loss(cfg, l, labels).value, logits)
        print(f"{kind:8s} max |analytic - numeric| = {np.abs(ev.grad - num).max():.2e}")


if __name__ == "__main__":
    main()
