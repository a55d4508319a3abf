#!/usr/bin/env python3
"""Finite-difference check of every parameter of a small pointer sentinel model."""
import argparse

import numpy as np

from pointer_sentinel import numerics as nx
from pointer_sentinel import pointer_mixture as pm
from pointer_sentinel import recurrent as rc


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--H", type=int, default=8)
    parser.add_argument("--V", type=int, default=12)
    parser.add_argument("--L", type=int, default=5)
    parser.add_argument("--depth", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = nx.make_rng(args.seed)
    params = rc.init_params(args.V, args.H, args.depth, rng, init_scale=0.3)
    tokens = rng.integers(0, args.V, size=(2, 10))

    def loss():
        out = rc.run_sequence(tokens[:, :-1], params)
        window, total = pm.PointerWindow(args.L), None
        for t in range(tokens.shape[1] - 1):
            window.push(out.hidden[t], tokens[:, t])
            step = pm.loss(*pm.predict(params, out.output(t), window, full=False), tokens[:, t + 1])
            total = step if total is None else total + step
        return total

    nx.backward(loss())
    for name, p in params.named():
        num = nx.finite_difference_grad(lambda: float(loss().data), p)
        err = np.linalg.norm(p.grad - num) / (np.linalg.norm(p.grad) + np.linalg.norm(num))
        print(f"{name:14s} {p.data.size:6d} values  relative error {err:.2e}")


if __name__ == "__main__":
    main()
