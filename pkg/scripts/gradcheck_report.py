"""Finite-difference check of the full stage-2/3 forward at a chosen size.

Prints the relative error per parameter group, which is the quickest way to
see whether a change to the tape or the forward pass broke a gradient.
"""
import argparse

import numpy as np

from atm_lab import pipeline
from atm_lab.numerics import Tape


def central_diff(f, arr, h):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        keep = arr[idx]
        arr[idx] = keep + h
        up = f()
        arr[idx] = keep - h
        down = f()
        arr[idx] = keep
        g[idx] = (up - down) / (2 * h)
    return g


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--l", type=int, default=4)
    parser.add_argument("--m", type=int, default=6)
    parser.add_argument("--c", type=int, default=8)
    parser.add_argument("--details", action="store_true", help="stage-3 forward with detail tokens")
    parser.add_argument("--h", type=float, default=1e-5)
    args = parser.parse_args()

    dims = pipeline.Dims(l=args.l, m=args.m, c=args.c, n=3, d=6, v=2, h=4 * args.c, h_dec=8, d_out=6)
    state = pipeline.init_state(pipeline.TrainConfig(seed=args.seed, dims=dims))
    g = np.random.default_rng(args.seed)
    x = g.normal(size=(args.batch, dims.d))
    y = g.normal(size=(args.batch, dims.d_out))
    routes = g.integers(0, dims.n, size=args.batch)

    def loss_value(tape=None):
        tape = tape or Tape()
        fw = pipeline.forward(tape, state, x, routes, args.details, trainable=True)
        return tape.mse(fw.output, tape.const(y[fw.order]))

    tape = Tape()
    grads = tape.backward(loss_value(tape))
    params = state.params()
    print(f"{'parameter':<14} {'shape':>10} {'rel_err':>10}")
    for name in ["q0", *(f"memory.{i}" for i in range(dims.n)), *state.decoder.params()]:
        arr = params[name]
        fd = central_diff(lambda: loss_value().value[0, 0], arr, args.h)
        an = grads.get(name, np.zeros_like(arr))
        scale = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
        print(f"{name:<14} {str(arr.shape):>10} {np.linalg.norm(an - fd) / scale:>10.2e}")


if __name__ == "__main__":
    main()
