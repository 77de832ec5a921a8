"""Compare the compiled LSTM kernels against the numpy fallback.

    python3 benchmarks/bench_lstm.py [--batch 50] [--steps 20] [--hidden 32 64] [--repeat 30]

Both backends get identical inputs; the script also reports the largest
absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from motion_mdn import _lstm_fallback as py_kernels

try:
    from motion_mdn import _lstm_kernels as c_kernels
except ImportError:
    c_kernels = None


def make_case(B, T, H, X, seed=0):
    rng = np.random.default_rng(seed)
    s = 1 / np.sqrt(H)
    Wh = rng.uniform(-s, s, (4 * H, H))
    Wx = rng.uniform(-s, s, (4 * H, X))
    b = rng.uniform(-s, s, 4 * H)
    xs = rng.standard_normal((T, B, X))
    h0 = np.zeros((B, H))
    dhs = rng.standard_normal((T, B, H))
    return Wh, Wx, b, xs, h0, h0.copy(), dhs


def time_backend(mod, case, repeat):
    Wh, Wx, b, xs, h0, c0, dhs = case
    fwd = mod.forward_batch(Wh, Wx, b, xs, h0, c0)
    hs, cs, gates, tcs = fwd
    bwd = mod.backward_batch(Wh, Wx, xs, hs, cs, gates, tcs, dhs, h0, c0)
    t_f = min(timeit.repeat(lambda: mod.forward_batch(Wh, Wx, b, xs, h0, c0), number=1, repeat=repeat))
    t_b = min(timeit.repeat(
        lambda: mod.backward_batch(Wh, Wx, xs, hs, cs, gates, tcs, dhs, h0, c0),
        number=1, repeat=repeat))
    return t_f, t_b, fwd, bwd


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--batch", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--inputs", type=int, default=14)
    ap.add_argument("--hidden", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args(argv)
    if c_kernels is None:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'H':>4} {'backend':>9} {'forward ms':>11} {'backward ms':>12} {'speedup':>8} {'max |diff|':>11}")
    for H in args.hidden:
        case = make_case(args.batch, args.steps, H, args.inputs)
        pf, pb, pfwd, pbwd = time_backend(py_kernels, case, args.repeat)
        print(f"{H:>4} {'numpy':>9} {1e3 * pf:>11.3f} {1e3 * pb:>12.3f} {'':>8} {'':>11}")
        if c_kernels is None:
            continue
        cf, cb, cfwd, cbwd = time_backend(c_kernels, case, args.repeat)
        diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
                   for a, b in zip(pfwd + pbwd, cfwd + cbwd))
        print(f"{H:>4} {'compiled':>9} {1e3 * cf:>11.3f} {1e3 * cb:>12.3f} "
              f"{(pf + pb) / (cf + cb):>7.2f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
