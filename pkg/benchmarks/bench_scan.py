"""Time the compiled and numpy selective-scan kernels on the same inputs.

    python3 benchmarks/bench_scan.py [--repeat 5] [--shapes 32x32x64x16,128x32x64x16]

Shapes are Bt x T x D x N. Each kernel's outputs are compared before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from sysmoe.numerics import scan


def make_inputs(Bt: int, T: int, D: int, N: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((Bt, T, D))
    delta = rng.uniform(0.01, 0.2, (Bt, T, D))
    A = -np.tile(np.arange(1.0, N + 1), (D, 1))
    B = rng.standard_normal((Bt, T, N))
    return u, delta, A, B


def bench(shape, repeat: int) -> dict:
    u, delta, A, B = make_inputs(*shape)
    dhs = np.random.default_rng(1).standard_normal(shape[:2] + shape[2:])
    out = {}
    ref = None
    for name in ("numpy", "cython"):
        try:
            k = scan.get_kernels(name)
        except RuntimeError:
            out[name] = None
            continue
        hs = k.scan_forward(u, delta, A, B)
        grads = k.scan_backward(u, delta, A, B, hs, dhs)
        if ref is None:
            ref = (hs, grads)
        else:
            assert np.allclose(hs, ref[0], rtol=1e-10, atol=1e-12), "forward mismatch"
            for g, r in zip(grads, ref[1]):
                assert np.allclose(g, r, rtol=1e-9, atol=1e-10), "backward mismatch"
        fwd = min(timeit.repeat(lambda: k.scan_forward(u, delta, A, B), number=1, repeat=repeat))
        bwd = min(timeit.repeat(lambda: k.scan_backward(u, delta, A, B, hs, dhs), number=1,
                                repeat=repeat))
        out[name] = (fwd, bwd)
    return out


def parse_shapes(text: str) -> list[tuple[int, ...]]:
    return [tuple(int(x) for x in s.split("x")) for s in text.split(",")]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--shapes", type=parse_shapes, default=parse_shapes("32x32x64x16,128x32x64x16,64x128x64x16"))
    args = ap.parse_args(argv)
    print(f"default backend: {scan.BACKEND}")
    print(f"{'shape':<18}{'numpy fwd':>11}{'numpy bwd':>11}{'cython fwd':>12}{'cython bwd':>12}{'speedup':>9}")
    for shape in args.shapes:
        r = bench(shape, args.repeat)
        npy, cy = r["numpy"], r["cython"]
        cells = [f"{npy[0] * 1e3:9.2f}ms", f"{npy[1] * 1e3:9.2f}ms"]
        if cy is None:
            cells += [f"{'n/a':>12}", f"{'n/a':>12}", f"{'n/a':>9}"]
        else:
            speed = (npy[0] + npy[1]) / (cy[0] + cy[1])
            cells += [f"{cy[0] * 1e3:10.2f}ms", f"{cy[1] * 1e3:10.2f}ms", f"{speed:8.1f}x"]
        print(f"{'x'.join(map(str, shape)):<18}" + "".join(cells))


if __name__ == "__main__":
    main()
