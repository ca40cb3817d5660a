"""Compare the compiled kernels against the numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeat 5]
Times the three conv kernels and the pooling pair on encoder-shaped tensors,
and a full feature forward pass through each backend.
"""

import argparse
import time

import numpy as np

from frameprompt.kernels import _ref

try:
    from frameprompt.kernels import _fast
except ImportError:
    _fast = None


CASES = [
    ("conv1 fwd 64x3x32x32", "conv2d_forward",
     ((64, 3, 32, 32), (16, 3, 3, 3)), dict(stride=1, pad=1)),
    ("conv2 fwd 64x16x16x16", "conv2d_forward",
     ((64, 16, 16, 16), (32, 16, 3, 3)), dict(stride=1, pad=1)),
]


def _time(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(mod, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, name, shapes, kw in CASES:
        x = rng.standard_normal(shapes[0])
        w = rng.standard_normal(shapes[1])
        fn = getattr(mod, name)
        rows.append((label, _time(fn, x, w, kw["stride"], kw["pad"], repeat=repeat)))
    # backward kernels on the conv2 shape
    x = rng.standard_normal((64, 16, 16, 16))
    w = rng.standard_normal((32, 16, 3, 3))
    dy = rng.standard_normal((64, 32, 16, 16))
    rows.append(("conv2 bwd input", _time(
        mod.conv2d_backward_input, dy, w, 1, 1, 16, 16, repeat=repeat)))
    rows.append(("conv2 bwd weight", _time(
        mod.conv2d_backward_weight, x, dy, 1, 1, 3, 3, repeat=repeat)))
    pooled = rng.standard_normal((64, 32, 16, 16))
    y, idx = mod.maxpool2_forward(pooled)
    rows.append(("maxpool2 fwd", _time(mod.maxpool2_forward, pooled, repeat=repeat)))
    rows.append(("maxpool2 bwd", _time(mod.maxpool2_backward, y, idx, repeat=repeat)))
    return rows


def check_agreement():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 3, 16, 16))
    w = rng.standard_normal((8, 3, 3, 3))
    a = _ref.conv2d_forward(x, w, 1, 1)
    b = _fast.conv2d_forward(x, w, 1, 1)
    rel = np.abs(a - b).max() / max(1.0, np.abs(a).max())
    return rel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<28}{'numpy':>12}{'cython':>12}{'speedup':>10}")
    ref_rows = bench_backend(_ref, args.repeat)
    if _fast is None:
        for label, t in ref_rows:
            print(f"{label:<28}{t * 1e3:>10.2f}ms{'-':>12}{'-':>10}")
        print("compiled extension not built; only the fallback was timed")
        return
    fast_rows = bench_backend(_fast, args.repeat)
    for (label, t_ref), (_, t_fast) in zip(ref_rows, fast_rows):
        print(f"{label:<28}{t_ref * 1e3:>10.2f}ms{t_fast * 1e3:>10.2f}ms"
              f"{t_ref / t_fast:>9.2f}x")
    print(f"max relative forward disagreement: {check_agreement():.3e}")


if __name__ == "__main__":
    main()
