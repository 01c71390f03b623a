"""Time the numba and numpy backends of each hot kernel and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 64]
"""
from __future__ import annotations

import argparse
import time

import numpy as np
from scipy import ndimage

from ctseverity import _kernels
from ctseverity._accel import HAVE_NUMBA, use_backend


def _cases(size: int, rng):
    blobs = ndimage.gaussian_filter(rng.standard_normal((size,) * 3), 2.0) > 0.1
    lung = ndimage.binary_erosion(np.ones((size,) * 3, bool), iterations=size // 8)
    X = rng.standard_normal((400, 32))
    y = (X[:, 0] + 0.5 * rng.standard_normal(400) > 0).astype(np.float64)
    idx = np.arange(400, dtype=np.int64)
    feats = np.arange(32, dtype=np.int64)
    pts = rng.standard_normal((200, 6))
    D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    return {
        "label_components": lambda: _kernels.label_components(blobs, 26),
        "squared_edt": lambda: _kernels.squared_edt(~lung, (2.0, 1.0, 1.0)),
        "best_split": lambda: _kernels.best_split(X, y, idx, feats, 1),
        "average_linkage": lambda: _kernels.average_linkage_merges(D),
    }


def _time(fn, repeat: int) -> float:
    fn()  # warm-up; includes JIT compilation on the numba path
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-12, atol=1e-12)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = _cases(a.size, np.random.default_rng(a.seed))
    print(f"{'kernel':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}  agree")
    for name, fn in cases.items():
        with use_backend("numba"):
            t_nb, r_nb = _time(fn, a.repeat), fn()
        with use_backend("numpy"):
            t_np, r_np = _time(fn, a.repeat), fn()
        print(f"{name:<18}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>10.1f}  {_same(r_nb, r_np)}")


if __name__ == "__main__":
    main()
