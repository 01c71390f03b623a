"""Hot inner loops, each in a numba flavour and a vectorized numpy flavour.

Public wrappers at the bottom dispatch on :func:`ctseverity._accel.get_backend`.
Both flavours must return identical results; ``tests/test_kernels.py`` checks
that and ``benchmarks/bench_kernels.py`` times them.
"""
from __future__ import annotations

import numpy as np

from ._accel import get_backend, njit

_BIG = 1e300


def neighbor_offsets(connectivity: int) -> np.ndarray:
    """Offsets ``(dz, dy, dx)`` of the neighbours preceding a voxel in raster order."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                n = abs(dz) + abs(dy) + abs(dx)
                if n == 0:
                    continue
                if connectivity == 6 and n > 1:
                    continue
                if connectivity == 18 and n > 2:
                    continue
                if (dz, dy, dx) < (0, 0, 0):
                    offs.append((dz, dy, dx))
    return np.array(offs, dtype=np.int64)


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------

@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def _label_numba(mask, offsets):
    nz, ny, nx = mask.shape
    n = nz * ny * nx
    parent = np.full(n, -1, np.int64)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x]:
                    continue
                i = (z * ny + y) * nx + x
                parent[i] = i
                for k in range(offsets.shape[0]):
                    zz = z + offsets[k, 0]
                    yy = y + offsets[k, 1]
                    xx = x + offsets[k, 2]
                    if zz < 0 or yy < 0 or xx < 0 or yy >= ny or xx >= nx:
                        continue
                    if not mask[zz, yy, xx]:
                        continue
                    j = (zz * ny + yy) * nx + xx
                    ri = _find(parent, i)
                    rj = _find(parent, j)
                    if ri < rj:
                        parent[rj] = ri
                    elif rj < ri:
                        parent[ri] = rj
    out = np.zeros(n, np.int32)
    count = 0
    for i in range(n):
        if parent[i] < 0:
            continue
        r = _find(parent, i)
        if r == i:
            count += 1
            out[i] = count
        else:
            out[i] = out[r]
    return out.reshape((nz, ny, nx)), count


def _label_numpy(mask, offsets):
    shape = mask.shape
    n = mask.size
    big = n + 1
    lab = np.where(mask.ravel(), np.arange(n, dtype=np.int64), big).reshape(shape)
    pad_mask = np.pad(mask, 1)
    all_offsets = np.concatenate([offsets, -offsets])
    nz, ny, nx = shape
    while True:
        padded = np.pad(lab, 1, constant_values=big)
        new = lab.copy()
        for dz, dy, dx in all_offsets:
            sl = (slice(1 + dz, 1 + dz + nz), slice(1 + dy, 1 + dy + ny), slice(1 + dx, 1 + dx + nx))
            nb = np.where(pad_mask[sl], padded[sl], big)
            np.minimum(new, nb, out=new)
        new = np.where(mask, new, big)
        # pointer jumping: adopt the label of the representative voxel
        flat = new.ravel()
        inside = flat < big
        jumped = flat.copy()
        jumped[inside] = flat[flat[inside]]
        new = jumped.reshape(shape)
        if np.array_equal(new, lab):
            break
        lab = new
    flat = lab.ravel()
    out = np.zeros(n, np.int32)
    inside = flat < big
    roots, inverse = np.unique(flat[inside], return_inverse=True)
    out[inside] = inverse.astype(np.int32) + 1
    return out.reshape(shape), len(roots)


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label connected foreground components.

    Components are numbered 1..n in ascending order of their first voxel's
    linear (raster) index.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    offsets = neighbor_offsets(connectivity)
    if get_backend() == "numba":
        return _label_numba(mask, offsets)
    return _label_numpy(mask, offsets)


# ---------------------------------------------------------------------------
# exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _edt_lines_numba(f, w):
    # f: (n_lines, n) squared distances; lower envelope of parabolas per line
    n_lines, n = f.shape
    out = np.empty_like(f)
    v = np.empty(n, np.int64)
    zb = np.empty(n + 1, np.float64)
    for li in range(n_lines):
        row = f[li]
        k = -1
        s = 0.0
        for q in range(n):
            if row[q] >= _BIG:
                continue
            if k < 0:
                k = 0
                v[0] = q
                zb[0] = -np.inf
                zb[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((row[q] + w * q * q) - (row[p] + w * p * p)) / (2.0 * w * (q - p))
                if s <= zb[k]:
                    k -= 1
                    if k < 0:
                        break
                else:
                    break
            k += 1
            v[k] = q
            zb[k] = s if k > 0 else -np.inf
            zb[k + 1] = np.inf
        if k < 0:
            for p in range(n):
                out[li, p] = _BIG
            continue
        j = 0
        for p in range(n):
            while zb[j + 1] < p:
                j += 1
            d = p - v[j]
            out[li, p] = w * d * d + row[v[j]]
    return out


def _edt_lines_numpy(f, w):
    n_lines, n = f.shape
    pos = np.arange(n, dtype=np.float64)
    diff = pos[:, None] - pos[None, :]
    pen = w * diff * diff  # [p, q]
    out = np.empty_like(f)
    chunk = max(1, 2_000_000 // (n * n))
    for start in range(0, n_lines, chunk):
        block = f[start:start + chunk]
        cand = pen[None, :, :] + block[:, None, :]
        out[start:start + chunk] = cand.min(axis=2)
    return out


def squared_edt(background: np.ndarray, spacing) -> np.ndarray:
    """Squared distance (mm^2) from each voxel centre to the nearest ``background`` voxel centre.

    Voxels with no background voxel anywhere in the grid get ``_BIG``.
    """
    background = np.asarray(background, dtype=np.bool_)
    f = np.where(background, 0.0, _BIG)
    lines = _edt_lines_numba if get_backend() == "numba" else _edt_lines_numpy
    # x first, then y, then z
    for axis in (2, 1, 0):
        w = float(spacing[axis]) ** 2
        moved = np.moveaxis(f, axis, -1)
        shape = moved.shape
        flat = np.ascontiguousarray(moved).reshape(-1, shape[-1])
        res = lines(flat, w)
        res = np.where(res >= _BIG, _BIG, res)
        f = np.moveaxis(res.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)


# ---------------------------------------------------------------------------
# best split search for regression / binary-gini trees
# ---------------------------------------------------------------------------

@njit(cache=True)
def _best_split_numba(X, y, idx, features, min_leaf):
    m = idx.shape[0]
    total = 0.0
    for i in range(m):
        total += y[idx[i]]
    parent = total * total / m
    best_gain = 0.0
    best_f = -1
    best_t = 0.0
    vals = np.empty(m, np.float64)
    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(m):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        s_left = 0.0
        for i in range(m - 1):
            s_left += y[idx[order[i]]]
            n_left = i + 1
            n_right = m - n_left
            a = vals[order[i]]
            b = vals[order[i + 1]]
            if not (a < b):
                continue
            if n_left < min_leaf or n_right < min_leaf:
                continue
            s_right = total - s_left
            gain = s_left * s_left / n_left + s_right * s_right / n_right - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                t = 0.5 * (a + b)
                if t >= b:
                    t = a
                best_t = t
    return best_f, best_t, best_gain


def _best_split_numpy(X, y, idx, features, min_leaf):
    m = idx.shape[0]
    yi = y[idx]
    total = 0.0
    for v in yi:  # sequential, matching the loop kernel bit for bit
        total += v
    parent = total * total / m
    best_gain, best_f, best_t = 0.0, -1, 0.0
    n_left = np.arange(1, m, dtype=np.float64)
    n_right = m - n_left
    valid_size = (n_left >= min_leaf) & (n_right >= min_leaf)
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        cs = np.cumsum(yi[order])[:-1]
        s_right = total - cs
        gain = cs * cs / n_left + s_right * s_right / n_right - parent
        ok = valid_size & (sv[:-1] < sv[1:]) & (gain > best_gain)
        if not ok.any():
            continue
        g = np.where(ok, gain, -np.inf)
        i = int(np.argmax(g))
        best_gain = float(g[i])
        best_f = int(f)
        a, b = sv[i], sv[i + 1]
        t = 0.5 * (a + b)
        best_t = float(a if t >= b else t)
    return best_f, best_t, best_gain


def best_split(X, y, idx, features, min_leaf: int):
    """Best ``x[f] <= t`` split of rows ``idx`` maximizing the sum-of-squares reduction.

    Ties go to the lowest feature id, then the lowest threshold. Returns
    ``(-1, 0.0, 0.0)`` when no split improves the node.
    """
    features = np.asarray(features, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if get_backend() == "numba":
        f, t, g = _best_split_numba(X, y, idx, features, int(min_leaf))
        return int(f), float(t), float(g)
    return _best_split_numpy(X, y, idx, features, int(min_leaf))


# ---------------------------------------------------------------------------
# naive average-linkage agglomeration
# ---------------------------------------------------------------------------

@njit(cache=True)
def _average_linkage_numba(D):
    n = D.shape[0]
    d = D.copy()
    ids = np.arange(n)
    size = np.ones(n, np.int64)
    active = np.ones(n, np.bool_)
    Z = np.empty((n - 1, 4), np.float64)
    for step in range(n - 1):
        best = np.inf
        bi = -1
        bj = -1
        blo = 0
        bhi = 0
        for i in range(n):
            if not active[i]:
                continue
            for j in range(i + 1, n):
                if not active[j]:
                    continue
                lo = min(ids[i], ids[j])
                hi = max(ids[i], ids[j])
                v = d[i, j]
                if v < best or (v == best and (lo < blo or (lo == blo and hi < bhi))):
                    best = v
                    bi = i
                    bj = j
                    blo = lo
                    bhi = hi
        si = size[bi]
        sj = size[bj]
        for k in range(n):
            if active[k] and k != bi and k != bj:
                nd = (si * d[bi, k] + sj * d[bj, k]) / (si + sj)
                d[bi, k] = nd
                d[k, bi] = nd
        Z[step, 0] = blo
        Z[step, 1] = bhi
        Z[step, 2] = best
        Z[step, 3] = si + sj
        active[bj] = False
        size[bi] = si + sj
        ids[bi] = n + step
    return Z


def _average_linkage_numpy(D):
    n = D.shape[0]
    d = D.astype(np.float64).copy()
    ids = np.arange(n)
    size = np.ones(n, np.int64)
    active = np.ones(n, bool)
    Z = np.empty((n - 1, 4))
    upper = np.triu(np.ones((n, n), bool), 1)
    for step in range(n - 1):
        valid = upper & active[:, None] & active[None, :]
        masked = np.where(valid, d, np.inf)
        best = masked.min()
        ci, cj = np.nonzero(masked == best)
        lo = np.minimum(ids[ci], ids[cj])
        hi = np.maximum(ids[ci], ids[cj])
        pick = np.lexsort((hi, lo))[0]
        bi, bj = int(ci[pick]), int(cj[pick])
        si, sj = size[bi], size[bj]
        nd = (si * d[bi] + sj * d[bj]) / (si + sj)
        others = active.copy()
        others[[bi, bj]] = False
        d[bi, others] = nd[others]
        d[others, bi] = nd[others]
        Z[step] = (lo[pick], hi[pick], best, si + sj)
        active[bj] = False
        size[bi] = si + sj
        ids[bi] = n + step
    return Z


def average_linkage_merges(D: np.ndarray) -> np.ndarray:
    """Merge table ``(id_lo, id_hi, distance, size)`` in scipy's id convention."""
    D = np.ascontiguousarray(D, dtype=np.float64)
    if get_backend() == "numba":
        return _average_linkage_numba(D)
    return _average_linkage_numpy(D)
