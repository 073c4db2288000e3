"""Hot numeric kernels shared by the environment and the solvers.

Every kernel exists twice: a loop form compiled with numba and a vectorised
numpy form. The public names bound at import time follow
:data:`rcqlpack._accel.USE_NUMBA`; both variants stay reachable through
:data:`NUMBA` and :data:`NUMPY` for benchmarking and cross-checks.

History arrays are ``float64`` vectors ``hx, hy, hz, hw, hl, hh`` of which
only the first ``n`` entries are meaningful (placement order).
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from rcqlpack._accel import HAVE_NUMBA, USE_NUMBA, jit

# ---------------------------------------------------------------------------
# loop forms (numba targets)
# ---------------------------------------------------------------------------


def _drop_height_loop(hx, hy, hz, hw, hl, hh, n, x, y, w, l):
    z = 0.0
    for b in range(n):
        if x < hx[b] + hw[b] and hx[b] < x + w and y < hy[b] + hl[b] and hy[b] < y + l:
            top = hz[b] + hh[b]
            if top > z:
                z = top
    return z


def _drop_map_loop(hx, hy, hz, hw, hl, hh, n, cx, cy, w, l):
    nx = cx.shape[0]
    ny = cy.shape[0]
    out = np.zeros((nx, ny))
    for b in range(n):
        xb = hx[b]
        xe = hx[b] + hw[b]
        yb = hy[b]
        ye = hy[b] + hl[b]
        # candidate coordinates are non-decreasing, so each predicate
        # selects a contiguous index run
        i0 = 0
        while i0 < nx and not (xb < cx[i0] + w):
            i0 += 1
        i1 = i0
        while i1 < nx and cx[i1] < xe:
            i1 += 1
        if i0 >= i1:
            continue
        j0 = 0
        while j0 < ny and not (yb < cy[j0] + l):
            j0 += 1
        j1 = j0
        while j1 < ny and cy[j1] < ye:
            j1 += 1
        if j0 >= j1:
            continue
        top = hz[b] + hh[b]
        for i in range(i0, i1):
            for j in range(j0, j1):
                if top > out[i, j]:
                    out[i, j] = top
    return out


def _count_violations_loop(hx, hy, hz, hw, hl, hh, n, W, L, tol):
    overlaps = 0
    unsupported = 0
    outside = 0
    for i in range(n):
        if hx[i] < -tol or hy[i] < -tol or hz[i] < -tol:
            outside += 1
        elif hx[i] + hw[i] > W + tol or hy[i] + hl[i] > L + tol:
            outside += 1
        supported = hz[i] == 0.0
        for b in range(n):
            if b == i:
                continue
            fp = (hx[i] < hx[b] + hw[b] and hx[b] < hx[i] + hw[i]
                  and hy[i] < hy[b] + hl[b] and hy[b] < hy[i] + hl[i])
            if not fp:
                continue
            if b > i and hz[i] < hz[b] + hh[b] and hz[b] < hz[i] + hh[i]:
                overlaps += 1
            if b < i and hz[b] + hh[b] == hz[i]:
                supported = True
        if not supported:
            unsupported += 1
    return overlaps, unsupported, outside


def _window_max_loop(hm, kx, ky):
    nx, ny = hm.shape
    ox = nx - kx + 1
    oy = ny - ky + 1
    tmp = np.empty((ox, ny))
    for j in range(ny):
        for i in range(ox):
            m = hm[i, j]
            for k in range(1, kx):
                if hm[i + k, j] > m:
                    m = hm[i + k, j]
            tmp[i, j] = m
    out = np.empty((ox, oy))
    for i in range(ox):
        for j in range(oy):
            m = tmp[i, j]
            for k in range(1, ky):
                if tmp[i, j + k] > m:
                    m = tmp[i, j + k]
            out[i, j] = m
    return out


# ---------------------------------------------------------------------------
# numpy forms
# ---------------------------------------------------------------------------


def _drop_height_np(hx, hy, hz, hw, hl, hh, n, x, y, w, l):
    if n == 0:
        return 0.0
    sl = slice(0, n)
    hit = ((x < hx[sl] + hw[sl]) & (hx[sl] < x + w)
           & (y < hy[sl] + hl[sl]) & (hy[sl] < y + l))
    if not hit.any():
        return 0.0
    return float(max(0.0, (hz[sl] + hh[sl])[hit].max()))


def _drop_map_np(hx, hy, hz, hw, hl, hh, n, cx, cy, w, l):
    out = np.zeros((cx.shape[0], cy.shape[0]))
    if n == 0:
        return out
    sl = slice(0, n)
    ox = (cx[None, :] < (hx[sl] + hw[sl])[:, None]) & (hx[sl][:, None] < cx[None, :] + w)
    oy = (cy[None, :] < (hy[sl] + hl[sl])[:, None]) & (hy[sl][:, None] < cy[None, :] + l)
    top = hz[sl] + hh[sl]
    # chunk over boxes to bound the (boxes, nx, ny) temporary
    step = max(1, 2_000_000 // max(1, out.size))
    for s in range(0, n, step):
        e = min(n, s + step)
        m = ox[s:e, :, None] & oy[s:e, None, :]
        cand = np.where(m, top[s:e, None, None], 0.0).max(axis=0)
        np.maximum(out, cand, out=out)
    return out


def _count_violations_np(hx, hy, hz, hw, hl, hh, n, W, L, tol):
    if n == 0:
        return 0, 0, 0
    x, y, z = hx[:n], hy[:n], hz[:n]
    w, l, h = hw[:n], hl[:n], hh[:n]
    outside = int(np.count_nonzero(
        (x < -tol) | (y < -tol) | (z < -tol) | (x + w > W + tol) | (y + l > L + tol)))
    fp = ((x[:, None] < (x + w)[None, :]) & (x[None, :] < (x + w)[:, None])
          & (y[:, None] < (y + l)[None, :]) & (y[None, :] < (y + l)[:, None]))
    np.fill_diagonal(fp, False)
    zo = (z[:, None] < (z + h)[None, :]) & (z[None, :] < (z + h)[:, None])
    overlaps = int(np.count_nonzero(np.triu(fp & zo, 1)))
    rests = fp & ((z + h)[None, :] == z[:, None]) & np.tri(n, k=-1, dtype=bool)
    supported = (z == 0.0) | rests.any(axis=1)
    return overlaps, int(np.count_nonzero(~supported)), outside


def _window_max_np(hm, kx, ky):
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(hm, (kx, ky)).max(axis=(2, 3))


NUMPY = SimpleNamespace(
    drop_height=_drop_height_np,
    drop_map=_drop_map_np,
    count_violations=_count_violations_np,
    window_max=_window_max_np,
)

if HAVE_NUMBA:
    NUMBA = SimpleNamespace(
        drop_height=jit(_drop_height_loop),
        drop_map=jit(_drop_map_loop),
        count_violations=jit(_count_violations_loop),
        window_max=jit(_window_max_loop),
    )
else:  # pragma: no cover
    NUMBA = None

ACTIVE = NUMBA if USE_NUMBA else NUMPY

drop_height = ACTIVE.drop_height
drop_map = ACTIVE.drop_map
count_violations = ACTIVE.count_violations
window_max = ACTIVE.window_max
