"""Loop-bound numeric kernels.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. The numba path is used when numba imports and the environment
variable ``MEGDECODE_DISABLE_NUMBA`` is unset (or ``0``). Both paths must
agree to floating point round-off; ``tests/test_kernels.py`` checks this and
``benchmarks/bench_kernels.py`` times them against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MEGDECODE_DISABLE_NUMBA", "0") in ("", "0")


def _neighbour_offsets(P, R):
    angles = 2 * np.pi * np.arange(P, dtype=np.float64) / P
    # rounded like the reference implementation so that axis-aligned taps land on pixels
    rp = np.round(-R * np.sin(angles), 5)
    cp = np.round(R * np.cos(angles), 5)
    return rp, cp


# ---------------------------------------------------------------------------
# local binary patterns ("uniform" mapping, P+2 codes)
# ---------------------------------------------------------------------------


def _sample_bilinear_np(img, r, c):
    """Bilinear samples of ``img`` at float coordinates; zero outside."""
    H, W = img.shape
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.ceil(r).astype(np.int64)
    c1 = np.ceil(c).astype(np.int64)
    dr = r - r0
    dc = c - c0

    def get(rr, cc):
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        out = np.zeros(rr.shape, dtype=np.float64)
        out[ok] = img[rr[ok], cc[ok]]
        return out

    top = (1 - dc) * get(r0, c0) + dc * get(r0, c1)
    bottom = (1 - dc) * get(r1, c0) + dc * get(r1, c1)
    return (1 - dr) * top + dr * bottom


def lbp_uniform_codes_np(gray, P, R):
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    H, W = gray.shape
    rp, cp = _neighbour_offsets(P, R)
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    bits = np.empty((P, H, W), dtype=np.int64)
    for p in range(P):
        nb = _sample_bilinear_np(gray, rows + rp[p], cols + cp[p])
        bits[p] = nb > gray
    changes = np.sum(bits != np.roll(bits, 1, axis=0), axis=0)
    ones = bits.sum(axis=0)
    return np.where(changes <= 2, ones, P + 1).astype(np.int64)


# ---------------------------------------------------------------------------
# HOG cell histograms
# ---------------------------------------------------------------------------


def hog_cell_histograms_np(g_row, g_col, cell, n_orient):
    H, W = g_row.shape
    n_r, n_c = H // cell, W // cell
    mag = np.hypot(g_col, g_row)
    ang = np.rad2deg(np.arctan2(g_row, g_col)) % 180.0
    width = 180.0 / n_orient
    b = np.minimum((ang / width).astype(np.int64), n_orient - 1)
    mag = mag[: n_r * cell, : n_c * cell]
    b = b[: n_r * cell, : n_c * cell]
    cell_r = (np.arange(n_r * cell) // cell)[:, None]
    cell_c = (np.arange(n_c * cell) // cell)[None, :]
    flat = (cell_r * n_c + cell_c) * n_orient + b
    hist = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=n_r * n_c * n_orient)
    return hist.reshape(n_r, n_c, n_orient) / (cell * cell)


# ---------------------------------------------------------------------------
# retrieval rank counting
# ---------------------------------------------------------------------------


def count_ranks_np(sims, true_idx, tie_key):
    """1 + #strictly more similar + #equally similar with smaller tie key."""
    q = np.arange(sims.shape[0])
    s_true = sims[q, true_idx][:, None]
    k_true = tie_key[true_idx][:, None]
    better = (sims > s_true) | ((sims == s_true) & (tie_key[None, :] < k_true))
    return 1 + better.sum(axis=1).astype(np.int64)


if HAVE_NUMBA:

    @njit(cache=False)
    def _pixel(img, r, c):
        H, W = img.shape
        if r < 0 or r >= H or c < 0 or c >= W:
            return 0.0
        return img[r, c]

    @njit(cache=False)
    def lbp_uniform_codes_nb(gray, P, R):
        H, W = gray.shape
        angles = 2 * np.pi * np.arange(P) / P
        rp = np.empty(P)
        cp = np.empty(P)
        for p in range(P):
            rp[p] = np.round(-R * np.sin(angles[p]), 5)
            cp[p] = np.round(R * np.cos(angles[p]), 5)
        out = np.empty((H, W), dtype=np.int64)
        bits = np.empty(P, dtype=np.int64)
        for i in range(H):
            for j in range(W):
                centre = gray[i, j]
                for p in range(P):
                    r = i + rp[p]
                    c = j + cp[p]
                    r0 = int(np.floor(r))
                    c0 = int(np.floor(c))
                    r1 = int(np.ceil(r))
                    c1 = int(np.ceil(c))
                    dr = r - r0
                    dc = c - c0
                    top = (1 - dc) * _pixel(gray, r0, c0) + dc * _pixel(gray, r0, c1)
                    bottom = (1 - dc) * _pixel(gray, r1, c0) + dc * _pixel(gray, r1, c1)
                    v = (1 - dr) * top + dr * bottom
                    bits[p] = 1 if v > centre else 0
                ones = 0
                changes = 0
                for p in range(P):
                    ones += bits[p]
                    if bits[p] != bits[p - 1]:
                        changes += 1
                out[i, j] = ones if changes <= 2 else P + 1
        return out

    @njit(cache=False)
    def hog_cell_histograms_nb(g_row, g_col, cell, n_orient):
        H, W = g_row.shape
        n_r = H // cell
        n_c = W // cell
        hist = np.zeros((n_r, n_c, n_orient))
        width = 180.0 / n_orient
        for i in range(n_r * cell):
            for j in range(n_c * cell):
                gr = g_row[i, j]
                gc = g_col[i, j]
                ang = np.rad2deg(np.arctan2(gr, gc)) % 180.0
                b = int(ang / width)
                if b >= n_orient:
                    b = n_orient - 1
                hist[i // cell, j // cell, b] += np.hypot(gc, gr)
        return hist / (cell * cell)

    @njit(cache=False)
    def count_ranks_nb(sims, true_idx, tie_key):
        Q, M = sims.shape
        out = np.empty(Q, dtype=np.int64)
        for q in range(Q):
            t = true_idx[q]
            st = sims[q, t]
            kt = tie_key[t]
            n = 1
            for m in range(M):
                s = sims[q, m]
                if s > st or (s == st and tie_key[m] < kt):
                    n += 1
            out[q] = n
        return out


if USE_NUMBA:
    lbp_uniform_codes = lbp_uniform_codes_nb
    hog_cell_histograms = hog_cell_histograms_nb
    count_ranks = count_ranks_nb
else:
    lbp_uniform_codes = lbp_uniform_codes_np
    hog_cell_histograms = hog_cell_histograms_np
    count_ranks = count_ranks_np


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
