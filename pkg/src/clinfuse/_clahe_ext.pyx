# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CLAHE kernels. Same integer arithmetic as ``_clahe_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, isfinite

cnp.import_array()

cdef enum:
    N_BINS = 256


cdef void _clip(long long* hist, long long limit) noexcept nogil:
    cdef long long excess = 0, inc, give
    cdef int b
    for b in range(N_BINS):
        if hist[b] > limit:
            excess += hist[b] - limit
            hist[b] = limit
    while excess >= N_BINS:
        inc = excess // N_BINS
        for b in range(N_BINS):
            give = limit - hist[b]
            if give > inc:
                give = inc
            hist[b] += give
            excess -= give
    b = 0
    while excess > 0:
        if hist[b] < limit:
            hist[b] += 1
            excess -= 1
        b = (b + 1) % N_BINS


def tile_luts(const unsigned char[:, ::1] padded, int tile_rows, int tile_cols, double clip_limit):
    cdef int th = padded.shape[0] // tile_rows
    cdef int tw = padded.shape[1] // tile_cols
    cdef long long n = <long long>th * tw
    luts_arr = np.empty((tile_rows, tile_cols, N_BINS), dtype=np.int64)
    cdef long long[:, :, ::1] luts = luts_arr
    cdef long long hist[N_BINS]
    cdef long long cdf, cdf_min, denom, num, val
    cdef int i, j, y, x, b, occupied, first
    cdef bint finite = isfinite(clip_limit)
    cdef long long limit = 0
    if finite:
        limit = <long long>ceil(clip_limit * n / N_BINS)
    with nogil:
        for i in range(tile_rows):
            for j in range(tile_cols):
                for b in range(N_BINS):
                    hist[b] = 0
                for y in range(i * th, (i + 1) * th):
                    for x in range(j * tw, (j + 1) * tw):
                        hist[padded[y, x]] += 1
                occupied = 0
                first = -1
                for b in range(N_BINS):
                    if hist[b] > 0:
                        occupied += 1
                        if first < 0:
                            first = b
                if occupied <= 1:
                    for b in range(N_BINS):
                        luts[i, j, b] = b
                    continue
                if finite:
                    _clip(hist, limit)
                first = -1
                for b in range(N_BINS):
                    if hist[b] > 0:
                        first = b
                        break
                cdf_min = 0
                for b in range(first + 1):
                    cdf_min += hist[b]
                denom = n - cdf_min
                cdf = 0
                for b in range(N_BINS):
                    cdf += hist[b]
                    if denom == 0:
                        luts[i, j, b] = b
                        continue
                    num = 255 * (cdf - cdf_min)
                    # floor division for negative numerators
                    val = 2 * num + denom
                    if val >= 0:
                        val = val // (2 * denom)
                    else:
                        val = -((-val + 2 * denom - 1) // (2 * denom))
                    luts[i, j, b] = val if val > 0 else 0
    return luts_arr


cdef inline void _axis(int pos2, int tile, int n_tiles, int* i0, int* i1, long long* w0, long long* w1) noexcept nogil:
    cdef int a = pos2 - tile
    cdef int k
    if a < 0:
        k = -1
    else:
        k = a // (2 * tile)
    if k < 0:
        i0[0] = 0; i1[0] = 0; w0[0] = 2 * tile; w1[0] = 0
    elif k + 1 > n_tiles - 1:
        i0[0] = n_tiles - 1; i1[0] = n_tiles - 1; w0[0] = 2 * tile; w1[0] = 0
    else:
        i0[0] = k; i1[0] = k + 1
        w1[0] = pos2 - (2 * k + 1) * tile
        w0[0] = 2 * tile - w1[0]


def interpolate(const unsigned char[:, ::1] image, long long[:, :, ::1] luts, int tile_h, int tile_w):
    cdef int h = image.shape[0], w = image.shape[1]
    cdef int rows = luts.shape[0], cols = luts.shape[1]
    out_arr = np.empty((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef int y, x, v, yi0, yi1, xi0, xi1
    cdef long long wy0, wy1, wx0, wx1, num
    cdef long long den = 4 * <long long>tile_h * tile_w
    with nogil:
        for y in range(h):
            _axis(2 * y + 1, tile_h, rows, &yi0, &yi1, &wy0, &wy1)
            for x in range(w):
                _axis(2 * x + 1, tile_w, cols, &xi0, &xi1, &wx0, &wx1)
                v = image[y, x]
                num = (luts[yi0, xi0, v] * wy0 * wx0 + luts[yi0, xi1, v] * wy0 * wx1
                       + luts[yi1, xi0, v] * wy1 * wx0 + luts[yi1, xi1, v] * wy1 * wx1)
                out[y, x] = <unsigned char>((2 * num + den) // (2 * den))
    return out_arr
