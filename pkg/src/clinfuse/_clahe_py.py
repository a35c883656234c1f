"""Pure numpy CLAHE kernels. Mirror of ``_clahe_ext.pyx``; both must agree bit for bit."""

import math

import numpy as np

N_BINS = 256


def clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    """Clip at ``limit`` and redistribute the excess without pushing any bin past it."""
    hist = hist.astype(np.int64).copy()
    excess = int(np.maximum(hist - limit, 0).sum())
    np.minimum(hist, limit, out=hist)
    n = hist.size
    while excess >= n:
        inc = excess // n
        give = np.minimum(inc, limit - hist)
        hist += give
        excess -= int(give.sum())
    b = 0
    while excess > 0:
        if hist[b] < limit:
            hist[b] += 1
            excess -= 1
        b = (b + 1) % n
    return hist


def tile_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.int64)
    n = tile.size
    if np.count_nonzero(hist) <= 1:
        return np.arange(N_BINS, dtype=np.int64)
    if math.isfinite(clip_limit):
        hist = clip_histogram(hist, math.ceil(clip_limit * n / N_BINS))
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[np.flatnonzero(hist)[0]])
    denom = n - cdf_min
    if denom == 0:
        return np.arange(N_BINS, dtype=np.int64)
    num = 255 * (cdf - cdf_min)
    return np.maximum((2 * num + denom) // (2 * denom), 0).astype(np.int64)


def tile_luts(padded: np.ndarray, tile_rows: int, tile_cols: int, clip_limit: float) -> np.ndarray:
    th = padded.shape[0] // tile_rows
    tw = padded.shape[1] // tile_cols
    luts = np.empty((tile_rows, tile_cols, N_BINS), dtype=np.int64)
    for i in range(tile_rows):
        for j in range(tile_cols):
            luts[i, j] = tile_lut(padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip_limit)
    return luts


def _axis_weights(size: int, tile: int, n_tiles: int):
    # doubled coordinates keep every weight an integer: pixel centre 2y+1, tile centre (2i+1)*tile
    pos = 2 * np.arange(size, dtype=np.int64) + 1
    i0 = (pos - tile) // (2 * tile)
    i1 = i0 + 1
    w1 = pos - (2 * i0 + 1) * tile
    w0 = 2 * tile - w1
    low = i0 < 0
    high = i1 > n_tiles - 1
    i0 = np.where(low, 0, np.where(high, n_tiles - 1, i0))
    i1 = np.where(low, 0, np.where(high, n_tiles - 1, i1))
    w0 = np.where(low | high, 2 * tile, w0)
    w1 = np.where(low | high, 0, w1)
    return i0, i1, w0, w1


def interpolate(image: np.ndarray, luts: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    h, w = image.shape
    rows, cols = luts.shape[:2]
    yi0, yi1, wy0, wy1 = _axis_weights(h, tile_h, rows)
    xi0, xi1, wx0, wx1 = _axis_weights(w, tile_w, cols)
    v = image.astype(np.int64)
    Y0, X0 = yi0[:, None], xi0[None, :]
    Y1, X1 = yi1[:, None], xi1[None, :]
    num = (
        luts[Y0, X0, v] * (wy0[:, None] * wx0[None, :])
        + luts[Y0, X1, v] * (wy0[:, None] * wx1[None, :])
        + luts[Y1, X0, v] * (wy1[:, None] * wx0[None, :])
        + luts[Y1, X1, v] * (wy1[:, None] * wx1[None, :])
    )
    den = 4 * tile_h * tile_w
    return ((2 * num + den) // (2 * den)).astype(np.uint8)
