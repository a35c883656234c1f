"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    """Sum of precision x recall increment over every cut of the stable descending ranking."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])  # sorted() is stable
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for k in range(1, len(order) + 1):
        top = order[:k]
        tp = sum(labels[i] for i in top)
        precision = tp / k
        recall = tp / n_pos
        area += precision * (recall - prev_recall)
        prev_recall = recall
    return area


def naive_clahe_no_clip(image, tile_rows, tile_cols):
    """Per-tile histogram equalisation and bilinear blending, written with plain loops and floats.

    Only valid when the tile size divides the image exactly.
    """
    h, w = len(image), len(image[0])
    th, tw = h // tile_rows, w // tile_cols
    maps = {}
    for i in range(tile_rows):
        for j in range(tile_cols):
            counts = [0] * 256
            for y in range(i * th, (i + 1) * th):
                for x in range(j * tw, (j + 1) * tw):
                    counts[image[y][x]] += 1
            occupied = [v for v in range(256) if counts[v]]
            if len(occupied) == 1:
                maps[i, j] = list(range(256))
                continue
            n = th * tw
            cdf_min = counts[occupied[0]]
            running, m = 0, []
            for v in range(256):
                running += counts[v]
                m.append(max(0, math.floor(255 * (running - cdf_min) / (n - cdf_min) + 0.5)))
            maps[i, j] = m

    def neighbours(pos, size, count):
        centres = [(k + 0.5) * size - 0.5 for k in range(count)]
        if pos <= centres[0]:
            return [(0, 1.0)]
        if pos >= centres[-1]:
            return [(count - 1, 1.0)]
        for k in range(count - 1):
            if centres[k] <= pos < centres[k + 1]:
                f = (pos - centres[k]) / size
                return [(k, 1.0 - f), (k + 1, f)]
        raise AssertionError("unreachable")

    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        ny = neighbours(y, th, tile_rows)
        for x in range(w):
            nx = neighbours(x, tw, tile_cols)
            v = image[y][x]
            acc = 0.0
            for i, wy in ny:
                for j, wx in nx:
                    acc += wy * wx * maps[i, j][v]
            out[y, x] = math.floor(acc + 0.5)
    return out


def global_equalize(image):
    """Classic global histogram equalisation (cdf_min-normalised)."""
    flat = np.asarray(image).ravel()
    counts = np.bincount(flat, minlength=256)
    if np.count_nonzero(counts) == 1:
        return np.asarray(image).copy()
    cdf = np.cumsum(counts)
    cdf_min = cdf[np.flatnonzero(counts)[0]]
    lut = np.floor(255 * (cdf - cdf_min) / (flat.size - cdf_min) + 0.5)
    lut = np.maximum(lut, 0).astype(np.uint8)
    return lut[np.asarray(image)]


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar f at float64 array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def grad_check_groups(loss_fn, named_params, max_coords=24, eps=1e-6, seed=0):
    """Relative error between autograd and central differences for each named parameter.

    Large groups are checked on a seeded sample of ``max_coords`` coordinates.
    Parameters must be float64 leaf tensors; ``loss_fn()`` returns a scalar tensor.
    """
    import torch

    rng = np.random.default_rng(seed)
    named_params = dict(named_params)
    for p in named_params.values():
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in named_params.items():
        analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        flat = p.data.view(-1)
        coords = np.arange(flat.numel())
        if flat.numel() > max_coords:
            coords = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        with torch.no_grad():
            for k, c in enumerate(coords):
                old = flat[c].item()
                flat[c] = old + eps
                fp = loss_fn().item()
                flat[c] = old - eps
                fm = loss_fn().item()
                flat[c] = old
                numeric[k] = (fp - fm) / (2 * eps)
        a = analytic.numpy()[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale < 1e-10 else float(np.linalg.norm(a - numeric) / scale)
    return errors
