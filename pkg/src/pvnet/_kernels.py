"""Compiled inner loops for the hot paths (neighbour max-pooling, rasterisation)."""

import numba
import numpy as np


@numba.njit(cache=True)
def gather_max_kernel(x, index):
    n, k = index.shape
    channels = x.shape[1]
    out = np.empty((n, channels), dtype=x.dtype)
    src = np.empty((n, channels), dtype=np.int64)
    for i in range(n):
        j0 = index[i, 0]
        for c in range(channels):
            out[i, c] = x[j0, c]
            src[i, c] = j0
        for j in range(1, k):
            r = index[i, j]
            for c in range(channels):
                v = x[r, c]
                # strict comparison keeps the lowest neighbour slot on ties
                if v > out[i, c]:
                    out[i, c] = v
                    src[i, c] = r
    return out, src


@numba.njit(cache=True)
def rasterize_kernel(px, py, depth, faces, height, width):
    """Z-buffer rasterisation of projected triangles.

    ``px``/``py`` are vertex positions in pixel units, ``depth`` is distance
    from the image plane (smaller is nearer). Returns the nearest depth per
    pixel, ``inf`` where no triangle covers the pixel centre.
    """
    zbuf = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, z0 = px[a], py[a], depth[a]
        x1, y1, z1 = px[b], py[b], depth[b]
        x2, y2, z2 = px[c], py[c], depth[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for yi in range(ymin, ymax + 1):
            cy = yi + 0.5
            for xi in range(xmin, xmax + 1):
                cx = xi + 0.5
                w0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) / area
                w1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * z0 + w1 * z1 + w2 * z2
                if z < zbuf[yi, xi]:
                    zbuf[yi, xi] = z
    return zbuf


@numba.njit(cache=True)
def scatter_max_grad_kernel(g, src, n_src):
    """Adjoint of gather_max: route each output gradient to its winning source row."""
    n, channels = g.shape
    out = np.zeros((n_src, channels), dtype=g.dtype)
    for i in range(n):
        for c in range(channels):
            out[src[i, c], c] += g[i, c]
    return out
