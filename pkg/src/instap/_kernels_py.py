"""Pure-numpy kernels, used when the compiled extension is unavailable."""

import numpy as np

CIRCLE, SQUARE, TRIANGLE = 0, 1, 2


def object_mask(shape, size):
    """Boolean ``size x size`` footprint of one shape in its bounding square."""
    idx = 2 * np.arange(size, dtype=np.int64) + 1 - size
    du = idx[None, :]
    dv = idx[:, None]
    if shape == SQUARE:
        return np.ones((size, size), dtype=bool)
    if shape == CIRCLE:
        return du * du + dv * dv <= size * size
    v = np.arange(size, dtype=np.int64)[:, None]
    return np.abs(du) <= v + 1


def rasterize(frames, shapes, sizes, xs, ys, colors):
    T, H, W, _ = frames.shape
    for k in range(len(shapes)):
        s = int(sizes[k])
        mask = object_mask(int(shapes[k]), s)
        for t in range(T):
            x0, y0 = int(xs[k, t]), int(ys[k, t])
            # clip the stamp to the canvas
            ya, yb = max(y0, 0), min(y0 + s, H)
            xa, xb = max(x0, 0), min(x0 + s, W)
            if ya >= yb or xa >= xb:
                continue
            m = mask[ya - y0:yb - y0, xa - x0:xb - x0]
            frames[t, ya:yb, xa:xb][m] = colors[k]


def bilinear_resize(img, out_h, out_w):
    h, w, _ = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None, None]
    wx = (sx - x0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d)


def gt_ranks(sim, gt):
    q = np.arange(sim.shape[0])
    ref = sim[q, gt][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    better = (sim > ref) | ((sim == ref) & (cols < gt[:, None]))
    return better.sum(axis=1).astype(np.int64)
