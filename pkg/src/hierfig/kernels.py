"""Hot numeric kernels.

Each kernel has a pure-numpy implementation (``*_np``) and a numba one
(``*_nb``). The unsuffixed public name is bound to the numba variant when
JIT is enabled (see :mod:`hierfig._accel`), otherwise to the numpy one.
Both variants must agree exactly on decisions (kept boxes, ranks) and to
rounding on values; ``tests/test_kernels.py`` checks this.

Box arrays are ``(n, 4)`` float64 in ``x_min, y_min, x_max, y_max`` order.
"""

import numpy as np

from ._accel import JIT_ENABLED, njit

# --------------------------------------------------------------------- numpy


def iou_matrix_np(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def greedy_nms_np(boxes, threshold):
    """Suppressor index per box; ``-1`` marks a survivor.

    ``boxes`` must already be in priority order. A box is suppressed by the
    first earlier survivor whose IoU with it is ``>= threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    suppressor = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for i in range(n):
        if not alive[i]:
            continue
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size == 0:
            break
        ious = iou_matrix_np(boxes[i:i + 1], boxes[rest])[0]
        hit = rest[ious >= threshold]
        alive[hit] = False
        suppressor[hit] = i
    return suppressor


def _bilinear_coords_np(u, size):
    x = np.clip(u * size - 0.5, 0.0, size - 1)
    x0 = np.floor(x).astype(np.int64)
    x1 = np.minimum(x0 + 1, size - 1)
    return x0, x1, x - x0


def roi_pool_np(fmap, box, grid):
    """Bilinear ROI pooling, one sample at each bin centre.

    ``fmap`` is ``(H, W, C)``; ``box`` is panel-normalized. Sample positions
    follow the align-corners-false convention and are clamped to the map
    border. Returns a ``(grid * grid * C,)`` vector in ``(gy, gx, c)`` order.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    h, w, _ = fmap.shape
    x_min, y_min, x_max, y_max = (float(v) for v in box)
    t = (np.arange(grid) + 0.5) / grid
    us = x_min + t * (x_max - x_min)
    vs = y_min + t * (y_max - y_min)
    x0, x1, wx = _bilinear_coords_np(us, w)
    y0, y1, wy = _bilinear_coords_np(vs, h)
    top = fmap[y0][:, x0] * (1 - wx)[None, :, None] + fmap[y0][:, x1] * wx[None, :, None]
    bot = fmap[y1][:, x0] * (1 - wx)[None, :, None] + fmap[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out.reshape(-1)


def gt_ranks_np(sim, gt):
    """0-based rank of each query's ground-truth item.

    Items scoring strictly higher rank ahead; exact ties are broken by
    gallery index ascending.
    """
    sim = np.asarray(sim, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    rows = np.arange(sim.shape[0])
    target = sim[rows, gt][:, None]
    idx = np.arange(sim.shape[1])[None, :]
    ahead = (sim > target) | ((sim == target) & (idx < gt[:, None]))
    return ahead.sum(axis=1).astype(np.int64)


# --------------------------------------------------------------------- numba


@njit
def _iou_pair_nb(a0, a1, a2, a3, b0, b1, b2, b3):
    iw = min(a2, b2) - max(a0, b0)
    ih = min(a3, b3) - max(a1, b1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@njit
def iou_matrix_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou_pair_nb(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                                     b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


@njit
def greedy_nms_nb(boxes, threshold):
    n = boxes.shape[0]
    suppressor = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if suppressor[i] != -1:
            continue
        for j in range(i + 1, n):
            if suppressor[j] != -1:
                continue
            v = _iou_pair_nb(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                             boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3])
            if v >= threshold:
                suppressor[j] = i
    return suppressor


@njit
def roi_pool_nb(fmap, box, grid):
    h = fmap.shape[0]
    w = fmap.shape[1]
    c = fmap.shape[2]
    out = np.empty((grid, grid, c))
    for gy in range(grid):
        v = box[1] + (gy + 0.5) / grid * (box[3] - box[1])
        y = min(max(v * h - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, h - 1)
        wy = y - y0
        for gx in range(grid):
            u = box[0] + (gx + 0.5) / grid * (box[2] - box[0])
            x = min(max(u * w - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, w - 1)
            wx = x - x0
            for k in range(c):
                top = fmap[y0, x0, k] * (1 - wx) + fmap[y0, x1, k] * wx
                bot = fmap[y1, x0, k] * (1 - wx) + fmap[y1, x1, k] * wx
                out[gy, gx, k] = top * (1 - wy) + bot * wy
    return out.reshape(-1)


@njit
def gt_ranks_nb(sim, gt):
    q = sim.shape[0]
    g = sim.shape[1]
    ranks = np.zeros(q, dtype=np.int64)
    for i in range(q):
        t = sim[i, gt[i]]
        r = 0
        for j in range(g):
            s = sim[i, j]
            if s > t or (s == t and j < gt[i]):
                r += 1
        ranks[i] = r
    return ranks


# ------------------------------------------------------------------ dispatch


def _as_boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


if JIT_ENABLED:

    def iou_matrix(a, b):
        return iou_matrix_nb(_as_boxes(a), _as_boxes(b))

    def greedy_nms(boxes, threshold):
        return greedy_nms_nb(_as_boxes(boxes), float(threshold))

    def roi_pool(fmap, box, grid):
        return roi_pool_nb(np.ascontiguousarray(fmap, dtype=np.float64),
                           np.asarray(box, dtype=np.float64), int(grid))

    def gt_ranks(sim, gt):
        return gt_ranks_nb(np.ascontiguousarray(sim, dtype=np.float64),
                           np.asarray(gt, dtype=np.int64))

else:
    iou_matrix = iou_matrix_np
    greedy_nms = greedy_nms_np
    roi_pool = roi_pool_np
    gt_ranks = gt_ranks_np

BACKEND = "numba" if JIT_ENABLED else "numpy"
