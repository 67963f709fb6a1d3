"""Independent reference implementations used to check the package.

Everything here is deliberately written from first principles (plain loops,
scalar arithmetic, dense linear algebra) and shares no code with the package
beyond the public data types it checks.
"""

from __future__ import annotations

import math

import numpy as np


# -- geometry -----------------------------------------------------------------


def iou_scalar(a, b) -> float:
    """IoU via direct area arithmetic on scalars."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    return inter / (area_a + area_b - inter)


def iou_rasterized(a, b, scale: int = 1) -> float:
    """IoU by rasterizing both boxes onto an integer pixel grid.

    Only exact for integer-aligned boxes (after scaling); used to cross-check
    the area arithmetic on hand-picked examples.
    """
    x0 = int(min(a.x_min, b.x_min) * scale)
    y0 = int(min(a.y_min, b.y_min) * scale)
    x1 = int(max(a.x_max, b.x_max) * scale)
    y1 = int(max(a.y_max, b.y_max) * scale)
    grid_a = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    grid_b = np.zeros_like(grid_a)
    grid_a[int(a.y_min * scale) - y0:int(a.y_max * scale) - y0,
           int(a.x_min * scale) - x0:int(a.x_max * scale) - x0] = True
    grid_b[int(b.y_min * scale) - y0:int(b.y_max * scale) - y0,
           int(b.x_min * scale) - x0:int(b.x_max * scale) - x0] = True
    union = (grid_a | grid_b).sum()
    if union == 0:
        return 0.0
    return (grid_a & grid_b).sum() / union


def nms_exhaustive(dets, iou_threshold: float):
    """Greedy suppression re-implemented with plain nested loops."""
    def key(d):
        return (-d.score, d.box.x_min, d.box.y_min, d.detector_id)

    kept = []
    for d in sorted(dets, key=key):
        suppressed = False
        for k in kept:
            if k.class_id != d.class_id:
                continue
            if iou_scalar(d.box, k.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept


# -- detection evaluation -----------------------------------------------------


def ap_threshold_sweep(dets, gts, class_id: int, iou_thresh: float) -> float:
    """Average precision by sweeping every score threshold.

    Builds the (recall, precision) point for each prefix of the score-ranked
    detections, then integrates recall steps against the maximum precision at
    any recall at least as large.
    """
    dets_c = [d for d in dets if d.class_id == class_id]
    gts_c = [g for g in gts if g.class_id == class_id]
    order = sorted(range(len(dets_c)), key=lambda i: -dets_c[i].score)
    matched = set()
    flags = []
    for i in order:
        d = dets_c[i]
        best, best_j = 0.0, None
        for j, g in enumerate(gts_c):
            if j in matched or g.image_id != d.image_id:
                continue
            o = iou_scalar(d.box, g.box)
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= iou_thresh:
            matched.add(best_j)
            flags.append(1)
        else:
            flags.append(0)
    points = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / len(gts_c), tp / k))
    ap = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p2 for r2, p2 in points if r2 >= r)
            prev_r = r
    return ap


# -- morphology ----------------------------------------------------------------


def dilate_scan(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation by scanning each pixel's full (2r+1)^2 neighborhood."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                        out[y, x] = True
                        break
                else:
                    continue
                break
    return out


# -- Poisson system --------------------------------------------------------------


def dense_poisson_solve(req) -> np.ndarray:
    """Assemble the blend's linear system densely and solve it directly.

    Returns the full target-shaped float64 raster with the solved interior.
    """
    src = np.atleast_3d(np.asarray(req.source, dtype=np.float64))
    tgt = np.atleast_3d(np.asarray(req.target, dtype=np.float64))
    mask = np.asarray(req.mask, dtype=bool)
    oy, ox = req.offset
    coords = [(y, x) for y in range(mask.shape[0]) for x in range(mask.shape[1]) if mask[y, x]]
    pos_index = {c: i for i, c in enumerate(coords)}
    n = len(coords)
    channels = tgt.shape[2]
    out = tgt.copy()
    if n == 0:
        return out[:, :, 0] if np.asarray(req.target).ndim == 2 else out
    a = np.zeros((n, n))
    b = np.zeros((n, channels))
    sh, sw = mask.shape
    for i, (y, x) in enumerate(coords):
        a[i, i] = 4.0
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            qy, qx = y + dy, x + dx
            if (qy, qx) in pos_index:
                a[i, pos_index[(qy, qx)]] = -1.0
            else:
                b[i] += tgt[y + oy + dy, x + ox + dx]
            sy = min(max(qy, 0), sh - 1)
            sx = min(max(qx, 0), sw - 1)
            b[i] += src[y, x] - src[sy, sx]
    solution = np.linalg.solve(a, b)
    for i, (y, x) in enumerate(coords):
        out[y + oy, x + ox] = solution[i]
    return out[:, :, 0] if np.asarray(req.target).ndim == 2 else out


def stencil_residual(req, blended: np.ndarray) -> float:
    """Max abs violation of the Poisson stencil over interior pixels."""
    src = np.atleast_3d(np.asarray(req.source, dtype=np.float64))
    values = np.atleast_3d(np.asarray(blended, dtype=np.float64))
    tgt = np.atleast_3d(np.asarray(req.target, dtype=np.float64))
    mask = np.asarray(req.mask, dtype=bool)
    oy, ox = req.offset
    sh, sw = mask.shape
    worst = 0.0
    for y in range(sh):
        for x in range(sw):
            if not mask[y, x]:
                continue
            for c in range(values.shape[2]):
                lhs = 4.0 * values[y + oy, x + ox, c]
                rhs = 0.0
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    qy, qx = y + dy, x + dx
                    if 0 <= qy < sh and 0 <= qx < sw and mask[qy, qx]:
                        lhs -= values[qy + oy, qx + ox, c]
                    else:
                        rhs += tgt[y + oy + dy, x + ox + dx, c]
                    sy = min(max(qy, 0), sh - 1)
                    sx = min(max(qx, 0), sw - 1)
                    rhs += src[y, x, c] - src[sy, sx, c]
                worst = max(worst, abs(lhs - rhs))
    return worst


def jacobi_iterations(req, tol: float, max_iters: int = 200000) -> int:
    """Iterations Jacobi needs on the same system (sanity benchmark)."""
    src = np.atleast_3d(np.asarray(req.source, dtype=np.float64))
    tgt = np.atleast_3d(np.asarray(req.target, dtype=np.float64))
    mask = np.asarray(req.mask, dtype=bool)
    oy, ox = req.offset
    coords = [(y, x) for y in range(mask.shape[0]) for x in range(mask.shape[1]) if mask[y, x]]
    pos_index = {c: i for i, c in enumerate(coords)}
    n = len(coords)
    sh, sw = mask.shape
    b = np.zeros(n)
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for i, (y, x) in enumerate(coords):
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            qy, qx = y + dy, x + dx
            if (qy, qx) in pos_index:
                neighbors[i].append(pos_index[(qy, qx)])
            else:
                b[i] += tgt[y + oy + dy, x + ox + dx, 0]
            sy = min(max(qy, 0), sh - 1)
            sx = min(max(qx, 0), sw - 1)
            b[i] += src[y, x, 0] - src[sy, sx, 0]
    x_vec = np.array([tgt[y + oy, x + ox, 0] for (y, x) in coords])
    bnorm = max(float(np.linalg.norm(b)), 1e-30)
    for it in range(1, max_iters + 1):
        neigh_sum = np.array([x_vec[ns].sum() for ns in neighbors])
        new_x = (b + neigh_sum) / 4.0
        residual = np.linalg.norm(b + neigh_sum - 4.0 * x_vec) / bnorm
        x_vec = new_x
        if residual <= tol:
            return it
    return max_iters


# -- search and graphs -----------------------------------------------------------


def knn_linear_scan(matrix: np.ndarray, ids: list[str], query: np.ndarray, k: int):
    """Exact top-k by full scan; ties break on item id like the index."""
    q = np.asarray(query, dtype=np.float64)
    dists = 1.0 - (matrix.astype(np.float64) * q).sum(axis=1)
    order = sorted(range(len(ids)), key=lambda i: (dists[i], ids[i]))
    return [(ids[i], float(dists[i])) for i in order[:k]]


def bfs_components(nodes, edges) -> list[list[str]]:
    """Connected components via breadth-first transitive closure."""
    adjacency = {n: set() for n in nodes}
    for a, b in edges:
        adjacency[a].add(b)
        adjacency[b].add(a)
    seen = set()
    components = []
    for start in nodes:
        if start in seen:
            continue
        frontier = [start]
        seen.add(start)
        component = []
        while frontier:
            current = frontier.pop()
            component.append(current)
            for nxt in adjacency[current]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        components.append(sorted(component))
    return sorted(components, key=lambda c: c[0])


def pairwise_dup_edges(items, tau: float):
    """All near-duplicate pairs by the O(n^2) scan."""
    edges = set()
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            a = np.asarray(items[i].embedding, dtype=np.float64)
            b = np.asarray(items[j].embedding, dtype=np.float64)
            d = 1.0 - float((a * b).sum())
            if d <= tau:
                edges.add(tuple(sorted((items[i].item_id, items[j].item_id))))
    return edges


# -- model ----------------------------------------------------------------------


def forward_straightline(model, x: np.ndarray):
    """Forward pass re-written with transposed matrix products."""
    x = np.asarray(x, dtype=np.float64)
    h_pre = model.shared_w.T @ x + model.shared_b
    h = np.where(h_pre > 0, h_pre, 0.0)
    logits = {}
    for s in model.task_specs:
        t_pre = model.branch_w[s.name].T @ h + model.branch_b[s.name]
        t = np.where(t_pre > 0, t_pre, 0.0)
        logits[s.name] = model.head_w[s.name].T @ t + model.head_b[s.name]
    return h, logits


def cross_entropy_scalar(logits: np.ndarray, label: int) -> float:
    """Single-sample cross-entropy via explicit exponentials."""
    m = max(logits)
    exps = [math.exp(z - m) for z in logits]
    return -math.log(exps[label] / sum(exps))


def finite_difference_grad(loss_fn, block: np.ndarray, entries, eps: float = 1e-4):
    """Central finite differences of loss_fn at the given flat entries."""
    grads = []
    flat = block.reshape(-1)
    for idx in entries:
        original = flat[idx]
        flat[idx] = original + eps
        plus = loss_fn()
        flat[idx] = original - eps
        minus = loss_fn()
        flat[idx] = original
        grads.append((plus - minus) / (2 * eps))
    return np.array(grads)
