"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
``hals.kernels`` picks the compiled one when it imports.
"""

import numpy as np

INF = np.inf


def zbuffer_winners(flat_idx, ranges, n_bins):
    """Index of the smallest-range point per bin, -1 for empty bins.

    Ties resolve to the lowest point index.
    """
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    ranges = np.asarray(ranges, dtype=np.float64)
    winners = np.full(n_bins, -1, dtype=np.int64)
    if flat_idx.size == 0:
        return winners
    order = np.lexsort((np.arange(flat_idx.size), ranges, flat_idx))
    sorted_bins = flat_idx[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_bins[1:] != sorted_bins[:-1]
    winners[sorted_bins[first]] = order[first]
    return winners


def raycast(origin, dirs, t_min, t_max, ground_z, boxes, cylinders):
    """Nearest hit distance along each unit ray, ``inf`` when nothing is hit.

    Args:
        origin: (3,) ray origin shared by all rays.
        dirs: (R, 3) unit directions.
        t_min: hits must satisfy ``t > t_min``.
        t_max: hits must satisfy ``t <= t_max``.
        ground_z: height of the ground plane, or NaN for no ground.
        boxes: (B, 6) rows of (cx, cy, cz, ex, ey, ez), full extents.
        cylinders: (C, 5) rows of (cx, cy, base_z, radius, height).
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    best = np.full(n, INF)

    def keep(t):
        ok = (t > t_min) & (t <= t_max) & (t < best)
        best[ok] = t[ok]

    if not np.isnan(ground_z):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz != 0.0, (ground_z - origin[2]) / dz, INF)
        keep(t)

    # list order is the tie-break: strict '<' keeps the earlier primitive
    for box in np.asarray(boxes, dtype=np.float64).reshape(-1, 6):
        lo = box[:3] - 0.5 * box[3:]
        hi = box[:3] + 0.5 * box[3:]
        t_near = np.full(n, -INF)
        t_far = np.full(n, INF)
        miss = np.zeros(n, dtype=bool)
        for a in range(3):
            d = dirs[:, a]
            par = d == 0.0
            miss |= par & ((origin[a] < lo[a]) | (origin[a] > hi[a]))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[a] - origin[a]) / d
                t2 = (hi[a] - origin[a]) / d
            ta = np.where(par, -INF, np.minimum(t1, t2))
            tb = np.where(par, INF, np.maximum(t1, t2))
            t_near = np.maximum(t_near, ta)
            t_far = np.minimum(t_far, tb)
        hit = ~miss & (t_near <= t_far)
        # entry face if in front of t_min, else the exit face
        t = np.where(t_near > t_min, t_near, t_far)
        keep(np.where(hit, t, INF))

    for cyl in np.asarray(cylinders, dtype=np.float64).reshape(-1, 5):
        cx, cy, z0, rad, height = cyl
        z1 = z0 + height
        ox, oy = origin[0] - cx, origin[1] - cy
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cand = np.full((n, 4), INF)
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - rad * rad
        disc = b * b - 4.0 * a * c
        side = (a > 0.0) & (disc >= 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.where(side, disc, 0.0))
            for k, sgn in enumerate((-1.0, 1.0)):
                t = (-b + sgn * sq) / (2.0 * a)
                zt = origin[2] + t * dz
                ok = side & (zt >= z0) & (zt <= z1)
                cand[:, k] = np.where(ok, t, INF)
            for k, zc in enumerate((z0, z1)):
                t = (zc - origin[2]) / dz
                px = ox + t * dx
                py = oy + t * dy
                ok = (dz != 0.0) & (px * px + py * py <= rad * rad)
                cand[:, 2 + k] = np.where(ok, t, INF)
        cand[~((cand > t_min) & (cand <= t_max))] = INF
        keep(cand.min(axis=1))
    return best


def linear_assignment(cost):
    """Min-cost perfect matching on a square cost matrix.

    Shortest augmenting path with row/column potentials (Jonker-Volgenant
    flavour), O(n^3). Returns ``col_for_row``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n)
    v = np.zeros(n)
    row_for_col = np.full(n, -1, dtype=np.int64)
    col_for_row = np.full(n, -1, dtype=np.int64)
    for cur_row in range(n):
        shortest = np.full(n, INF)
        path = np.full(n, -1, dtype=np.int64)
        done_col = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            free = ~done_col
            reduced = min_val + cost[i] - u[i] - v
            better = free & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            cand = np.where(free, shortest, INF)
            j = int(np.argmin(cand))
            min_val = cand[j]
            if not np.isfinite(min_val):
                raise ValueError("cost matrix admits no finite assignment")
            done_col[j] = True
            if row_for_col[j] == -1:
                sink = j
            else:
                i = int(row_for_col[j])
        # potentials of visited rows/columns
        u[cur_row] += min_val
        visited = done_col.copy()
        visited[sink] = False
        rows = row_for_col[visited]
        u[rows] += min_val - shortest[visited]
        v[done_col] -= min_val - shortest[done_col]
        j = sink
        while True:
            i = int(path[j])
            row_for_col[j] = i
            col_for_row[i], j = j, col_for_row[i]
            if i == cur_row:
                break
    return col_for_row
