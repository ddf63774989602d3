# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same signatures and results as ``hals._fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, sqrt, isnan, fmin, fmax

cnp.import_array()


def zbuffer_winners(flat_idx, ranges, Py_ssize_t n_bins):
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(flat_idx, dtype=np.int64)
    cdef double[::1] r = np.ascontiguousarray(ranges, dtype=np.float64)
    out = np.full(n_bins, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] win = out
    cdef Py_ssize_t i, b, w
    for i in range(idx.shape[0]):
        b = idx[i]
        w = win[b]
        # strict '<' keeps the lowest index on ties
        if w < 0 or r[i] < r[w]:
            win[b] = i
    return out


cdef inline double _box_hit(double* o, double* d, double* box,
                            double t_min) nogil:
    cdef double t_near = -INFINITY, t_far = INFINITY
    cdef double lo, hi, t1, t2
    cdef int a
    for a in range(3):
        lo = box[a] - 0.5 * box[3 + a]
        hi = box[a] + 0.5 * box[3 + a]
        if d[a] == 0.0:
            if o[a] < lo or o[a] > hi:
                return INFINITY
            continue
        t1 = (lo - o[a]) / d[a]
        t2 = (hi - o[a]) / d[a]
        t_near = fmax(t_near, fmin(t1, t2))
        t_far = fmin(t_far, fmax(t1, t2))
    if t_near > t_far:
        return INFINITY
    if t_near > t_min:
        return t_near
    return t_far


cdef inline double _cyl_hit(double* o, double* d, double* cyl,
                            double t_min, double t_max) nogil:
    cdef double cx = cyl[0], cy = cyl[1], z0 = cyl[2], rad = cyl[3]
    cdef double z1 = z0 + cyl[4]
    cdef double ox = o[0] - cx, oy = o[1] - cy
    cdef double a = d[0] * d[0] + d[1] * d[1]
    cdef double b = 2.0 * (ox * d[0] + oy * d[1])
    cdef double c = ox * ox + oy * oy - rad * rad
    cdef double best = INFINITY, t, zt, px, py, disc, sq, zc
    cdef int k
    if a > 0.0:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = sqrt(disc)
            for k in range(2):
                t = (-b + (2 * k - 1) * sq) / (2.0 * a)
                zt = o[2] + t * d[2]
                if zt >= z0 and zt <= z1 and t > t_min and t <= t_max and t < best:
                    best = t
    if d[2] != 0.0:
        for k in range(2):
            zc = z0 if k == 0 else z1
            t = (zc - o[2]) / d[2]
            px = ox + t * d[0]
            py = oy + t * d[1]
            if px * px + py * py <= rad * rad and t > t_min and t <= t_max and t < best:
                best = t
    return best


def raycast(origin, dirs, double t_min, double t_max, double ground_z,
            boxes, cylinders):
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, ::1] dv = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[:, ::1] bx = np.ascontiguousarray(
        np.asarray(boxes, dtype=np.float64).reshape(-1, 6))
    cdef double[:, ::1] cy = np.ascontiguousarray(
        np.asarray(cylinders, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t n = dv.shape[0], i, k
    out = np.full(n, INFINITY)
    cdef double[::1] best = out
    cdef double t, cur
    cdef bint has_ground = not isnan(ground_z)
    with nogil:
        for i in range(n):
            cur = INFINITY
            if has_ground and dv[i, 2] != 0.0:
                t = (ground_z - o[2]) / dv[i, 2]
                if t > t_min and t <= t_max:
                    cur = t
            for k in range(bx.shape[0]):
                t = _box_hit(&o[0], &dv[i, 0], &bx[k, 0], t_min)
                if t > t_min and t <= t_max and t < cur:
                    cur = t
            for k in range(cy.shape[0]):
                t = _cyl_hit(&o[0], &dv[i, 0], &cy[k, 0], t_min, t_max)
                if t < cur:
                    cur = t
            best[i] = cur
    return out


def linear_assignment(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    if c.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got {np.shape(cost)}")
    u_arr = np.zeros(n)
    v_arr = np.zeros(n)
    short_arr = np.empty(n)
    path_arr = np.empty(n, dtype=np.int64)
    rfc_arr = np.full(n, -1, dtype=np.int64)
    cfr_arr = np.full(n, -1, dtype=np.int64)
    done_arr = np.empty(n, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, shortest = short_arr
    cdef cnp.int64_t[::1] path = path_arr, row_for_col = rfc_arr, col_for_row = cfr_arr
    cdef cnp.uint8_t[::1] done_col = done_arr
    cdef Py_ssize_t cur_row, i, j, sink, jmin, tmp
    cdef double min_val, reduced, lowest
    cdef bint failed = False
    with nogil:
        for cur_row in range(n):
            for j in range(n):
                shortest[j] = INFINITY
                path[j] = -1
                done_col[j] = 0
            min_val = 0.0
            i = cur_row
            sink = -1
            while sink == -1:
                lowest = INFINITY
                jmin = -1
                for j in range(n):
                    if done_col[j]:
                        continue
                    reduced = min_val + c[i, j] - u[i] - v[j]
                    if reduced < shortest[j]:
                        shortest[j] = reduced
                        path[j] = i
                    # first index wins ties, matching np.argmin
                    if shortest[j] < lowest or (jmin == -1 and shortest[j] == lowest):
                        lowest = shortest[j]
                        jmin = j
                if jmin == -1 or lowest == INFINITY:
                    failed = True
                    break
                min_val = lowest
                done_col[jmin] = 1
                if row_for_col[jmin] == -1:
                    sink = jmin
                else:
                    i = row_for_col[jmin]
            if failed:
                break
            u[cur_row] += min_val
            for j in range(n):
                if done_col[j]:
                    if j != sink:
                        u[row_for_col[j]] += min_val - shortest[j]
                    v[j] -= min_val - shortest[j]
            j = sink
            while True:
                i = path[j]
                row_for_col[j] = i
                tmp = col_for_row[i]
                col_for_row[i] = j
                j = tmp
                if i == cur_row:
                    break
    if failed:
        raise ValueError("cost matrix admits no finite assignment")
    return cfr_arr
