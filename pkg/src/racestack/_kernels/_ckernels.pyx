# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Each function mirrors one in ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY, floor

cnp.import_array()

BACKEND = "cython"


def ransac_hypotheses(double[:, ::1] pts, long[:, ::1] samples, double tau, bint literal,
                      double slope_max, double h_lo, double h_hi):
    cdef Py_ssize_t k = samples.shape[0], n = pts.shape[0]
    models_np = np.zeros((k, 3), dtype=np.float64)
    counts_np = np.full(k, -1, dtype=np.int64)
    cdef double[:, ::1] models = models_np
    cdef long long[::1] counts = counts_np
    cdef Py_ssize_t it, i
    cdef long i0, i1, i2
    cdef double x0, y0, z0, x1, y1, z1, x2, y2, z2, det, a, b, h, denom, e
    cdef long long c
    for it in range(k):
        i0 = samples[it, 0]; i1 = samples[it, 1]; i2 = samples[it, 2]
        x0 = pts[i0, 0]; y0 = pts[i0, 1]; z0 = pts[i0, 2]
        x1 = pts[i1, 0]; y1 = pts[i1, 1]; z1 = pts[i1, 2]
        x2 = pts[i2, 0]; y2 = pts[i2, 1]; z2 = pts[i2, 2]
        # y = a x + b z + h through three points (Cramer's rule)
        det = (x1 - x0) * (z2 - z0) - (x2 - x0) * (z1 - z0)
        if fabs(det) < 1e-9:
            continue
        a = ((y1 - y0) * (z2 - z0) - (y2 - y0) * (z1 - z0)) / det
        b = ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) / det
        h = y0 - a * x0 - b * z0
        if fabs(a) >= slope_max or fabs(b) >= slope_max or h < h_lo or h > h_hi:
            continue
        if literal:
            denom = sqrt(1.0 + a * a + b * b + h * h)
        else:
            denom = sqrt(1.0 + a * a + b * b)
        c = 0
        for i in range(n):
            e = (pts[i, 1] - a * pts[i, 0] - b * pts[i, 2] - h) / denom
            if fabs(e) < tau:
                c += 1
        models[it, 0] = a; models[it, 1] = b; models[it, 2] = h
        counts[it] = c
    return models_np, counts_np


def raycast(double[::1] origin, double[:, ::1] dirs, double max_range,
            double[:, ::1] cylinders, double[:, ::1] walls, double ground_z):
    cdef Py_ssize_t n = dirs.shape[0], m = cylinders.shape[0], w = walls.shape[0]
    out_np = np.full(n, np.inf, dtype=np.float64)
    cdef double[::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double dx, dy, dz, best, t, fx, fy, qa, qb, qc, disc, sq, zz, ex, ey, den, s, tt
    for i in range(n):
        dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
        best = max_range
        if dz < -1e-12:
            t = (ground_z - oz) / dz
            if t > 0 and t < best:
                best = t
        for j in range(m):
            fx = ox - cylinders[j, 0]
            fy = oy - cylinders[j, 1]
            qa = dx * dx + dy * dy
            if qa < 1e-18:
                continue
            qb = 2.0 * (fx * dx + fy * dy)
            qc = fx * fx + fy * fy - cylinders[j, 2] * cylinders[j, 2]
            disc = qb * qb - 4.0 * qa * qc
            if disc < 0:
                continue
            sq = sqrt(disc)
            t = (-qb - sq) / (2.0 * qa)
            if t <= 1e-9:
                t = (-qb + sq) / (2.0 * qa)
                if t <= 1e-9:
                    continue
            if t >= best:
                continue
            zz = oz + t * dz
            if zz < cylinders[j, 3] or zz > cylinders[j, 4]:
                continue
            best = t
        for j in range(w):
            ex = walls[j, 2] - walls[j, 0]
            ey = walls[j, 3] - walls[j, 1]
            den = dx * ey - dy * ex
            if fabs(den) < 1e-12:
                continue
            # o + t d = p0 + s e
            t = ((walls[j, 0] - ox) * ey - (walls[j, 1] - oy) * ex) / den
            s = ((walls[j, 0] - ox) * dy - (walls[j, 1] - oy) * dx) / den
            if t <= 1e-9 or t >= best or s < 0.0 or s > 1.0:
                continue
            zz = oz + t * dz
            if zz < walls[j, 4] or zz > walls[j, 5]:
                continue
            best = t
        if best < max_range:
            out[i] = best
    return out_np


cdef Py_ssize_t _find(long long[::1] parent, Py_ssize_t i) nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


cdef Py_ssize_t _search(long long[::1] keys, long long key) nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == key:
        return lo
    return -1


def grid_cluster(double[:, ::1] pts, double radius):
    """Union-find over the ``<= radius`` graph using a hash grid of cell size ``radius``."""
    cdef Py_ssize_t n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    arr = np.asarray(pts)
    cells = np.floor(arr / radius).astype(np.int64)
    cdef long long OFF = 1 << 20, K = 1 << 21
    keys_all = ((cells[:, 0] + OFF) * K + (cells[:, 1] + OFF)) * K + (cells[:, 2] + OFF)
    order_np = np.argsort(keys_all, kind="stable")
    sorted_keys = keys_all[order_np]
    ukeys_np, starts_np = np.unique(sorted_keys, return_index=True)
    ends_np = np.append(starts_np[1:], n).astype(np.int64)
    cdef long long[::1] ukeys = np.ascontiguousarray(ukeys_np, dtype=np.int64)
    cdef long long[::1] starts = np.ascontiguousarray(starts_np, dtype=np.int64)
    cdef long long[::1] ends = ends_np
    cdef long long[::1] order = np.ascontiguousarray(order_np, dtype=np.int64)
    cdef long long[:, ::1] cl = np.ascontiguousarray(cells)
    parent_np = np.arange(n, dtype=np.int64)
    cdef long long[::1] parent = parent_np
    cdef double r2 = radius * radius, ddx, ddy, ddz
    cdef Py_ssize_t i, j, c, p, ra, rb
    cdef int ox, oy, oz
    cdef long long key
    for i in range(n):
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    key = ((cl[i, 0] + ox + OFF) * K + (cl[i, 1] + oy + OFF)) * K + (cl[i, 2] + oz + OFF)
                    c = _search(ukeys, key)
                    if c < 0:
                        continue
                    for p in range(starts[c], ends[c]):
                        j = order[p]
                        if j <= i:
                            continue
                        ddx = pts[i, 0] - pts[j, 0]
                        ddy = pts[i, 1] - pts[j, 1]
                        ddz = pts[i, 2] - pts[j, 2]
                        if ddx * ddx + ddy * ddy + ddz * ddz <= r2:
                            ra = _find(parent, i)
                            rb = _find(parent, j)
                            if ra != rb:
                                if ra < rb:
                                    parent[rb] = ra
                                else:
                                    parent[ra] = rb
    labels_np = np.empty(n, dtype=np.int64)
    cdef long long[::1] labels = labels_np
    remap_np = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] remap = remap_np
    cdef long long nxt = 0
    for i in range(n):
        ra = _find(parent, i)
        if remap[ra] < 0:
            remap[ra] = nxt
            nxt += 1
        labels[i] = remap[ra]
    return labels_np


def layer_smoothness(double[:, ::1] pts, long[::1] az, Py_ssize_t half_window):
    """Smoothness for every point whose full window is azimuth-contiguous; NaN elsewhere."""
    cdef Py_ssize_t n = pts.shape[0], i, j
    out_np = np.full(n, np.nan, dtype=np.float64)
    cdef double[::1] out = out_np
    cdef double sx, sy, sz, nrm
    cdef bint ok
    for i in range(half_window, n - half_window):
        if az[i + half_window] - az[i - half_window] != 2 * half_window:
            continue
        nrm = sqrt(pts[i, 0] * pts[i, 0] + pts[i, 1] * pts[i, 1] + pts[i, 2] * pts[i, 2])
        if nrm <= 0:
            continue
        sx = 0; sy = 0; sz = 0
        for j in range(i - half_window, i + half_window + 1):
            if j == i:
                continue
            sx += pts[i, 0] - pts[j, 0]
            sy += pts[i, 1] - pts[j, 1]
            sz += pts[i, 2] - pts[j, 2]
        out[i] = sqrt(sx * sx + sy * sy + sz * sz) / (2 * half_window * nrm)
    return out_np


cdef void _sym3_eig(double[3][3] a, double[3] w, double[3][3] v) noexcept nogil:
    """Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix (in place on ``a``)."""
    cdef int i, j, p, q, r, sweep
    cdef double theta, t, c, s, apq, app, aqq, arp, arq, vrp, vrq, off
    for i in range(3):
        for j in range(3):
            v[i][j] = 1.0 if i == j else 0.0
    for sweep in range(50):
        off = fabs(a[0][1]) + fabs(a[0][2]) + fabs(a[1][2])
        if off < 1e-300:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p][q]
                if fabs(apq) < 1e-300:
                    continue
                app = a[p][p]
                aqq = a[q][q]
                theta = (aqq - app) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (fabs(theta) + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                a[p][p] = app - t * apq
                a[q][q] = aqq + t * apq
                a[p][q] = 0.0
                a[q][p] = 0.0
                for r in range(3):
                    if r != p and r != q:
                        arp = a[r][p]
                        arq = a[r][q]
                        a[r][p] = c * arp - s * arq
                        a[p][r] = a[r][p]
                        a[r][q] = s * arp + c * arq
                        a[q][r] = a[r][q]
                for r in range(3):
                    vrp = v[r][p]
                    vrq = v[r][q]
                    v[r][p] = c * vrp - s * vrq
                    v[r][q] = s * vrp + c * vrq
    for i in range(3):
        w[i] = a[i][i]


def plane_patches(double[:, ::1] points, long[::1] layers, long[:, ::1] idx, cnp.uint8_t[:, ::1] found,
                  Py_ssize_t n_groups, Py_ssize_t per_layer, double fit_tol):
    cdef Py_ssize_t n = idx.shape[0], K = idx.shape[1], i, k, g, j, m, c0, c1, c2, lo, mid
    ok_np = np.zeros(n, dtype=bool)
    mu_np = np.zeros((n, 3), dtype=np.float64)
    nrm_np = np.zeros((n, 3), dtype=np.float64)
    cdef cnp.uint8_t[::1] ok = ok_np.view(np.uint8)
    cdef double[:, ::1] mu = mu_np
    cdef double[:, ::1] nrm = nrm_np
    cdef long glayer[64]
    cdef long gcount[64]
    cdef Py_ssize_t chosen[256]
    cdef double a[3][3]
    cdef double v[3][3]
    cdef double w[3]
    cdef double mx, my, mz, dx, dy, dz, dist, worst, nx, ny, nz
    cdef long lay
    cdef bint seen
    if n_groups > 64 or K > 256:
        raise ValueError("too many groups or candidates")
    for i in range(n):
        g = 0
        m = 0
        for k in range(K):
            if not found[i, k]:
                continue
            lay = layers[idx[i, k]]
            seen = False
            for j in range(g):
                if glayer[j] == lay:
                    seen = True
                    if gcount[j] < per_layer:
                        gcount[j] += 1
                        chosen[m] = idx[i, k]
                        m += 1
                    break
            if not seen and g < n_groups:
                glayer[g] = lay
                gcount[g] = 1
                g += 1
                chosen[m] = idx[i, k]
                m += 1
        if m == 0:
            continue
        mx = 0; my = 0; mz = 0
        for k in range(m):
            mx += points[chosen[k], 0]
            my += points[chosen[k], 1]
            mz += points[chosen[k], 2]
        mx /= m; my /= m; mz /= m
        mu[i, 0] = mx; mu[i, 1] = my; mu[i, 2] = mz
        for c0 in range(3):
            for c1 in range(3):
                a[c0][c1] = 0.0
        for k in range(m):
            dx = points[chosen[k], 0] - mx
            dy = points[chosen[k], 1] - my
            dz = points[chosen[k], 2] - mz
            a[0][0] += dx * dx; a[0][1] += dx * dy; a[0][2] += dx * dz
            a[1][1] += dy * dy; a[1][2] += dy * dz; a[2][2] += dz * dz
        a[1][0] = a[0][1]; a[2][0] = a[0][2]; a[2][1] = a[1][2]
        for c0 in range(3):
            for c1 in range(3):
                a[c0][c1] /= m
        _sym3_eig(a, w, v)
        lo = 0
        for c0 in range(1, 3):
            if w[c0] < w[lo]:
                lo = c0
        c1 = (lo + 1) % 3
        c2 = (lo + 2) % 3
        mid = c1 if w[c1] <= w[c2] else c2
        nx = v[0][lo]; ny = v[1][lo]; nz = v[2][lo]
        nrm[i, 0] = nx; nrm[i, 1] = ny; nrm[i, 2] = nz
        if g < n_groups:
            continue
        if not (w[lo] < 0.1 * (w[mid] if w[mid] > 1e-12 else 1e-12) and w[mid] > fit_tol * fit_tol):
            continue
        worst = 0.0
        for k in range(m):
            dist = fabs((points[chosen[k], 0] - mx) * nx + (points[chosen[k], 1] - my) * ny
                        + (points[chosen[k], 2] - mz) * nz)
            if dist > worst:
                worst = dist
        ok[i] = worst < fit_tol
    return ok_np, mu_np, nrm_np
