"""numpy/scipy fallback for the compiled kernels; same signatures and results."""
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

BACKEND = "python"


def ransac_hypotheses(pts, samples, tau, literal, slope_max, h_lo, h_hi):
    pts = np.asarray(pts, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.int64)
    k = samples.shape[0]
    models = np.zeros((k, 3))
    counts = np.full(k, -1, dtype=np.int64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    for it in range(k):
        i0, i1, i2 = samples[it]
        x0, y0, z0 = pts[i0]
        x1, y1, z1 = pts[i1]
        x2, y2, z2 = pts[i2]
        det = (x1 - x0) * (z2 - z0) - (x2 - x0) * (z1 - z0)
        if abs(det) < 1e-9:
            continue
        a = ((y1 - y0) * (z2 - z0) - (y2 - y0) * (z1 - z0)) / det
        b = ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) / det
        h = y0 - a * x0 - b * z0
        if abs(a) >= slope_max or abs(b) >= slope_max or h < h_lo or h > h_hi:
            continue
        if literal:
            denom = np.sqrt(1.0 + a * a + b * b + h * h)
        else:
            denom = np.sqrt(1.0 + a * a + b * b)
        e = (y - a * x - b * z - h) / denom
        models[it] = (a, b, h)
        counts[it] = int(np.count_nonzero(np.abs(e) < tau))
    return models, counts


def raycast(origin, dirs, max_range, cylinders, walls, ground_z):
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    best = np.full(n, float(max_range))
    with np.errstate(divide="ignore", invalid="ignore"):
        down = dz < -1e-12
        tg = np.where(down, (ground_z - oz) / np.where(down, dz, -1.0), np.inf)
        take = down & (tg > 0) & (tg < best)
        best = np.where(take, tg, best)
        qa = dx * dx + dy * dy
        for cx, cy, r, z0, z1 in np.asarray(cylinders, dtype=np.float64).reshape(-1, 5):
            fx, fy = ox - cx, oy - cy
            qb = 2.0 * (fx * dx + fy * dy)
            qc = fx * fx + fy * fy - r * r
            disc = qb * qb - 4.0 * qa * qc
            ok = (qa >= 1e-18) & (disc >= 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            den = np.where(ok, 2.0 * qa, 1.0)
            t = (-qb - sq) / den
            t = np.where(t <= 1e-9, (-qb + sq) / den, t)
            zz = oz + t * dz
            hit = ok & (t > 1e-9) & (t < best) & (zz >= z0) & (zz <= z1)
            best = np.where(hit, t, best)
        for x0, y0, x1, y1, z0, z1 in np.asarray(walls, dtype=np.float64).reshape(-1, 6):
            ex, ey = x1 - x0, y1 - y0
            den = dx * ey - dy * ex
            ok = np.abs(den) >= 1e-12
            dsafe = np.where(ok, den, 1.0)
            t = ((x0 - ox) * ey - (y0 - oy) * ex) / dsafe
            s = ((x0 - ox) * dy - (y0 - oy) * dx) / dsafe
            zz = oz + t * dz
            hit = ok & (t > 1e-9) & (t < best) & (s >= 0) & (s <= 1) & (zz >= z0) & (zz <= z1)
            best = np.where(hit, t, best)
    return np.where(best < max_range, best, np.inf)


def _canonical(labels):
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=np.int64)
    remap[np.unique(labels)[order]] = np.arange(order.size)
    return remap[labels]


def grid_cluster(pts, radius):
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return _canonical(labels.astype(np.int64))


def layer_smoothness(pts, az, half_window):
    pts = np.asarray(pts, dtype=np.float64)
    az = np.asarray(az, dtype=np.int64)
    n = pts.shape[0]
    out = np.full(n, np.nan)
    hw = int(half_window)
    if n < 2 * hw + 1:
        return out
    csum = np.vstack([np.zeros(3), np.cumsum(pts, axis=0)])
    idx = np.arange(hw, n - hw)
    window = csum[idx + hw + 1] - csum[idx - hw]
    s = (2 * hw + 1) * pts[idx] - window  # sum over j != i of (X_i - X_j)
    nrm = np.linalg.norm(pts[idx], axis=1)
    contiguous = (az[idx + hw] - az[idx - hw]) == 2 * hw
    ok = contiguous & (nrm > 0)
    vals = np.linalg.norm(s, axis=1) / (2 * hw * np.where(nrm > 0, nrm, 1.0))
    out[idx[ok]] = vals[ok]
    return out


def plane_patches(points, layers, idx, found, n_groups, per_layer, fit_tol):
    """Plane fit per query row from its candidate neighbours ``idx`` (sorted by distance).

    Up to ``per_layer`` points are taken from each of the first ``n_groups``
    distinct layers; the row is usable only if all ``n_groups`` layers occur,
    the patch is flat (smallest covariance eigenvalue below a tenth of the
    middle one), two-dimensional (middle spread above ``fit_tol``) and every
    patch point lies within ``fit_tol`` of the fitted plane.
    """
    idx = np.asarray(idx, dtype=np.int64)
    found = np.asarray(found, dtype=bool)
    n, K = idx.shape
    L = np.where(found, layers[idx], -1 - np.arange(K))
    same = L[:, :, None] == L[:, None, :]
    earlier = np.tril(np.ones((K, K), dtype=bool), -1)
    prior = same & earlier[None]
    first = ~prior.any(axis=2)
    group = np.cumsum(first, axis=1) - 1
    group = np.take_along_axis(group, np.argmax(same, axis=2), axis=1)
    within = prior.sum(axis=2)
    sel = found & (group < n_groups) & (within < per_layer)
    ok = np.where(sel, group, -1).max(axis=1) == n_groups - 1
    m = np.maximum(sel.sum(axis=1), 1)
    P = points[idx]
    mu = np.einsum("nk,nki->ni", sel / m[:, None], P)
    Q = (P - mu[:, None, :]) * sel[:, :, None]
    C = np.einsum("nki,nkj->nij", Q, Q) / m[:, None, None]
    w, V = np.linalg.eigh(C)
    nrm = np.ascontiguousarray(V[:, :, 0])
    ok &= (w[:, 0] < 0.1 * np.maximum(w[:, 1], 1e-12)) & (w[:, 1] > fit_tol**2)
    ok &= np.abs(np.einsum("nki,ni->nk", Q, nrm)).max(axis=1) < fit_tol
    return ok, mu, nrm
