"""Geometry metrics: Chamfer distance, point-to-surface distance, normal error."""
from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, minimum_spanning_tree
from scipy.spatial import cKDTree


def _points(p, name):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError(f"{name} is empty")
    return p


def nearest_distances(query, reference) -> tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(reference).query(query, k=1)
    return dist, idx


def chamfer(a, b) -> float:
    """Halved symmetric mean of (unsquared) nearest-neighbour distances."""
    a, b = _points(a, "first point set"), _points(b, "second point set")
    return 0.5 * (float(nearest_distances(a, b)[0].mean()) + float(nearest_distances(b, a)[0].mean()))


def point_triangle_distance(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distances from (P, 3) points to (T, 3, 3) triangles, shape (P, T).

    Region-based closest-point test (Ericson, Real-Time Collision Detection).
    """
    return _closest_distance(points[:, None, :], tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])


def _closest_distance(p, a, b, c):
    """Broadcasting core of ``point_triangle_distance`` over leading axes."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    bp = p - b
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    cp = p - c
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = va + vb + vc
    safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
    v = vb / safe
    w = vc / safe
    closest = a + ab * v[..., None] + ac * w[..., None]

    def put(mask, value):
        nonlocal closest
        closest = np.where(mask[..., None], value, closest)

    with np.errstate(divide="ignore", invalid="ignore"):
        # Edge regions first, vertex regions last so they take precedence.
        e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t_bc = (d4 - d3) / np.where(e_bc, (d4 - d3) + (d5 - d6), 1.0)
        put(e_bc, b + (c - b) * t_bc[..., None])
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t_ac = d2 / np.where(e_ac, d2 - d6, 1.0)
        put(e_ac, a + ac * t_ac[..., None])
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t_ab = d1 / np.where(e_ab, d1 - d3, 1.0)
        put(e_ab, a + ab * t_ab[..., None])
    put((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, closest.shape))
    put((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, closest.shape))
    put((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, closest.shape))
    return np.linalg.norm(p - closest, axis=-1)


def p2s(points, vertices, faces, chunk: int = 256) -> float:
    """Mean distance from each point to the nearest mesh triangle."""
    points = _points(points, "point set")
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)]
    if len(tri) == 0:
        raise ValueError("mesh has no faces")
    areas = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    tri = tri[areas > 0]
    if len(tri) == 0:
        raise ValueError("mesh is degenerate (all faces have zero area)")
    # The centroid lies on its triangle, so the nearest centroid bounds the answer from above;
    # only triangles whose bounding sphere reaches within that bound can be closer.
    centroids = tri.mean(axis=1)
    reach = np.linalg.norm(tri - centroids[:, None], axis=-1).max()
    tree = cKDTree(centroids)
    bound, _ = tree.query(points, k=1)
    best = np.empty(len(points))
    for s in range(0, len(points), chunk):
        cands = tree.query_ball_point(points[s:s + chunk], bound[s:s + chunk] + reach)
        rows = np.repeat(np.arange(len(cands)), [len(c) for c in cands])
        cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands])
        t = tri[cols]
        d = _closest_distance(points[s:s + chunk][rows], t[:, 0], t[:, 1], t[:, 2])
        out = np.full(len(cands), np.inf)
        np.minimum.at(out, rows, d)
        best[s:s + chunk] = out
    return float(best.mean())


def _unit_normals(n, name):
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(n, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError(f"{name} contains zero-length normals")
    return n / norms[:, None]


def normal_error(pred_points, pred_normals, gt_points, gt_normals) -> float:
    """Mean angle (degrees) between each predicted normal and its nearest GT point's normal."""
    pred_points, gt_points = _points(pred_points, "predicted points"), _points(gt_points, "ground-truth points")
    pn, gn = _unit_normals(pred_normals, "predicted normals"), _unit_normals(gt_normals, "ground-truth normals")
    _, idx = nearest_distances(pred_points, gt_points)
    cos = np.clip(np.sum(pn * gn[idx], axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def estimate_normals(points, k: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals over k nearest neighbours, consistently oriented.

    Orientation is propagated along a minimum spanning tree of the k-NN
    graph (edge cost 1 - |n_i . n_j|), seeded by pointing the normal of the
    highest-z point towards +z.  Returns ``(normals, reliable)`` where
    ``reliable`` is False for neighbourhoods of rank < 2.
    """
    points = _points(points, "point set")
    n = len(points)
    if k + 1 > n:
        raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
    _, nbr = cKDTree(points).query(points, k=k + 1)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    reliable = evals[:, 1] / scale > 1e-8

    rows = np.repeat(np.arange(n), k)
    cols = nbr[:, 1:].ravel()
    cost = 1.0 - np.abs(np.sum(normals[rows] * normals[cols], axis=1)) + 1e-9
    graph = coo_matrix((cost, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)
    tree = tree + tree.T

    oriented = np.zeros(n, dtype=bool)
    remaining = np.argsort(-points[:, 2], kind="stable")
    for root in remaining:
        if oriented[root]:
            continue
        if normals[root, 2] < 0:
            normals[root] = -normals[root]
        order, parent = breadth_first_order(tree, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            if np.dot(normals[node], normals[parent[node]]) < 0:
                normals[node] = -normals[node]
        oriented[order] = True
    return normals, reliable
