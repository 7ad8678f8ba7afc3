"""Two-view DLT triangulation and camera pairing."""
from __future__ import annotations

import numpy as np

from .core import NEAR_PLANE, Camera


def pair_cameras(cameras) -> list[tuple[int, int]]:
    """Greedy nearest-centre pairing; an odd camera out joins its nearest neighbour."""
    centers = np.array([c.center for c in cameras])
    n = len(centers)
    d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    iu, ju = np.triu_indices(n, 1)
    order = np.lexsort((ju, iu, d[iu, ju]))
    used = np.zeros(n, dtype=bool)
    pairs = []
    for e in order:
        i, j = iu[e], ju[e]
        if not used[i] and not used[j]:
            pairs.append((int(i), int(j)))
            used[i] = used[j] = True
    for i in np.flatnonzero(~used):
        dd = np.where(np.arange(n) == i, np.inf, d[i])
        j = int(np.argmin(dd))
        pairs.append((min(int(i), j), max(int(i), j)))
    return pairs


def triangulate_dlt(P1, P2, x1, x2):
    """Homogeneous least-squares solution per correspondence; returns (M, 4)."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    A = np.empty((len(x1), 4, 4))
    A[:, 0] = x1[:, :1] * P1[2] - P1[0]
    A[:, 1] = x1[:, 1:] * P1[2] - P1[1]
    A[:, 2] = x2[:, :1] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1:] * P2[2] - P2[1]
    # row scaling keeps the SVD well conditioned
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    return vt[:, -1, :]


def triangulate(cam1: Camera, cam2: Camera, x1, x2, max_reproj: float = 1.0):
    """Triangulate pixel pairs; returns (points (M,3), keep mask, reprojection error)."""
    Xh = triangulate_dlt(cam1.projection_matrix, cam2.projection_matrix, x1, x2)
    w = Xh[:, 3]
    finite = np.abs(w) > 1e-12 * np.linalg.norm(Xh[:, :3], axis=1)
    X = Xh[:, :3] / np.where(finite, w, 1.0)[:, None]
    p1, z1 = cam1.project_points(X)
    p2, z2 = cam2.project_points(X)
    err = np.maximum(np.linalg.norm(p1 - x1, axis=1), np.linalg.norm(p2 - x2, axis=1))
    err = np.where(finite, err, np.inf)
    keep = finite & (z1 > NEAR_PLANE) & (z2 > NEAR_PLANE) & (err <= max_reproj)
    return X, keep, err
