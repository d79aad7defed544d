"""Independent brute-force oracles used by the unit and acceptance suites."""

import math

import numpy as np


def lloyd_oracle(pts, k, rng, max_iter=100):
    """Brute-force Lloyd with k-means++ seeding: plain loops over points and
    clusters. Shares only the rng draw sequence and the per-cluster mean
    primitive with the production implementation, so exact equality of
    assignments and centroids is well-defined.
    """
    pts = np.asarray(pts, dtype=np.float64)
    m = pts.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = np.array([float((pts[i] - pts[chosen[0]]) @ (pts[i] - pts[chosen[0]]))
                   for i in range(m)])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(m))
        else:
            r = rng.random() * total
            nxt = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), m - 1)
        chosen.append(nxt)
        for i in range(m):
            di = float((pts[i] - pts[nxt]) @ (pts[i] - pts[nxt]))
            if di < d2[i]:
                d2[i] = di
    centroids = pts[chosen].copy()
    assignment = np.full(m, -1, dtype=np.int64)
    for _ in range(max_iter):
        new_assignment = np.empty(m, dtype=np.int64)
        point_d2 = np.empty(m)
        for i in range(m):
            best, best_d = 0, math.inf
            for j in range(k):
                diff = pts[i] - centroids[j]
                dij = float(diff @ diff)
                if dij < best_d:
                    best, best_d = j, dij
            new_assignment[i] = best
            point_d2[i] = best_d
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = [i for i in range(m) if assignment[i] == j]
            if members:
                centroids[j] = np.mean(pts[members], axis=0)
            else:
                far = int(point_d2.argmax())
                centroids[j] = pts[far]
                point_d2[far] = -1.0
    return assignment, centroids
