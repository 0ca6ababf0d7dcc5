"""Independent reference implementations shared by the unit and acceptance tests.

These are deliberately naive: enumeration and all-pairs loops, no shared code
with the package.
"""

import itertools

import numpy as np


def brute_force_wd(P, Q, p=2):
    """Enumerate every assignment; only for tiny N."""
    best = np.inf
    for perm in itertools.permutations(range(len(P))):
        cost = np.mean([np.linalg.norm(P[i] - Q[j]) ** p for i, j in enumerate(perm)])
        best = min(best, cost)
    return best


def swd_numpy(P, Q, G, p=2):
    # project, sort, compare
    a = np.sort(P @ G, axis=0)
    b = np.sort(Q @ G, axis=0)
    return np.mean(np.abs(a - b) ** p)


def brute_boundary(mask):
    H, W = mask.shape
    out = []
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or not mask[a, b]:
                    out.append((i, j))
                    break
    return np.array(out, float).reshape(-1, 2)


def brute_assd(p, t):
    if not p.any() or not t.any():
        return np.nan
    bp, bt = brute_boundary(p), brute_boundary(t)
    dist = np.sqrt(((bp[:, None, :] - bt[None, :, :]) ** 2).sum(-1))
    return (dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(bp) + len(bt))
