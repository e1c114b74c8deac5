"""Independent reference implementations used as test oracles.

Deliberately slow and simple: per-pixel loops and textbook formulas that share
no code with the package.
"""

import numpy as np


def point_in_polygon(nodes, u, v):
    """Even-odd crossing count of a rightward ray, with cross-product side tests."""
    inside = False
    n = len(nodes)
    for k in range(n):
        au, av = nodes[k]
        bu, bv = nodes[(k + 1) % n]
        if (av <= v) != (bv <= v):
            cross = (bu - au) * (v - av) - (bv - av) * (u - au)
            if (bv > av and cross > 0) or (bv < av and cross < 0):
                inside = not inside
    return inside


def brute_mask(nodes, width, height):
    nodes = np.asarray(nodes, dtype=float)
    out = np.zeros((height, width), dtype=bool)
    for v in range(height):
        for u in range(width):
            out[v, u] = point_in_polygon(nodes, u, v)
    return out


def count_iou(a, b):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return 1.0 if union == 0 else inter / union


def bilinear_value(grid, u, v):
    h, w = grid.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    i0, j0 = int(np.floor(u)), int(np.floor(v))
    i1, j1 = min(i0 + 1, w - 1), min(j0 + 1, h - 1)
    fu, fv = u - i0, v - j0
    return ((1 - fu) * (1 - fv) * grid[j0, i0] + fu * (1 - fv) * grid[j0, i1]
            + (1 - fu) * fv * grid[j1, i0] + fu * fv * grid[j1, i1])


def snake_energy(nodes, d, alpha, beta, kappa):
    """Straight-line evaluation of the snake energy, term by term."""
    nodes = np.asarray(nodes, dtype=float)
    L = len(nodes)
    total = 0.0
    for s in range(L):
        y, nxt, prv = nodes[s], nodes[(s + 1) % L], nodes[s - 1]
        d1 = nxt - y
        d2 = nxt - 2 * y + prv
        u, v = y
        total += bilinear_value(d, u, v)
        total += bilinear_value(alpha, u, v) * (d1 @ d1)
        total += bilinear_value(beta, u, v) * (d2 @ d2)
    h, w = kappa.shape
    total += kappa[brute_mask(nodes, w, h)].sum()
    return total


def random_polygon(rng, size, L=None):
    """Star-shaped or arbitrary (possibly self-intersecting) polygon inside a ``size`` grid."""
    L = L or int(rng.integers(3, 13))
    if rng.random() < 0.5:
        c = rng.uniform(0.3, 0.7, 2) * size
        theta = np.sort(rng.uniform(0, 2 * np.pi, L))
        r = rng.uniform(0.05, 0.45, L) * size
        return np.column_stack([c[0] + r * np.cos(theta), c[1] + r * np.sin(theta)])
    return rng.uniform(-2, size + 2, (L, 2))
