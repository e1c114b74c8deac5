"""Compiled inner loops for rasterization and snake evolution.

Everything here works on raw float64 arrays. Polygons are ``(L, 2)`` arrays of
``(u, v)`` = (column, row); maps are ``(H, W)`` arrays indexed ``[v, u]`` with
pixel centres at integer coordinates.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _edge_crossing(x1, y1, x2, y2, yr):
    # Canonical endpoint order so an edge yields the same float whichever way
    # it is traversed; the local balloon update depends on that.
    if y1 > y2 or (y1 == y2 and x1 > x2):
        x1, y1, x2, y2 = x2, y2, x1, y1
    return x1 + (yr - y1) * (x2 - x1) / (y2 - y1)


@njit(cache=True)
def _sort_inplace(buf, n):
    for i in range(1, n):
        key = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > key:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = key


@njit(cache=True)
def _span(x0, x1, width):
    lo = int(np.ceil(x0))
    hi = int(np.ceil(x1)) - 1
    if lo < 0:
        lo = 0
    if hi > width - 1:
        hi = width - 1
    return lo, hi


@njit(cache=True)
def rasterize_sum(nodes, mask, values):
    """Even-odd scanline fill of pixel centres into ``mask`` (cleared first).

    Returns the sum of ``values`` over the filled pixels, accumulated in
    row-major order.
    """
    height, width = mask.shape
    mask[:, :] = False
    n = nodes.shape[0]
    ymin = nodes[:, 1].min()
    ymax = nodes[:, 1].max()
    r0 = max(0, int(np.ceil(ymin)))
    r1 = min(height - 1, int(np.floor(ymax)))
    buf = np.empty(n, dtype=np.float64)
    total = 0.0
    for v in range(r0, r1 + 1):
        yr = float(v)
        k = 0
        for i in range(n):
            j = (i + 1) % n
            y1 = nodes[i, 1]
            y2 = nodes[j, 1]
            if (y1 > yr) != (y2 > yr):
                buf[k] = _edge_crossing(nodes[i, 0], y1, nodes[j, 0], y2, yr)
                k += 1
        _sort_inplace(buf, k)
        # sorted crossings give disjoint, increasing spans
        for p in range(0, k - 1, 2):
            lo, hi = _span(buf[p], buf[p + 1], width)
            for u in range(lo, hi + 1):
                mask[v, u] = True
                total += values[v, u]
    return total


@njit(cache=True)
def rasterize_into(nodes, mask):
    rasterize_sum(nodes, mask, np.zeros(mask.shape))


@njit(cache=True)
def bilinear(f, u, v):
    """Value and exact gradient of the bilinear surface through ``f``.

    Outside ``[0, W-1] x [0, H-1]`` the point is clamped onto the border and the
    gradient component normal to that border is zero.
    """
    h, w = f.shape
    du_live = 1.0
    dv_live = 1.0
    if u < 0.0:
        u = 0.0
        du_live = 0.0
    elif u > w - 1:
        u = float(w - 1)
        du_live = 0.0
    if v < 0.0:
        v = 0.0
        dv_live = 0.0
    elif v > h - 1:
        v = float(h - 1)
        dv_live = 0.0
    i = min(int(np.floor(u)), max(w - 2, 0))
    j = min(int(np.floor(v)), max(h - 2, 0))
    t = u - i
    s = v - j
    i1 = min(i + 1, w - 1)
    j1 = min(j + 1, h - 1)
    f00 = f[j, i]
    f10 = f[j, i1]
    f01 = f[j1, i]
    f11 = f[j1, i1]
    val = (1 - t) * (1 - s) * f00 + t * (1 - s) * f10 + (1 - t) * s * f01 + t * s * f11
    gu = ((1 - s) * (f10 - f00) + s * (f11 - f01)) * du_live
    gv = ((1 - t) * (f01 - f00) + t * (f11 - f10)) * dv_live
    return val, gu, gv


@njit(cache=True)
def bilinear_weights(w, h, u, v):
    """Corner indices and weights used by :func:`bilinear` at ``(u, v)``."""
    u = min(max(u, 0.0), float(w - 1))
    v = min(max(v, 0.0), float(h - 1))
    i = min(int(np.floor(u)), max(w - 2, 0))
    j = min(int(np.floor(v)), max(h - 2, 0))
    t = u - i
    s = v - j
    i1 = min(i + 1, w - 1)
    j1 = min(j + 1, h - 1)
    return (i, j, i1, j1,
            (1 - t) * (1 - s), t * (1 - s), (1 - t) * s, t * s)


@njit(cache=True)
def contour_energy(nodes, d, alpha, beta):
    """Node-indexed part of the snake energy (everything but the balloon)."""
    n = nodes.shape[0]
    total = 0.0
    for s in range(n):
        nx = nodes[(s + 1) % n]
        pv = nodes[(s - 1) % n]
        u = nodes[s, 0]
        v = nodes[s, 1]
        d1u = nx[0] - u
        d1v = nx[1] - v
        d2u = nx[0] - 2 * u + pv[0]
        d2v = nx[1] - 2 * v + pv[1]
        dv_, _, _ = bilinear(d, u, v)
        av, _, _ = bilinear(alpha, u, v)
        bv, _, _ = bilinear(beta, u, v)
        total += dv_ + av * (d1u * d1u + d1v * d1v) + bv * (d2u * d2u + d2v * d2v)
    return total


@njit(cache=True)
def energy(nodes, d, alpha, beta, kappa, mask):
    return contour_energy(nodes, d, alpha, beta) + rasterize_sum(nodes, mask, kappa)


@njit(cache=True)
def _quad_delta(a, s, b, q, kappa, mask, buf):
    # Swapping node s for q toggles exactly the pixels enclosed (even-odd) by
    # the loop a -> s -> b -> q; each toggle adds or removes its kappa value.
    height, width = mask.shape
    xs = (a[0], s[0], b[0], q[0])
    ys = (a[1], s[1], b[1], q[1])
    ymin = min(min(ys[0], ys[1]), min(ys[2], ys[3]))
    ymax = max(max(ys[0], ys[1]), max(ys[2], ys[3]))
    r0 = max(0, int(np.ceil(ymin)))
    r1 = min(height - 1, int(np.floor(ymax)))
    total = 0.0
    for v in range(r0, r1 + 1):
        yr = float(v)
        k = 0
        for e in range(4):
            f = (e + 1) % 4
            if (ys[e] > yr) != (ys[f] > yr):
                buf[k] = _edge_crossing(xs[e], ys[e], xs[f], ys[f], yr)
                k += 1
        _sort_inplace(buf, k)
        for p in range(0, k - 1, 2):
            lo, hi = _span(buf[p], buf[p + 1], width)
            for u in range(lo, hi + 1):
                if mask[v, u]:
                    total -= kappa[v, u]
                else:
                    total += kappa[v, u]
    return total


@njit(cache=True)
def balloon_grad(nodes, kappa, mask, h, out):
    """Central differences (step ``h``) of the region sum per node coordinate.

    ``mask`` must hold the current rasterization of ``nodes``.
    """
    n = nodes.shape[0]
    buf = np.empty(4, dtype=np.float64)
    q = np.empty(2, dtype=np.float64)
    for s in range(n):
        a = nodes[(s - 1) % n]
        b = nodes[(s + 1) % n]
        c = nodes[s]
        for axis in range(2):
            q[0] = c[0]
            q[1] = c[1]
            q[axis] = c[axis] + h
            plus = _quad_delta(a, c, b, q, kappa, mask, buf)
            q[axis] = c[axis] - h
            minus = _quad_delta(a, c, b, q, kappa, mask, buf)
            out[s, axis] = (plus - minus) / (2 * h)


@njit(cache=True)
def contour_grad(nodes, d, alpha, beta, out):
    """Analytic gradient of :func:`contour_energy` w.r.t. node positions."""
    n = nodes.shape[0]
    out[:, :] = 0.0
    d2 = np.empty((n, 2), dtype=np.float64)
    bval = np.empty(n, dtype=np.float64)
    for s in range(n):
        nx = nodes[(s + 1) % n]
        pv = nodes[(s - 1) % n]
        u = nodes[s, 0]
        v = nodes[s, 1]
        d1u = nx[0] - u
        d1v = nx[1] - v
        d2u = nx[0] - 2 * u + pv[0]
        d2v = nx[1] - 2 * v + pv[1]
        d2[s, 0] = d2u
        d2[s, 1] = d2v
        _, gdu, gdv = bilinear(d, u, v)
        av, gau, gav = bilinear(alpha, u, v)
        bv, gbu, gbv = bilinear(beta, u, v)
        bval[s] = bv
        m1 = d1u * d1u + d1v * d1v
        m2 = d2u * d2u + d2v * d2v
        out[s, 0] += gdu + gau * m1 + gbu * m2
        out[s, 1] += gdv + gav * m1 + gbv * m2
        # membrane term s touches nodes s and s+1
        out[s, 0] -= 2 * av * d1u
        out[s, 1] -= 2 * av * d1v
        out[(s + 1) % n, 0] += 2 * av * d1u
        out[(s + 1) % n, 1] += 2 * av * d1v
    for s in range(n):
        # thin-plate term s touches s-1, s, s+1 with weights 1, -2, 1
        cu = 2 * bval[s] * d2[s, 0]
        cv = 2 * bval[s] * d2[s, 1]
        out[(s - 1) % n, 0] += cu
        out[(s - 1) % n, 1] += cv
        out[s, 0] -= 2 * cu
        out[s, 1] -= 2 * cv
        out[(s + 1) % n, 0] += cu
        out[(s + 1) % n, 1] += cv


@njit(cache=True)
def _grad_given_mask(nodes, d, alpha, beta, kappa, h, mask, grad):
    contour_grad(nodes, d, alpha, beta, grad)
    bal = np.empty_like(grad)
    balloon_grad(nodes, kappa, mask, h, bal)
    grad += bal


@njit(cache=True)
def energy_and_grad(nodes, d, alpha, beta, kappa, h, mask, grad):
    e = energy(nodes, d, alpha, beta, kappa, mask)
    _grad_given_mask(nodes, d, alpha, beta, kappa, h, mask, grad)
    return e


@njit(cache=True)
def evolve(init, d, alpha, beta, kappa, max_iters, step_size, backtracking,
           max_halvings, tol, h, normalize):
    nodes = init.copy()
    mask = np.zeros(d.shape, dtype=np.bool_)
    grad = np.empty_like(nodes)
    trace = np.empty(max_iters + 1, dtype=np.float64)
    e = energy_and_grad(nodes, d, alpha, beta, kappa, h, mask, grad)
    trace[0] = e
    it = 0
    while it < max_iters:
        it += 1
        step = step_size
        if normalize:
            # step_size becomes the displacement of the fastest node
            gmax = 0.0
            for s in range(nodes.shape[0]):
                gmax = max(gmax, np.sqrt(grad[s, 0] ** 2 + grad[s, 1] ** 2))
            if gmax > 0.0:
                step = step_size / gmax
        cand = nodes - step * grad
        e_new = energy(cand, d, alpha, beta, kappa, mask)
        if backtracking:
            halvings = 0
            while e_new > e and halvings < max_halvings:
                step *= 0.5
                halvings += 1
                cand = nodes - step * grad
                e_new = energy(cand, d, alpha, beta, kappa, mask)
            if e_new > e:
                # no descent along this direction at any tried step
                trace[it] = e
                break
        disp = 0.0
        for s in range(nodes.shape[0]):
            du = cand[s, 0] - nodes[s, 0]
            dv = cand[s, 1] - nodes[s, 1]
            disp = max(disp, np.sqrt(du * du + dv * dv))
        nodes = cand
        # the last energy call was for cand, so mask and e_new already describe it
        e = e_new
        _grad_given_mask(nodes, d, alpha, beta, kappa, h, mask, grad)
        trace[it] = e
        if disp < tol:
            break
    return nodes, trace[:it + 1].copy()
