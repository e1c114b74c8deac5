"""Finite-difference oracles for the three analytic gradient paths.

Each check returns a dict with the worst relative error, its threshold and a
pass flag. ``fault`` flips the sign of one component's analytic gradient so
the harness itself can be shown to catch errors.
"""

from __future__ import annotations

import numpy as np

from . import acm, backbone, ssvm
from .geometry import Polygon, circle
from .priors import PriorMaps, region_sum

THRESHOLDS = {"backbone": 1e-3, "acm": 1e-3, "map_grads": 1e-6}
COMPONENTS = tuple(THRESHOLDS)


def rel_err(a, n, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _result(name, errs, **extra):
    worst = float(np.max(errs)) if len(errs) else 0.0
    out = {"max_rel_err": worst, "threshold": THRESHOLDS[name], "n": int(len(errs)),
           "passed": bool(worst < THRESHOLDS[name])}
    out.update(extra)
    return out


def _same_pattern(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_backbone(seed: int = 0, n_weights: int = 200, h: float = 1e-4, flip: bool = False) -> dict:
    """Central differences of ``sum_m <G_m, map_m>`` against :func:`backbone.backward`.

    Uses the tiny architecture in float64. Weights whose perturbation changes a
    ReLU state or a max-pool winner sit on a kink, where the two-sided
    difference is meaningless; they are redrawn and counted as skipped.
    """
    rng = np.random.default_rng(seed)
    cfg = backbone.ArchConfig.tiny()
    params = backbone.init_params(cfg, seed)
    image = rng.random((cfg.input_size, cfg.input_size, 3))
    s = cfg.output_size
    g = ssvm.MapGrads(*(rng.standard_normal((s, s)) for _ in range(4)))

    def objective(p):
        maps, cache = backbone.forward(p, image)
        val = sum(float(np.vdot(gm, getattr(maps, name)))
                  for gm, name in zip(g.as_tuple(), ("d", "alpha", "beta", "kappa")))
        return val, cache

    _, cache = objective(params)
    analytic = backbone.backward(params, cache, g)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    errs, skipped, attempts = [], 0, 0
    while len(errs) < n_weights:
        attempts += 1
        if attempts > 50 * n_weights:
            raise RuntimeError("too many weights on activation kinks")
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(params[name].size), params[name].shape)
        w = params.tensors[name]
        orig = w[idx]
        w[idx] = orig + h
        f_plus, c_plus = objective(params)
        w[idx] = orig - h
        f_minus, c_minus = objective(params)
        w[idx] = orig
        if not (_same_pattern(cache.pattern(), c_plus.pattern())
                and _same_pattern(cache.pattern(), c_minus.pattern())):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        a = analytic[name][idx] * (-1 if flip else 1)
        errs.append(float(rel_err(a, numeric, floor=1e-6)))
    return _result("backbone", errs, skipped=skipped)


def smooth_maps(size: int, rng) -> PriorMaps:
    """Low-frequency sinusoidal D, alpha, beta and a constant kappa."""
    vv, uu = np.mgrid[0:size, 0:size] / size

    def wave(lo, amp):
        fu, fv = rng.uniform(0.5, 2.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        return lo + amp * (1 + np.sin(2 * np.pi * (fu * uu + fv * vv) + ph))

    kappa = np.full((size, size), rng.uniform(-0.5, 0.5))
    return PriorMaps(wave(-1.0, 1.0), wave(0.01, 0.05), wave(0.01, 0.05), kappa)


def _smooth_energy(nodes, maps):
    return acm.energy(Polygon(nodes), maps) - region_sum(maps.kappa, Polygon(nodes))


def check_acm(seed: int = 0, n_polys: int = 4, size: int = 64, h: float = 1e-3,
              balloon_h: float = 0.5, flip: bool = False) -> dict:
    """Node gradients against finite differences of the energy.

    The sampled terms use central differences with step ``h``; the balloon term
    is differenced with step ``balloon_h`` by full re-rasterization. Node
    coordinates are kept away from integers, where bilinear sampling has kinks.
    """
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_polys):
        maps = smooth_maps(size, rng)
        L = int(rng.integers(8, 25))
        poly = circle(rng.uniform(0.35, 0.65, 2) * size, rng.uniform(0.12, 0.25) * size, L)
        nodes = poly.nodes + rng.normal(0, 1.0, poly.nodes.shape)
        frac = nodes - np.floor(nodes)
        nodes = np.floor(nodes) + np.clip(frac, 0.1, 0.9)
        analytic = acm.node_grad(Polygon(nodes), maps, balloon_h) * (-1 if flip else 1)
        for s in range(L):
            for c in range(2):
                num = 0.0
                for sign, step in ((1, h), (-1, -h)):
                    moved = nodes.copy()
                    moved[s, c] += step
                    num += sign * _smooth_energy(moved, maps)
                num /= 2 * h
                reg = 0.0
                for sign, step in ((1, balloon_h), (-1, -balloon_h)):
                    moved = nodes.copy()
                    moved[s, c] += step
                    reg += sign * region_sum(maps.kappa, Polygon(moved))
                num += reg / (2 * balloon_h)
                errs.append(float(rel_err(analytic[s, c], num, floor=1e-6)))
    return _result("acm", errs)


def check_map_grads(seed: int = 0, n_dirs: int = 100, size: int = 32, flip: bool = False) -> dict:
    """Directional differences of the energy along random map perturbations.

    The energy is linear in each map for a fixed polygon, so the difference
    quotient must match ``<grad, direction>`` up to rounding.
    """
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_dirs):
        base = PriorMaps(rng.standard_normal((size, size)), rng.random((size, size)),
                         rng.random((size, size)), rng.standard_normal((size, size)))
        L = int(rng.integers(5, 30))
        poly = circle(rng.uniform(0.3, 0.7, 2) * size, rng.uniform(0.1, 0.3) * size, L)
        poly = Polygon(poly.nodes + rng.normal(0, 0.7, poly.nodes.shape))
        grads = ssvm.energy_map_grads(poly, base)
        direction = [rng.standard_normal((size, size)), rng.random((size, size)),
                     rng.random((size, size)), rng.standard_normal((size, size))]
        t = 0.5
        moved = PriorMaps(*(m + t * p for m, p in zip((base.d, base.alpha, base.beta, base.kappa), direction)))
        numeric = (acm.energy(poly, moved) - acm.energy(poly, base)) / t
        analytic = sum(float(np.vdot(g, p)) for g, p in zip(grads.as_tuple(), direction))
        errs.append(float(rel_err(-analytic if flip else analytic, numeric)))
    return _result("map_grads", errs)


def run_all(seed: int = 0, fault: str | None = None) -> dict:
    """All three oracles; ``fault`` names a component whose analytic gradient is sign-flipped."""
    if fault is not None and fault not in COMPONENTS:
        raise ValueError(f"fault must be one of {COMPONENTS}")
    return {
        "backbone": check_backbone(seed, flip=fault == "backbone"),
        "acm": check_acm(seed, flip=fault == "acm"),
        "map_grads": check_map_grads(seed, flip=fault == "map_grads"),
    }
