"""Snake inference: energy, node gradients, descent, and the five-start strategy."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Polygon, circle, iou, rasterize, resample
from .priors import PriorMaps

CENTER_INDEX = 4
STEP_MODES = ("pixels", "gradient")


@dataclass(frozen=True)
class AcmOptions:
    max_iters: int = 200
    step_size: float = 0.5
    backtracking: bool = True
    max_halvings: int = 8
    converge_tol: float = 1e-3
    L: int = 60
    balloon_h: float = 0.5
    resample_every: int = 0  # 0 disables resampling during evolution
    init_radius_frac: float = 0.2
    step_mode: str = "pixels"  # "pixels": fastest node moves step_size px; "gradient": raw y -= step_size * grad

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.L < 3:
            raise ValueError("L must be >= 3")
        if self.balloon_h <= 0:
            raise ValueError("balloon_h must be positive")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}")


def _arrays(maps: PriorMaps):
    return maps.d, maps.alpha, maps.beta, maps.kappa


def energy(poly: Polygon, maps: PriorMaps) -> float:
    """Snake energy: sampled data/membrane/thin-plate terms per node plus the enclosed balloon sum."""
    mask = np.zeros(maps.shape, dtype=bool)
    return float(_kernels.energy(poly.nodes, *_arrays(maps), mask))


def node_grad(poly: Polygon, maps: PriorMaps, h: float = 0.5) -> np.ndarray:
    """``dE/dy_s`` for every node, shape (L, 2).

    The balloon part is a central difference of the enclosed sum with step ``h``
    pixels; the remaining terms are differentiated exactly.
    """
    mask = np.zeros(maps.shape, dtype=bool)
    grad = np.empty_like(poly.nodes)
    _kernels.energy_and_grad(poly.nodes, *_arrays(maps), h, mask, grad)
    return grad


def evolve(init: Polygon, maps: PriorMaps, opts: AcmOptions = AcmOptions()) -> tuple[Polygon, np.ndarray]:
    """Gradient descent from ``init``; returns the final polygon and the energy trace.

    ``trace[0]`` is the initial energy and ``trace[k]`` the energy after
    iteration ``k``, so ``len(trace) == opts.max_iters + 1`` means the budget ran
    out before convergence.
    """
    arrays = _arrays(maps)
    if opts.resample_every <= 0:
        nodes, trace = _kernels.evolve(
            init.nodes, *arrays, opts.max_iters, opts.step_size, opts.backtracking,
            opts.max_halvings, opts.converge_tol, opts.balloon_h, opts.step_mode == "pixels")
        return Polygon(nodes), trace

    nodes = init.nodes
    traces = []
    done = 0
    while done < opts.max_iters:
        chunk = min(opts.resample_every, opts.max_iters - done)
        nodes, trace = _kernels.evolve(
            nodes, *arrays, chunk, opts.step_size, opts.backtracking,
            opts.max_halvings, opts.converge_tol, opts.balloon_h, opts.step_mode == "pixels")
        traces.append(trace if not traces else trace[1:])
        done += len(trace) - 1
        if len(trace) - 1 < chunk:
            break
        try:
            nodes = resample(Polygon(nodes), len(nodes)).nodes
        except ValueError:
            break
    return Polygon(nodes), np.concatenate(traces)


def init_polygons(width: int, height: int, radius_frac: float = 0.2, L: int = 60) -> list[Polygon]:
    """Five starting circles: the four quarter-points, then the image centre."""
    if not 0 < radius_frac <= 0.5:
        raise ValueError("radius_frac must lie in (0, 0.5]")
    r = radius_frac * min(width, height)
    centers = [(width / 4, height / 4), (3 * width / 4, height / 4),
               (width / 4, 3 * height / 4), (3 * width / 4, 3 * height / 4),
               (width / 2, height / 2)]
    return [circle(c, r, L) for c in centers]


def infer_multi(maps: PriorMaps, opts: AcmOptions = AcmOptions()) -> list[tuple[Polygon, float]]:
    results = []
    for init in init_polygons(maps.width, maps.height, opts.init_radius_frac, opts.L):
        final, trace = evolve(init, maps, opts)
        results.append((final, float(trace[-1])))
    return results


def infer_center(maps: PriorMaps, opts: AcmOptions = AcmOptions()) -> tuple[Polygon, float]:
    """Single-start inference from the centre circle only."""
    init = init_polygons(maps.width, maps.height, opts.init_radius_frac, opts.L)[CENTER_INDEX]
    final, trace = evolve(init, maps, opts)
    return final, float(trace[-1])


def select_best(results: list[Polygon], gt: np.ndarray) -> tuple[int, float]:
    """Index and IoU of the candidate that best overlaps the ground-truth mask.

    Ties go to the lowest index.
    """
    if not results:
        raise ValueError("no candidates to select from")
    h, w = gt.shape
    scores = [iou(rasterize(p, w, h), gt) for p in results]
    best = int(np.argmax(scores))
    return best, scores[best]


def select_best_unsupervised(energies) -> int:
    """Index of the lowest final energy (first one on ties)."""
    energies = list(energies)
    if not energies:
        raise ValueError("no candidates to select from")
    return int(np.argmin(energies))


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "energy"])
        for k, e in enumerate(trace):
            writer.writerow([k, repr(float(e))])
