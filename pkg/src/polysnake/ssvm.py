"""Max-margin training signal: task loss, loss-augmented inference, hinge and map subgradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import acm
from ._kernels import bilinear_weights
from .geometry import Polygon, first_diff, iou, rasterize, second_diff
from .priors import PriorMaps


@dataclass(frozen=True)
class SsvmConfig:
    C: float = 1.0
    loss_scale: float = 1.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")


@dataclass(frozen=True, eq=False)
class MapGrads:
    """Gradients of a scalar with respect to each of the four prior maps."""

    g_d: np.ndarray
    g_alpha: np.ndarray
    g_beta: np.ndarray
    g_kappa: np.ndarray

    @classmethod
    def zeros(cls, shape) -> MapGrads:
        return cls(*(np.zeros(shape) for _ in range(4)))

    def as_tuple(self):
        return self.g_d, self.g_alpha, self.g_beta, self.g_kappa

    def is_zero(self) -> bool:
        return not any(np.any(g) for g in self.as_tuple())

    def __sub__(self, other: MapGrads) -> MapGrads:
        return MapGrads(*(a - b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __add__(self, other: MapGrads) -> MapGrads:
        return MapGrads(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))


def task_loss(gt: np.ndarray, pred: np.ndarray) -> float:
    """``1 - IoU``: zero for a perfect prediction, one for disjoint masks."""
    return 1.0 - iou(gt, pred)


def augmented_maps(maps: PriorMaps, gt: np.ndarray, loss_scale: float = 1.0) -> PriorMaps:
    """Fold the per-pixel symmetric-difference loss into the balloon map.

    Pixels outside the ground truth become cheaper to enclose by
    ``loss_scale / |gt|``, pixels inside become dearer by the same amount.
    """
    n = np.count_nonzero(gt)
    if n == 0:
        raise ValueError("ground-truth mask is empty")
    a = np.where(gt, -1.0 / n, 1.0 / n)
    return maps.replace(kappa=maps.kappa - loss_scale * a)


def surrogate_loss(gt: np.ndarray, pred: np.ndarray) -> float:
    """Symmetric difference normalised by the ground-truth area."""
    return np.count_nonzero(gt ^ pred) / np.count_nonzero(gt)


def loss_augmented_infer(maps: PriorMaps, gt: np.ndarray, opts: acm.AcmOptions = acm.AcmOptions(),
                         cfg: SsvmConfig = SsvmConfig()) -> Polygon:
    """Most violating polygon: five descents on the augmented energy, best ``loss - E`` wins."""
    aug = augmented_maps(maps, gt, cfg.loss_scale)
    h, w = gt.shape
    best, best_score = None, -np.inf
    for final, _ in acm.infer_multi(aug, opts):
        score = cfg.loss_scale * surrogate_loss(gt, rasterize(final, w, h)) - acm.energy(final, maps)
        if score > best_score:
            best, best_score = final, score
    return best


def energy_map_grads(poly: Polygon, maps: PriorMaps) -> MapGrads:
    """Exact ``dE/dmap`` for a fixed polygon (the energy is linear in each map)."""
    h, w = maps.shape
    g_d = np.zeros((h, w))
    g_alpha = np.zeros((h, w))
    g_beta = np.zeros((h, w))
    m1 = (first_diff(poly) ** 2).sum(axis=1)
    m2 = (second_diff(poly) ** 2).sum(axis=1)
    for s, (u, v) in enumerate(poly.nodes):
        i, j, i1, j1, w00, w10, w01, w11 = bilinear_weights(w, h, u, v)
        for (r, c), wt in (((j, i), w00), ((j, i1), w10), ((j1, i), w01), ((j1, i1), w11)):
            g_d[r, c] += wt
            g_alpha[r, c] += wt * m1[s]
            g_beta[r, c] += wt * m2[s]
    g_kappa = rasterize(poly, w, h).astype(np.float64)
    return MapGrads(g_d, g_alpha, g_beta, g_kappa)


def margin_terms(gt_poly: Polygon, y_hat: Polygon, maps: PriorMaps, gt_mask: np.ndarray):
    """``(delta, E(gt), E(y_hat))`` shared by :func:`hinge` and :func:`subgradient`."""
    h, w = gt_mask.shape
    delta = task_loss(gt_mask, rasterize(y_hat, w, h))
    return delta, acm.energy(gt_poly, maps), acm.energy(y_hat, maps)


def hinge(gt_poly: Polygon, y_hat: Polygon, maps: PriorMaps, gt_mask: np.ndarray) -> float:
    delta, e_gt, e_hat = margin_terms(gt_poly, y_hat, maps, gt_mask)
    return max(0.0, delta + e_gt - e_hat)


MARGIN_RULES = ("literal", "hinge")


def margin_violated(delta: float, e_gt: float, e_hat: float, rule: str = "literal") -> bool:
    """Whether the map subgradient is active.

    ``literal``: active iff ``E(gt) - E(y_hat) < delta``.
    ``hinge``: active iff the hinge is positive, i.e. ``E(y_hat) - E(gt) < delta``,
    which is the derivative of ``max(0, delta + E(gt) - E(y_hat))``.
    """
    if rule == "literal":
        return e_gt - e_hat < delta
    if rule == "hinge":
        return e_hat - e_gt < delta
    raise ValueError(f"rule must be one of {MARGIN_RULES}")


def subgradient(gt_poly: Polygon, y_hat: Polygon, maps: PriorMaps, gt_mask: np.ndarray,
                rule: str = "literal") -> MapGrads:
    """Map subgradient ``dE(gt) - dE(y_hat)`` when the margin test fires, else all zeros."""
    delta, e_gt, e_hat = margin_terms(gt_poly, y_hat, maps, gt_mask)
    if margin_violated(delta, e_gt, e_hat, rule):
        return energy_map_grads(gt_poly, maps) - energy_map_grads(y_hat, maps)
    return MapGrads.zeros(maps.shape)
