"""Polygons, masks, and the discrete operators shared by the rest of the package.

Coordinates are ``(u, v)`` pixel units with the origin at the top-left, ``u`` the
column and ``v`` the row. Pixel ``(u, v)`` has its centre at the integer point
``(u, v)``. Masks are plain boolean numpy arrays of shape ``(height, width)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed polygon with ``L >= 3`` ordered nodes; node L connects to node 1."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise ValueError(f"polygon nodes must have shape (L, 2), got {nodes.shape}")
        if nodes.shape[0] < 3:
            raise ValueError(f"polygon needs at least 3 nodes, got {nodes.shape[0]}")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("polygon coordinates must be finite")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    def __len__(self):
        return self.nodes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Polygon):
            return NotImplemented
        return np.array_equal(self.nodes, other.nodes)

    __hash__ = None

    def translate(self, du: float, dv: float) -> Polygon:
        return Polygon(self.nodes + np.array([du, dv]))

    def scale(self, su: float, sv: float | None = None) -> Polygon:
        sv = su if sv is None else sv
        return Polygon(self.nodes * np.array([su, sv]))

    def perimeter(self) -> float:
        return float(np.linalg.norm(first_diff(self), axis=1).sum())

    def area(self) -> float:
        """Signed shoelace area (positive for counter-clockwise in u/v axes)."""
        u, v = self.nodes[:, 0], self.nodes[:, 1]
        return 0.5 * float(np.dot(u, np.roll(v, -1)) - np.dot(np.roll(u, -1), v))

    def bbox(self) -> tuple[float, float, float, float]:
        """(u_min, v_min, u_max, v_max)."""
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def to_json(self) -> dict:
        return {"nodes": self.nodes.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> Polygon:
        if not isinstance(obj, dict) or "nodes" not in obj:
            raise ValueError('polygon JSON must be an object with a "nodes" list')
        return cls(np.asarray(obj["nodes"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> Polygon:
        return cls.from_json(json.loads(Path(path).read_text()))


def rasterize(poly: Polygon, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centre lies inside ``poly`` (even-odd rule)."""
    if width < 1 or height < 1:
        raise ValueError("mask dimensions must be positive")
    mask = np.zeros((height, width), dtype=bool)
    _kernels.rasterize_into(poly.nodes, mask)
    return mask


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-sized masks; 1.0 if both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool, copy=False)
    b = b.astype(bool, copy=False)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _at_arc(closed: np.ndarray, cum: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(s, cum, closed[:, 0]), np.interp(s, cum, closed[:, 1])])


def resample(poly: Polygon, L: int, max_iters: int = 500) -> Polygon:
    """``L`` nodes on the boundary of ``poly`` spaced evenly, starting at node 0.

    Nodes start at equal arc length. The arc gaps are then rescaled until every
    chord (the closing one included) has the same Euclidean length, so that an
    already resampled polygon is a fixed point. On shapes where no ordered
    equal-chord placement exists (spikes narrower than the spacing) the
    iteration cannot settle and the equal arc-length placement is returned.
    """
    if L < 3:
        raise ValueError("L must be at least 3")
    closed = np.vstack([poly.nodes, poly.nodes[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 0:
        raise ValueError("cannot resample a zero-perimeter polygon")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    cum[-1] = total
    arc = np.arange(L) * (total / L)
    gaps = np.full(L, total / L)
    for _ in range(max_iters):
        pts = _at_arc(closed, cum, np.concatenate([[0.0], np.cumsum(gaps)[:-1]]))
        chords = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        if np.ptp(chords) <= 1e-12 * total:
            return Polygon(pts)
        if chords.min() <= 0:
            break
        target = gaps * chords.mean() / chords
        gaps = 0.5 * gaps + 0.5 * target * (total / target.sum())
    return Polygon(_at_arc(closed, cum, arc))


def first_diff(poly: Polygon) -> np.ndarray:
    """Cyclic forward differences ``y[s+1] - y[s]``, shape (L, 2)."""
    y = poly.nodes
    return np.roll(y, -1, axis=0) - y


def second_diff(poly: Polygon) -> np.ndarray:
    """Cyclic second differences ``y[s+1] - 2 y[s] + y[s-1]``, shape (L, 2)."""
    y = poly.nodes
    return np.roll(y, -1, axis=0) - 2 * y + np.roll(y, 1, axis=0)


def circle(center: tuple[float, float], radius: float, L: int) -> Polygon:
    theta = 2 * np.pi * np.arange(L) / L
    return Polygon(np.column_stack([center[0] + radius * np.cos(theta),
                                    center[1] + radius * np.sin(theta)]))
