"""The four per-pixel maps (data, membrane, thin-plate, balloon) that weight the snake energy."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .geometry import Polygon, rasterize

MAP_NAMES = ("d", "alpha", "beta", "kappa")


@dataclass(frozen=True, eq=False)
class PriorMaps:
    """Data term ``d``, length weight ``alpha``, curvature weight ``beta`` and balloon ``kappa``.

    All four are ``(height, width)`` float64 arrays indexed ``[v, u]``.
    ``alpha`` and ``beta`` must be non-negative.
    """

    d: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        shape = None
        for name in MAP_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} map must be 2-D, got shape {arr.shape}")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"{name} map has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} map contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if (self.alpha < 0).any() or (self.beta < 0).any():
            raise ValueError("alpha and beta maps must be non-negative")

    @property
    def width(self) -> int:
        return self.d.shape[1]

    @property
    def height(self) -> int:
        return self.d.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> PriorMaps:
        z = np.zeros((height, width))
        return cls(z, z, z, z)

    def replace(self, **maps) -> PriorMaps:
        fields = {name: getattr(self, name) for name in MAP_NAMES}
        fields.update(maps)
        return PriorMaps(**fields)

    def shift(self, du: int, dv: int) -> PriorMaps:
        """Integer translation; uncovered pixels take the nearest edge value."""
        def move(a):
            h, w = a.shape
            rows = np.clip(np.arange(h) - dv, 0, h - 1)
            cols = np.clip(np.arange(w) - du, 0, w - 1)
            return a[np.ix_(rows, cols)]
        return PriorMaps(*(move(getattr(self, n)) for n in MAP_NAMES))


def sample(grid: np.ndarray, p) -> tuple[float, np.ndarray]:
    """Bilinear value and spatial gradient ``(d/du, d/dv)`` of ``grid`` at point ``p``."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    val, gu, gv = _kernels.bilinear(grid, float(p[0]), float(p[1]))
    return val, np.array([gu, gv])


def sample_many(grid: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sample` over an ``(N, 2)`` array of points."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    vals = np.empty(len(points))
    grads = np.empty((len(points), 2))
    for k, (u, v) in enumerate(points):
        vals[k], grads[k, 0], grads[k, 1] = _kernels.bilinear(grid, u, v)
    return vals, grads


def region_sum(kappa_map: np.ndarray, poly: Polygon) -> float:
    """Sum of ``kappa_map`` over the pixels enclosed by ``poly``."""
    h, w = kappa_map.shape
    return float(kappa_map[rasterize(poly, w, h)].sum())


def dump_maps(maps: PriorMaps, directory) -> dict:
    """Write ``d.png``, ``alpha.png``, ``beta.png``, ``kappa.png`` and ``maps.json``.

    Each map is min-max normalised to 8-bit grey independently; the sidecar
    records the ``[min, max]`` used so values can be recovered approximately.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranges = {}
    for name in MAP_NAMES:
        arr = getattr(maps, name)
        lo, hi = float(arr.min()), float(arr.max())
        span = hi - lo
        scaled = np.zeros_like(arr) if span == 0 else (arr - lo) / span
        Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(directory / f"{name}.png")
        ranges[name] = [lo, hi]
    sidecar = {"width": maps.width, "height": maps.height, "ranges": ranges}
    (directory / "maps.json").write_text(json.dumps(sidecar, indent=2))
    return sidecar
