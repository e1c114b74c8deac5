"""Synthetic roughly-annotated blob images, dataset directories, and region cropping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Polygon, iou, rasterize


@dataclass(eq=False)
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    gt_polygon: Polygon
    gt_mask: np.ndarray  # (H, W) bool, rasterized gt_polygon

    @classmethod
    def from_polygon(cls, id: str, image: np.ndarray, poly: Polygon) -> Sample:
        h, w = image.shape[:2]
        mask = rasterize(poly, w, h)
        if not mask.any():
            raise ValueError(f"sample {id}: ground-truth polygon encloses no pixels")
        return cls(id, image, poly, mask)

    @property
    def size(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    n: int = 250
    size: int = 128
    texture: float = 0.5
    offcenter_frac: float = 0.5
    roughness: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if not 0 <= self.offcenter_frac <= 1:
            raise ValueError("offcenter_frac must lie in [0, 1]")
        if not 0 <= self.texture <= 1:
            raise ValueError("texture must lie in [0, 1]")
        if self.roughness < 0:
            raise ValueError("roughness must be non-negative")


BACKGROUND = np.array([0.91, 0.76, 0.84])
OBJECT_PALETTE = np.array([
    [0.45, 0.22, 0.55],
    [0.30, 0.15, 0.45],
    [0.62, 0.35, 0.66],
    [0.52, 0.20, 0.38],
])


def _smooth_noise(rng, size, sigma):
    return ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap") * sigma


def _blob_radius(rng, r0):
    ks = np.arange(2, 5)
    amp = rng.uniform(-0.12, 0.12, size=len(ks)) / (ks - 1)
    phase = rng.uniform(0, 2 * np.pi, size=len(ks))

    def radius(theta):
        theta = np.asarray(theta)[..., None]
        return r0 * (1 + (amp * np.cos(ks * theta + phase)).sum(axis=-1))
    return radius


def _annotation(rng, center, radius, r0, roughness):
    k = int(rng.integers(12, 21))
    theta = 2 * np.pi * (np.arange(k) + rng.uniform(-0.2, 0.2, size=k)) / k
    # push vertices out so chords straddle the true boundary instead of cutting inside it
    grow = 2 / (1 + np.cos(np.pi / k))
    r = radius(theta) * grow + roughness * r0 * (rng.uniform(-1, 1, size=k) + 0.5)
    return Polygon(np.column_stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)]))


def _place(rng, size, offcenter, r_ext):
    half = size / 2
    for _ in range(1000):
        if offcenter:
            d = rng.uniform(0.26, 0.34) * size
        else:
            d = rng.uniform(0, 0.1) * size
        phi = rng.uniform(0, 2 * np.pi)
        c = np.array([half + d * np.cos(phi), half + d * np.sin(phi)])
        if np.all(c - r_ext >= 2) and np.all(c + r_ext <= size - 3):
            return c
    return None


def _render(rng, size, blob, texture):
    img = BACKGROUND + 0.05 * np.stack([_smooth_noise(rng, size, 6)] * 3, axis=2)
    img += 0.03 * rng.normal(size=(size, size, 3))
    vv, uu = np.mgrid[0:size, 0:size]
    n_patches = 1 + int(round(texture * rng.integers(1, 4)))
    inside = np.argwhere(blob)
    seeds = inside[rng.choice(len(inside), size=n_patches, replace=False)]
    dist = np.stack([np.hypot(vv - s[0], uu - s[1]) for s in seeds])
    label = dist.argmin(axis=0)
    obj = np.zeros((size, size, 3))
    colors = rng.permutation(len(OBJECT_PALETTE))
    for p in range(n_patches):
        base = OBJECT_PALETTE[colors[p % len(OBJECT_PALETTE)]]
        base = base + texture * rng.uniform(-0.08, 0.08, size=3)
        sigma = rng.uniform(0.7, 2.5)
        tex = _smooth_noise(rng, size, sigma)
        amp = 0.04 + 0.12 * texture
        patch = base + amp * tex[..., None] * np.array([1.0, 0.8, 1.0])
        obj[label == p] = patch[label == p]
    alpha = ndimage.gaussian_filter(blob.astype(float), 0.8)[..., None]
    img = alpha * obj + (1 - alpha) * img
    return np.round(np.clip(img, 0, 1) * 255) / 255


def _generate_one(cfg: SynthConfig, i: int) -> tuple[Sample, np.ndarray]:
    size = cfg.size
    rng = np.random.default_rng([cfg.seed, i])
    offcenter = rng.random() < cfg.offcenter_frac
    for _ in range(100):
        r0 = rng.uniform(0.13, 0.19) * size
        radius = _blob_radius(rng, r0)
        ann = _annotation(rng, (0.0, 0.0), radius, r0, cfg.roughness)
        r_ext = np.maximum(np.abs(ann.nodes).max(axis=0), 1.3 * r0)
        center = _place(rng, size, offcenter, r_ext)
        if center is not None:
            break
    else:
        raise RuntimeError(f"could not place the object of sample {i}")
    theta = 2 * np.pi * np.arange(256) / 256
    rb = radius(theta)
    outline = Polygon(np.column_stack([center[0] + rb * np.cos(theta), center[1] + rb * np.sin(theta)]))
    blob = rasterize(outline, size, size)
    image = _render(rng, size, blob, cfg.texture)
    sample = Sample.from_polygon(f"s{cfg.seed:03d}_{i:05d}", image, ann.translate(*center))
    return sample, blob


def generate(cfg: SynthConfig) -> list[Sample]:
    """One textured blob per image with a coarse, jittered polygon annotation.

    Images are quantised to 8-bit levels so that saving and reloading a dataset
    reproduces the in-memory samples exactly.
    """
    return [_generate_one(cfg, i)[0] for i in range(cfg.n)]


def object_masks(cfg: SynthConfig) -> list[np.ndarray]:
    """Exact object masks behind the annotations of ``generate(cfg)``."""
    return [_generate_one(cfg, i)[1] for i in range(cfg.n)]


def save_dir(samples: list[Sample], path, cfg: SynthConfig | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pixels = np.round(s.image * 255).astype(np.uint8)
        Image.fromarray(pixels).save(path / f"{s.id}.png", optimize=False)
        (path / f"{s.id}.json").write_text(json.dumps(s.gt_polygon.to_json()))
    manifest = {"ids": [s.id for s in samples], "config": asdict(cfg) if cfg else None}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dir(path) -> list[Sample]:
    """Read ``<id>.png`` / ``<id>.json`` pairs, sorted by id."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    pngs = {p.stem: p for p in path.glob("*.png")}
    jsons = {p.stem: p for p in path.glob("*.json") if p.name != "manifest.json"}
    for stem in sorted(set(pngs) ^ set(jsons)):
        have = pngs.get(stem) or jsons.get(stem)
        missing = f"{stem}.json" if stem in pngs else f"{stem}.png"
        raise ValueError(f"{have}: missing partner file {missing}")
    samples = []
    dims = None
    for stem in sorted(pngs):
        with Image.open(pngs[stem]) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255
        h, w = image.shape[:2]
        if h != w:
            raise ValueError(f"{pngs[stem]}: image is {w}x{h}, expected a square image")
        if dims is None:
            dims = h
        elif h != dims:
            raise ValueError(f"{pngs[stem]}: size {h} differs from the dataset's {dims}")
        try:
            poly = Polygon.load(jsons[stem])
        except (ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"{jsons[stem]}: invalid polygon ({exc})") from None
        lo = poly.nodes.min(axis=0)
        hi = poly.nodes.max(axis=0)
        if lo.min() < 0 or hi[0] > w or hi[1] > h:
            raise ValueError(f"{jsons[stem]}: polygon extends outside the {w}x{h} image")
        try:
            samples.append(Sample.from_polygon(stem, image, poly))
        except ValueError as exc:
            raise ValueError(f"{jsons[stem]}: {exc}") from None
    return samples


def expand_box(box, expand, width, height):
    """Grow ``(u0, v0, u1, v1)`` by ``expand`` in each dimension about its centre, then clamp."""
    u0, v0, u1, v1 = box
    cu, cv = (u0 + u1) / 2, (v0 + v1) / 2
    hw = (u1 - u0) * (1 + expand) / 2
    hh = (v1 - v0) * (1 + expand) / 2
    grown = (cu - hw, cv - hh, cu + hw, cv + hh)
    clamped = (max(0.0, grown[0]), max(0.0, grown[1]), min(float(width), grown[2]), min(float(height), grown[3]))
    return grown, clamped


def resize_image(image: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of an ``(H, W, C)`` float image to ``out_size`` square."""
    chans = [np.asarray(Image.fromarray(image[..., c].astype(np.float32)).resize(
        (out_size, out_size), Image.Resampling.BILINEAR)) for c in range(image.shape[2])]
    return np.stack(chans, axis=2).astype(np.float64)


def crop_and_resize(image: np.ndarray, annotation: Polygon, expand: float = 0.40,
                    out_size: int = 512, sample_id: str = "region") -> Sample:
    """Crop the annotation's bounding box grown by ``expand`` and resize it to a square."""
    if expand < 0:
        raise ValueError("expand must be non-negative")
    h, w = image.shape[:2]
    box = annotation.bbox()
    if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
        raise ValueError("annotation bounding box is degenerate")
    _, (u0, v0, u1, v1) = expand_box(box, expand, w, h)
    c0, r0 = int(np.floor(u0)), int(np.floor(v0))
    c1, r1 = int(np.ceil(u1)), int(np.ceil(v1))
    crop = image[r0:r1, c0:c1]
    su = out_size / (c1 - c0)
    sv = out_size / (r1 - r0)
    if crop.shape[:2] == (out_size, out_size):
        resized = crop.astype(np.float64).copy()
    else:
        resized = np.clip(resize_image(crop, out_size), 0, 1)
    poly = Polygon((annotation.nodes - np.array([c0, r0])) * np.array([su, sv]))
    return Sample.from_polygon(sample_id, resized, poly)
