import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from oracles import bilinear_value, brute_mask, random_polygon
from polysnake.geometry import Polygon
from polysnake.priors import PriorMaps, dump_maps, region_sum, sample, sample_many


def test_constant_map():
    val, grad = sample(np.full((10, 12), 3.5), (4.3, 6.1))
    assert val == 3.5
    np.testing.assert_array_equal(grad, [0.0, 0.0])


def test_linear_ramp():
    uu = np.tile(np.arange(20.0), (15, 1))
    val, grad = sample(uu, (3.25, 7.9))
    assert val == pytest.approx(3.25, abs=1e-14)
    np.testing.assert_allclose(grad, [1.0, 0.0], atol=1e-14)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-10, 10),
       st.floats(0, 18.99), st.floats(0, 13.99))
def test_planar_maps_exact(a, b, c, u, v):
    vv, uu = np.mgrid[0:15, 0:20].astype(float)
    val, grad = sample(a * uu + b * vv + c, (u, v))
    assert val == pytest.approx(a * u + b * v + c, abs=1e-12)
    np.testing.assert_allclose(grad, [a, b], atol=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(200):
        grid = rng.standard_normal((16, 16))
        # stay away from cell edges, where the bilinear surface has kinks
        p = rng.integers(0, 15, 2) + rng.uniform(0.01, 0.99, 2)
        _, grad = sample(grid, p)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            num = (sample(grid, p + e)[0] - sample(grid, p - e)[0]) / (2 * h)
            assert abs(grad[k] - num) <= 1e-5 * max(abs(num), 1e-3)


def test_value_matches_oracle():
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((9, 13))
    pts = rng.uniform(-3, 16, (300, 2))
    vals, _ = sample_many(grid, pts)
    expect = [bilinear_value(grid, u, v) for u, v in pts]
    np.testing.assert_allclose(vals, expect, atol=1e-12)


def test_clamped_outside():
    grid = np.random.default_rng(2).standard_normal((8, 8))
    val, grad = sample(grid, (-4.0, 3.5))
    assert val == pytest.approx(bilinear_value(grid, 0.0, 3.5))
    assert grad[0] == 0.0
    val, grad = sample(grid, (2.5, 30.0))
    assert val == pytest.approx(bilinear_value(grid, 2.5, 7.0))
    assert grad[1] == 0.0


class TestRegionSum:
    def test_ones_counts_pixels(self):
        sq = Polygon([[1.5, 1.5], [5.5, 1.5], [5.5, 4.5], [1.5, 4.5]])
        assert region_sum(np.ones((10, 10)), sq) == 12.0

    def test_empty_interior(self):
        thin = Polygon([[1.2, 1.2], [1.8, 1.2], [1.5, 1.8]])
        assert region_sum(np.ones((5, 5)), thin) == 0.0

    def test_matches_mask_and_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            kappa = rng.standard_normal((24, 30))
            nodes = random_polygon(rng, 30)
            expect = kappa[brute_mask(nodes, 30, 24)].sum()
            assert region_sum(kappa, Polygon(nodes)) == pytest.approx(expect, abs=1e-10)

    def test_additive_over_disjoint_polygons(self):
        kappa = np.random.default_rng(4).standard_normal((20, 20))
        a = Polygon([[1.5, 1.5], [8.5, 1.5], [8.5, 8.5], [1.5, 8.5]])
        b = Polygon([[10.5, 3.5], [17.5, 3.5], [14, 15]])
        both = Polygon(np.vstack([a.nodes, a.nodes[:1], b.nodes, b.nodes[:1]]))
        assert region_sum(kappa, both) == pytest.approx(region_sum(kappa, a) + region_sum(kappa, b))


class TestPriorMaps:
    def test_rejects_negative_weights(self):
        z = np.zeros((4, 4))
        with pytest.raises(ValueError):
            PriorMaps(z, z - 1, z, z)
        with pytest.raises(ValueError):
            PriorMaps(z, z, z - 1e-9, z)

    def test_rejects_mismatch_and_nonfinite(self):
        z = np.zeros((4, 4))
        with pytest.raises(ValueError):
            PriorMaps(z, z, z, np.zeros((4, 5)))
        bad = z.copy()
        bad[1, 1] = np.inf
        with pytest.raises(ValueError):
            PriorMaps(bad, z, z, z)

    def test_dimensions(self):
        m = PriorMaps.zeros(7, 5)
        assert (m.width, m.height) == (7, 5)
        assert m.d.shape == (5, 7)

    def test_dump(self, tmp_path):
        rng = np.random.default_rng(5)
        m = PriorMaps(rng.standard_normal((6, 9)), rng.random((6, 9)), np.zeros((6, 9)),
                      rng.standard_normal((6, 9)))
        side = dump_maps(m, tmp_path)
        for name in ("d", "alpha", "beta", "kappa"):
            img = np.asarray(Image.open(tmp_path / f"{name}.png"))
            assert img.shape == (6, 9) and img.dtype == np.uint8
        assert json.loads((tmp_path / "maps.json").read_text()) == side
        assert side["ranges"]["beta"] == [0.0, 0.0]
        d = np.asarray(Image.open(tmp_path / "d.png"))
        assert d.min() == 0 and d.max() == 255
