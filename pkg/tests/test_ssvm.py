import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_mask, count_iou, snake_energy
from polysnake import acm, ssvm
from polysnake.acm import AcmOptions
from polysnake.geometry import Polygon, circle, rasterize
from polysnake.gradcheck import check_map_grads, smooth_maps
from polysnake.priors import PriorMaps


def random_instance(rng, size=32):
    maps = PriorMaps(rng.standard_normal((size, size)), rng.random((size, size)) * 0.05,
                     rng.random((size, size)) * 0.05, rng.standard_normal((size, size)) * 0.2)
    gt = circle(rng.uniform(10, 22, 2), rng.uniform(4, 9), int(rng.integers(8, 30)))
    gt = Polygon(gt.nodes + rng.normal(0, 0.5, gt.nodes.shape))
    hat = circle(rng.uniform(8, 24, 2), rng.uniform(3, 10), int(rng.integers(8, 30)))
    return maps, gt, hat, rasterize(gt, size, size)


class TestTaskLoss:
    def test_trivial(self):
        a = np.zeros((8, 8), bool)
        a[2:5, 2:5] = True
        b = np.zeros_like(a)
        b[6:, 6:] = True
        assert ssvm.task_loss(a, a) == 0.0
        assert ssvm.task_loss(a, b) == 1.0

    def test_half_overlap(self):
        a = np.zeros((10, 10), bool)
        b = np.zeros((10, 10), bool)
        a[0:4, 0:4] = True
        b[0:4, 2:6] = True
        assert ssvm.task_loss(a, b) == pytest.approx(1 - count_iou(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssvm.task_loss(np.zeros((3, 3), bool), np.zeros((4, 3), bool))


class TestAugmentation:
    def test_hand_values(self):
        gt = np.zeros((40, 40), bool)
        gt[10:30, 10:30] = True  # 400 pixels
        kappa = np.random.default_rng(0).standard_normal((40, 40))
        z = np.zeros((40, 40))
        aug = ssvm.augmented_maps(PriorMaps(z, z, z, kappa), gt, loss_scale=2.0)
        assert aug.kappa[15, 15] == pytest.approx(kappa[15, 15] + 2.0 / 400)
        assert aug.kappa[0, 0] == pytest.approx(kappa[0, 0] - 2.0 / 400)

    def test_empty_gt(self):
        with pytest.raises(ValueError):
            ssvm.augmented_maps(PriorMaps.zeros(5, 5), np.zeros((5, 5), bool))
        with pytest.raises(ValueError):
            ssvm.loss_augmented_infer(PriorMaps.zeros(5, 5), np.zeros((5, 5), bool))

    def test_zero_scale_matches_plain_inference(self):
        rng = np.random.default_rng(1)
        maps = smooth_maps(48, rng)
        gt = rasterize(circle((20, 26), 8, 30), 48, 48)
        opts = AcmOptions(max_iters=40, L=30)
        hat = ssvm.loss_augmented_infer(maps, gt, opts, ssvm.SsvmConfig(loss_scale=0.0))
        plain = acm.infer_multi(maps, opts)
        best = min(range(5), key=lambda k: (plain[k][1], k))
        assert hat == plain[best][0]

    def test_full_frame_gt_shrinks(self):
        # every pixel is inside gt, so kappa rises uniformly and the first descent
        # step encloses less area than the unaugmented step
        rng = np.random.default_rng(2)
        z = np.zeros((40, 40))
        opts = AcmOptions(max_iters=1, L=30, step_mode="gradient", step_size=0.5, backtracking=False)
        for _ in range(50):
            maps = PriorMaps(rng.normal(0, 0.05, (40, 40)), np.full((40, 40), rng.uniform(0.005, 0.05)), z,
                             np.full((40, 40), rng.uniform(-0.1, 0.1)))
            aug = ssvm.augmented_maps(maps, np.ones((40, 40), bool), rng.uniform(1, 50))
            assert (aug.kappa > maps.kappa).all()
            init = circle(rng.uniform(15, 25, 2), rng.uniform(4, 8), 30)
            plain, _ = acm.evolve(init, maps, opts)
            shrunk, _ = acm.evolve(init, aug, opts)
            assert abs(shrunk.area()) <= abs(plain.area())

    def test_winner_maximises_score(self):
        rng = np.random.default_rng(3)
        maps = smooth_maps(48, rng)
        gt = rasterize(circle((30, 20), 9, 30), 48, 48)
        opts = AcmOptions(max_iters=40, L=30)
        hat = ssvm.loss_augmented_infer(maps, gt, opts)
        aug = ssvm.augmented_maps(maps, gt)
        scores = [ssvm.surrogate_loss(gt, rasterize(p, 48, 48)) - acm.energy(p, maps)
                  for p, _ in acm.infer_multi(aug, opts)]
        mine = ssvm.surrogate_loss(gt, rasterize(hat, 48, 48)) - acm.energy(hat, maps)
        assert mine == max(scores)


class TestMapGrads:
    def test_sums(self):
        rng = np.random.default_rng(4)
        maps, gt, _, mask = random_instance(rng)
        g = ssvm.energy_map_grads(gt, maps)
        assert g.g_kappa.sum() == mask.sum()
        assert g.g_d.sum() == pytest.approx(len(gt))
        np.testing.assert_array_equal(g.g_kappa, brute_mask(gt.nodes, 32, 32))

    def test_energy_is_inner_product(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            maps, gt, _, _ = random_instance(rng)
            g = ssvm.energy_map_grads(gt, maps)
            lin = sum(float(np.vdot(a, b)) for a, b in zip(g.as_tuple(), (maps.d, maps.alpha, maps.beta, maps.kappa)))
            assert lin == pytest.approx(acm.energy(gt, maps), rel=1e-10, abs=1e-10)

    def test_single_cell_perturbation(self):
        rng = np.random.default_rng(6)
        maps, gt, _, _ = random_instance(rng)
        g = ssvm.energy_map_grads(gt, maps)
        base = acm.energy(gt, maps)
        eps = 1e-3
        for _ in range(50):
            k = int(rng.integers(4))
            r, c = rng.integers(0, 32, 2)
            arrs = [m.copy() for m in (maps.d, maps.alpha, maps.beta, maps.kappa)]
            arrs[k][r, c] += eps
            got = (acm.energy(gt, PriorMaps(*arrs)) - base) / eps
            assert got == pytest.approx(g.as_tuple()[k][r, c], rel=1e-6, abs=1e-7)

    def test_directional_oracle(self):
        res = check_map_grads(seed=0)
        assert res["passed"], res
        assert not check_map_grads(seed=0, n_dirs=5, flip=True)["passed"]


class TestHinge:
    def test_self_is_zero(self):
        rng = np.random.default_rng(7)
        maps, gt, _, mask = random_instance(rng)
        assert ssvm.hinge(gt, gt, maps, mask) == 0.0
        assert ssvm.subgradient(gt, gt, maps, mask).is_zero()
        assert ssvm.subgradient(gt, gt, maps, mask, rule="hinge").is_zero()

    def test_high_energy_prediction_clamps(self):
        rng = np.random.default_rng(8)
        maps, gt, hat, mask = random_instance(rng)
        bump = np.zeros((32, 32))
        bump[:7, :7] = 1e3
        bumped = maps.replace(d=maps.d + bump)
        far = circle((3, 3), 2, 12)
        assert ssvm.hinge(gt, far, bumped, mask) == 0.0

    def test_term_by_term(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            maps, gt, hat, mask = random_instance(rng)
            delta = 1 - count_iou(mask, brute_mask(hat.nodes, 32, 32))
            e_gt = snake_energy(gt.nodes, maps.d, maps.alpha, maps.beta, maps.kappa)
            e_hat = snake_energy(hat.nodes, maps.d, maps.alpha, maps.beta, maps.kappa)
            assert ssvm.hinge(gt, hat, maps, mask) == pytest.approx(max(0.0, delta + e_gt - e_hat), abs=1e-9)


class TestSubgradient:
    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1))
    def test_case_split(self, seed):
        maps, gt, hat, mask = random_instance(np.random.default_rng(seed))
        delta, e_gt, e_hat = ssvm.margin_terms(gt, hat, maps, mask)
        g = ssvm.subgradient(gt, hat, maps, mask)
        assert g.is_zero() == (e_gt - e_hat >= delta)
        assert ssvm.hinge(gt, hat, maps, mask) >= 0.0

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1))
    def test_hinge_rule_follows_hinge(self, seed):
        maps, gt, hat, mask = random_instance(np.random.default_rng(seed))
        g = ssvm.subgradient(gt, hat, maps, mask, rule="hinge")
        assert g.is_zero() == (ssvm.hinge(gt, hat, maps, mask) == 0.0)

    def test_kappa_part_is_mask_difference(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            maps, gt, hat, mask = random_instance(rng)
            delta, e_gt, e_hat = ssvm.margin_terms(gt, hat, maps, mask)
            rule = "literal" if e_gt - e_hat < delta else "hinge"
            g = ssvm.subgradient(gt, hat, maps, mask, rule=rule)
            expect = brute_mask(gt.nodes, 32, 32).astype(int) - brute_mask(hat.nodes, 32, 32).astype(int)
            np.testing.assert_array_equal(g.g_kappa, expect)

    def test_margin_satisfied_gives_zero(self):
        assert not ssvm.margin_violated(0.3, 5.0, 4.0)
        assert ssvm.margin_violated(0.3, 4.0, 4.0)
        assert ssvm.margin_violated(0.3, 5.0, 4.0, "hinge")
        assert not ssvm.margin_violated(0.3, 4.0, 5.0, "hinge")
        with pytest.raises(ValueError):
            ssvm.margin_violated(0.3, 4.0, 5.0, "other")

    def test_config(self):
        with pytest.raises(ValueError):
            ssvm.SsvmConfig(C=0)
        assert ssvm.SsvmConfig() == ssvm.SsvmConfig(1.0, 1.0)
