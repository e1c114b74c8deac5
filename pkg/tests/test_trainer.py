import json
import struct

import numpy as np
import pytest

from polysnake import acm, backbone, ssvm, trainer
from polysnake.acm import AcmOptions
from polysnake.backbone import ArchConfig
from polysnake.data import Sample, SynthConfig, generate
from polysnake.priors import PriorMaps
from polysnake.trainer import (CheckpointError, TrainConfig, TrainReport, evaluate, evaluate_maps,
                               load_checkpoint, save_checkpoint, split_dataset, train, update_step)

TINY = ArchConfig.tiny()
FAST = AcmOptions(max_iters=15, L=16)


def config(**kw):
    base = dict(epochs=1, batch=4, arch=TINY, acm=FAST, step_size=1e-3, track_train_iou=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SynthConfig(n=6, size=16, seed=1))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(step_size=-1), dict(batch=0), dict(C=0),
                                    dict(optimizer="rmsprop"), dict(margin_rule="x"),
                                    dict(compute_dtype="float16")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.step_size, cfg.C, cfg.batch) == (1e-4, 1.0, 8)
        assert cfg.ssvm == ssvm.SsvmConfig(1.0, 1.0)

    def test_json_round_trip(self):
        cfg = config(optimizer="adam", seed=7)
        assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg

    def test_report_round_trip(self, tmp_path):
        r = TrainReport([1.0, 0.5], [0.3, 0.4], 0.6, 12.5, ["a"], ["b"], {"x": 1})
        r.save(tmp_path / "r.json")
        assert TrainReport.from_json(json.loads((tmp_path / "r.json").read_text())) == r


class TestUpdate:
    def test_pure_weight_decay(self):
        params = backbone.init_params(TINY, 0)
        before = params.norm()
        update_step(params, None, 1, config(step_size=0.01))
        assert params.norm() == pytest.approx(0.99 * before, rel=1e-12)

    def test_sgd_formula(self):
        params = backbone.init_params(TINY, 1)
        ref = params.copy()
        rng = np.random.default_rng(1)
        g = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        update_step(params, g, 4, config(step_size=0.1, C=2.0))
        for k in params:
            np.testing.assert_allclose(params[k], ref[k] - 0.1 * (ref[k] + 0.5 * g[k]), rtol=1e-13)

    def test_adam_first_step(self):
        params = backbone.init_params(TINY, 2)
        ref = params.copy()
        rng = np.random.default_rng(2)
        g = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        update_step(params, g, 1, config(step_size=1e-3, optimizer="adam"))
        for k in params:
            total = ref[k] + g[k]
            # the first bias-corrected Adam step is eta * sign(total) up to eps
            np.testing.assert_allclose(params[k], ref[k] - 1e-3 * total / (np.abs(total) + 1e-8), rtol=1e-9)

    def test_adam_keeps_moments(self):
        params = backbone.init_params(TINY, 3)
        opt = trainer.Optimizer(config(optimizer="adam"))
        opt.step(params, None, 1)
        opt.step(params, None, 1)
        assert opt.t == 2 and set(opt.m) == set(params)


class TestTrain:
    def test_zero_step_leaves_params(self, tiny_data):
        start = backbone.init_params(TINY, 0)
        params, report = train(tiny_data, config(step_size=0.0, epochs=2, track_train_iou=True),
                               params=start.copy())
        assert params.equal(start)
        assert len(report.epoch_hinge) == len(report.epoch_train_iou) == 2
        assert all(np.isfinite(report.epoch_train_iou))

    def test_zero_subgradients_decay_weights(self, tiny_data, monkeypatch):
        monkeypatch.setattr(ssvm, "subgradient", lambda *a, **k: ssvm.MapGrads.zeros((16, 16)))
        start = backbone.init_params(TINY, 0)
        params, _ = train(tiny_data[:3], config(step_size=0.05, batch=3), params=start.copy())
        assert params.norm() == pytest.approx(0.95 * start.norm(), rel=1e-12)

    def test_deterministic(self, tiny_data):
        a, ra = train(tiny_data, config(epochs=2))
        b, rb = train(tiny_data, config(epochs=2))
        assert a.equal(b)
        assert ra.epoch_hinge == rb.epoch_hinge

    def test_order_within_batch_irrelevant(self, tiny_data):
        # one batch per epoch: the batch is re-sorted by id, so input order cannot matter
        a, _ = train(tiny_data, config(batch=6))
        b, _ = train(tiny_data[::-1], config(batch=6))
        assert a.equal(b)

    def test_training_changes_params(self, tiny_data):
        start = backbone.init_params(TINY, 0)
        params, report = train(tiny_data, config(optimizer="adam"), test_set=tiny_data[:2])
        assert not params.equal(start)
        assert 0.0 <= report.test_iou <= 1.0
        assert report.train_ids == [s.id for s in tiny_data]
        assert report.test_ids == [s.id for s in tiny_data[:2]]

    def test_update_per_init(self, tiny_data):
        params, report = train(tiny_data[:2], config(update_per_init=True, optimizer="adam",
                                                         track_train_iou=True))
        assert len(report.epoch_hinge) == 1 and np.isfinite(report.epoch_hinge[0])

    def test_checkpoint_every(self, tiny_data, tmp_path):
        path = tmp_path / "ck.bin"
        params, report = train(tiny_data[:2], config(epochs=2, checkpoint_every=1), checkpoint_path=path)
        loaded, rep = load_checkpoint(path)
        assert loaded.equal(params)
        assert rep.epoch_hinge == report.epoch_hinge

    def test_rejects_bad_data(self, tiny_data):
        with pytest.raises(ValueError):
            train([], config())
        big = generate(SynthConfig(n=1, size=32))
        with pytest.raises(ValueError, match="input_size"):
            train(big, config())
        s = tiny_data[0]
        empty = Sample(s.id, s.image, s.gt_polygon, np.zeros_like(s.gt_mask))
        with pytest.raises(ValueError, match="empty"):
            train([empty], config())
        with pytest.raises(ValueError):
            train(tiny_data, config(), params=backbone.init_params(ArchConfig.desk(), 0))

    def test_divergence_is_reported(self, tiny_data):
        with pytest.raises(FloatingPointError, match="non-finite"):
            train(tiny_data, config(step_size=1e3, batch=1))


class TestEvaluate:
    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(backbone.init_params(TINY, 0), [])

    def test_perfect_maps(self):
        # zero maps leave every start in place; the centre start is the ground truth
        gt = acm.init_polygons(32, 32, 0.2, 20)[acm.CENTER_INDEX]
        sample = Sample.from_polygon("s", np.zeros((32, 32, 3)), gt)
        rec = evaluate_maps(PriorMaps.zeros(32, 32), sample, AcmOptions(L=20))
        assert rec.iou == 1.0 and rec.winner == acm.CENTER_INDEX
        rec = evaluate_maps(PriorMaps.zeros(32, 32), sample, AcmOptions(L=20), mode="center")
        assert rec.iou == 1.0
        with pytest.raises(ValueError):
            evaluate_maps(PriorMaps.zeros(32, 32), sample, AcmOptions(L=20), mode="other")

    def test_multi_never_below_center(self, tiny_data):
        params = backbone.init_params(TINY, 4)
        multi, rm = evaluate(params, tiny_data, FAST)
        center, rc = evaluate(params, tiny_data, FAST, mode="center")
        assert all(a.iou >= b.iou for a, b in zip(rm, rc))
        assert multi >= center


class TestSplit:
    def test_split(self, tiny_data):
        tr, te = split_dataset(tiny_data, 2, seed=3)
        assert len(tr) == 4 and len(te) == 2
        assert {s.id for s in tr}.isdisjoint({s.id for s in te})
        assert [s.id for s in split_dataset(tiny_data, 2, seed=3)[1]] == [s.id for s in te]
        with pytest.raises(ValueError):
            split_dataset(tiny_data, 6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        for seed in range(5):
            params = backbone.init_params(TINY, seed)
            report = TrainReport([0.5], [0.25], 0.75, 1.0, ["a"], ["b"], {"k": seed})
            save_checkpoint(params, report, tmp_path / "c.bin")
            loaded, rep = load_checkpoint(tmp_path / "c.bin")
            assert loaded.arch == TINY
            assert all(np.array_equal(loaded[k], params[k]) for k in params)
            assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)
            assert rep == report

    def test_no_report(self, tmp_path):
        save_checkpoint(backbone.init_params(TINY, 0), None, tmp_path / "c.bin")
        assert load_checkpoint(tmp_path / "c.bin")[1] is None

    def test_truncated(self, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(backbone.init_params(TINY, 0), None, path)
        raw = path.read_bytes()
        for cut in (4, 12, 40, len(raw) - 8):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError, match="corrupt|checkpoint"):
                load_checkpoint(path)

    def test_bad_magic_and_header(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
        blob = b"{not json"
        path.write_bytes(trainer.MAGIC + struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)

    def test_mismatched_arch_names_tensor(self, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(backbone.init_params(TINY, 0), None, path)
        other = ArchConfig(encoder_levels=2, decoder_levels=1, base_channels=6, input_size=16)
        with pytest.raises(CheckpointError, match="enc0.conv.w"):
            load_checkpoint(path, arch=other)
        deeper = ArchConfig(encoder_levels=3, decoder_levels=2, base_channels=4, input_size=16)
        with pytest.raises(CheckpointError, match="enc2"):
            load_checkpoint(path, arch=deeper)

    def test_atomic_overwrite(self, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(backbone.init_params(TINY, 0), None, path)
        save_checkpoint(backbone.init_params(TINY, 1), None, path)
        assert load_checkpoint(path)[0].equal(backbone.init_params(TINY, 1))
        assert not (tmp_path / "c.bin.tmp").exists()
