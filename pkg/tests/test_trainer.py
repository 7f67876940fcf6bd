import json

import numpy as np
import pytest

from crnerf import autodiff as ad
from crnerf import synthscene as ss
from crnerf import trainer as T
from conftest import tiny_config


@pytest.fixture(scope="module")
def data(tiny_dataset):
    return T.TrainingData(ss.Dataset.load(tiny_dataset))


def step_once(data, cfg, params=None, step=1):
    params = params if params is not None else T.init_params(cfg)
    rec, grads = T.train_step(params, data.batch(cfg, step), cfg, step, data.near, data.far)
    return params, rec, grads


def group_of(name):
    return name.split(".", 1)[0]


class TestConfig:
    def test_defaults(self):
        cfg = T.TrainConfig()
        assert (cfg.rays, cfg.patch, cfg.lr, cfg.lam, cfg.beta, cfg.samples, cfg.mask_reg) == (1024, 32, 5e-4, 1e-3, 1e-5, 64, 0.05)

    @pytest.mark.parametrize("kw", [{"rays": 1000}, {"lam": -1.0}, {"beta": -1e-5}, {"variant": "nerf-w"}, {"precision": "float16"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            T.TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = tiny_config("transient-only")
        assert T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestVariants:
    def test_groups(self):
        assert T.select_variant("full").groups == T.GROUPS
        assert set(T.select_variant("transient-only").groups) == {"field", "decoder", "segment"}
        assert set(T.select_variant("appearance-only").groups) == {"field", "enc_a", "transform", "decoder", "enc_c"}
        assert set(T.select_variant("base").groups) == {"field", "decoder"}
        assert T.select_variant("raypoint-fusion").point_fusion

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown variant"):
            T.select_variant("nerf-x")

    def test_all_groups_share_initialisation(self):
        a, b = T.init_params(tiny_config("full")), T.init_params(tiny_config("base"))
        for n in a.names():
            np.testing.assert_array_equal(a[n], b[n])

    def test_base_only_touches_field_and_decoder(self, data):
        _, _, grads = step_once(data, tiny_config("base"))
        assert {group_of(n) for n in grads} == {"field", "decoder"}
        for group in ("field", "decoder"):
            assert any(np.any(g != 0) for n, g in grads.items() if group_of(n) == group)

    def test_full_reaches_every_group(self, data):
        _, _, grads = step_once(data, tiny_config("full"))
        for group in T.GROUPS:
            assert any(np.any(g != 0) for n, g in grads.items() if group_of(n) == group), group

    @pytest.mark.parametrize("variant", T.VARIANTS)
    def test_inactive_groups_are_unchanged(self, data, variant):
        cfg = tiny_config(variant)
        params = T.init_params(cfg)
        before = params.copy()
        for step in (1, 2):
            step_once(data, cfg, params, step)
        graph = T.select_variant(cfg)
        for n in params.names():
            if group_of(n) not in graph.groups:
                np.testing.assert_array_equal(params[n], before[n])
                assert params.steps[n] == 0
            else:
                assert params.steps[n] == 2

    def test_raypoint_fusion_shapes(self, data):
        cfg = tiny_config("raypoint-fusion")
        p = T.init_params(cfg).bind(None)
        batch = data.batch(cfg, 1)
        with ad.precision(cfg.dtype):
            fused = T.compute_losses(p, batch, T.select_variant(cfg), cfg, data.near, data.far)
            plain = T.compute_losses(p, batch, T.select_variant("full"), cfg, data.near, data.far)
        assert fused.rendered.shape == plain.rendered.shape == (1, 3, cfg.patch, cfg.patch)
        assert np.isfinite(fused.total.data)


class TestLosses:
    def test_lambda_zero_is_appearance_loss(self, data):
        cfg = tiny_config("full", lam=0.0)
        _, rec, _ = step_once(data, cfg)
        assert rec.loss_total == rec.loss_a

    def test_total_combines_terms(self, data):
        _, rec, _ = step_once(data, tiny_config("full", lam=0.25))
        assert rec.loss_total == pytest.approx(rec.loss_a + 0.25 * rec.loss_t, rel=1e-14)

    def test_base_loss_is_plain_photometric(self, data):
        cfg = tiny_config("base")
        p = T.init_params(cfg).bind(None)
        batch = data.batch(cfg, 3)
        with ad.precision(cfg.dtype):
            terms = T.compute_losses(p, batch, T.select_variant(cfg), cfg, data.near, data.far)
        assert terms.loss_a is None
        assert terms.loss_t.data == pytest.approx(np.sum((terms.rendered.data - batch.target) ** 2), rel=1e-14)

    @pytest.mark.parametrize("variant", ["full", "base"])
    def test_overfits_a_frozen_batch(self, data, variant):
        cfg = tiny_config(variant, lr=3e-3)
        params = T.init_params(cfg)
        losses = [step_once(data, cfg, params, step=1)[1].loss_total for _ in range(201)]
        assert np.mean(np.diff(losses) < 0) >= 0.9
        assert losses[200] < 0.1 * losses[0]

    def test_non_finite_loss_reports_step(self, data):
        cfg = tiny_config("base")
        params = T.init_params(cfg)
        params["decoder.conv0.weight"][:] = np.inf
        with pytest.raises(T.NonFiniteLossError, match="step 7"):
            T.train_step(params, data.batch(cfg, 7), cfg, 7, data.near, data.far)


class TestBatches:
    def test_batch_depends_on_seed_and_step_only(self, data):
        cfg = tiny_config()
        a, b = data.batch(cfg, 5), data.batch(cfg, 5)
        assert (a.image_id, a.origin) == (b.image_id, b.origin)
        np.testing.assert_array_equal(a.rays.directions, b.rays.directions)
        assert a.jitter.random() == b.jitter.random()

    def test_patch_is_contiguous_and_inside(self, data):
        cfg = tiny_config()
        for step in range(1, 30):
            b = data.batch(cfg, step)
            r0, c0 = b.origin
            assert 0 <= r0 <= 16 - 8 and 0 <= c0 <= 16 - 8
            assert b.target.shape == (1, 3, 8, 8)
            np.testing.assert_array_equal(b.rays.pixels[0], [r0, c0])

    def test_patch_larger_than_image(self, data):
        with pytest.raises(ValueError, match="does not fit"):
            data.batch(tiny_config(rays=400), 1)


class TestRunTraining:
    def test_same_seed_logs_are_identical(self, tiny_dataset, tmp_path):
        cfg = tiny_config("full")
        T.run_training(tiny_dataset, cfg, tmp_path / "a")
        T.run_training(tiny_dataset, cfg, tmp_path / "b")
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        log = T.read_log(tmp_path / "a" / "train_log.csv")
        assert list(log[0]) == list(T.LOG_HEADER)
        assert [int(r["step"]) for r in log] == [1, 2, 3, 4]

    def test_zero_steps_writes_initial_checkpoint_only(self, tiny_dataset, tmp_path):
        out = T.run_training(tiny_dataset, tiny_config(steps=0), tmp_path)
        assert out.name == "ckpt_0000000.npz"
        assert sorted(p.name for p in tmp_path.glob("*.npz")) == ["ckpt_0000000.npz"]
        params, meta = ad.load_checkpoint(out)
        init = T.init_params(tiny_config())
        for n in init.names():
            np.testing.assert_array_equal(params[n], init[n])
        assert meta["step"] == 0

    def test_checkpoint_schedule(self, tiny_dataset, tmp_path):
        T.run_training(tiny_dataset, tiny_config(steps=5, checkpoint_every=2), tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.npz")) == ["ckpt_0000000.npz", "ckpt_0000002.npz", "ckpt_0000004.npz", "final.npz"]

    def test_resume_matches_uninterrupted(self, tiny_dataset, tmp_path):
        full = T.run_training(tiny_dataset, tiny_config(steps=4), tmp_path / "whole")
        T.run_training(tiny_dataset, tiny_config(steps=2), tmp_path / "part")
        resumed = T.run_training(tiny_dataset, tiny_config(steps=4), tmp_path / "part", resume=tmp_path / "part" / "ckpt_0000002.npz")
        a, _ = ad.load_checkpoint(full)
        b, meta = ad.load_checkpoint(resumed)
        assert meta["step"] == 4
        for n in a.names():
            np.testing.assert_array_equal(a[n], b[n])
            np.testing.assert_array_equal(a.v[n], b.v[n])
        assert (tmp_path / "whole" / "train_log.csv").read_bytes() == (tmp_path / "part" / "train_log.csv").read_bytes()

    def test_resume_rejects_other_variant(self, tiny_dataset, tmp_path):
        ckpt = T.run_training(tiny_dataset, tiny_config("base", steps=0), tmp_path / "a")
        with pytest.raises(ValueError, match="base"):
            T.run_training(tiny_dataset, tiny_config("full"), tmp_path / "b", resume=ckpt)

    def test_checkpoint_round_trip_then_step_is_exact(self, data, tmp_path):
        cfg = tiny_config("full")
        params, _, _ = step_once(data, cfg)
        ad.save_checkpoint(tmp_path / "c.npz", params, {"step": 1})
        loaded, _ = ad.load_checkpoint(tmp_path / "c.npz")
        step_once(data, cfg, params, 2)
        step_once(data, cfg, loaded, 2)
        for n in params.names():
            np.testing.assert_array_equal(params[n], loaded[n])

    def test_missing_cameras(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="cameras.json"):
            T.run_training(tmp_path, tiny_config(), tmp_path / "out")

    def test_no_training_images(self, tmp_path):
        root = ss.generate_dataset(ss.default_scene(), 1, 1, 1, 0.0, 0, tmp_path / "d", image_size=16)
        cams = json.loads((root / "cameras.json").read_text())
        (root / "cameras.json").write_text(json.dumps([c for c in cams if c["split"] != "train"]))
        with pytest.raises(ValueError, match="no training images"):
            T.run_training(root, tiny_config(), tmp_path / "out")

    def test_image_size_mismatch(self, tiny_dataset, tmp_path):
        import shutil

        root = tmp_path / "d"
        shutil.copytree(tiny_dataset, root)
        rec = next(c for c in json.loads((root / "cameras.json").read_text()) if c["split"] == "train")
        ss.write_png(root / "images" / f"{rec['id']}.png", np.zeros((10, 16, 3)))
        with pytest.raises(ValueError, match="cameras.json says"):
            T.run_training(root, tiny_config(), tmp_path / "out")
