import json
import math

import numpy as np
import pytest

from crnerf import synthscene as ss
from crnerf.synthscene import AppearanceVariant, Occluder, SceneSpec, Sphere, TransientSpec


def camera_at(position, size=33):
    return ss.make_camera(ss.look_at(np.asarray(position, dtype=np.float64)), size)


class TestGtRender:
    def test_empty_scene_is_background(self):
        scene = SceneSpec([], background=(0.2, 0.4, 0.6))
        img = ss.gt_render(scene, camera_at([0, -4, 1]))
        np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.4, 0.6], img.shape))

    def test_empty_scene_with_variant(self):
        scene = SceneSpec([], background=(0.2, 0.4, 0.6))
        var = AppearanceVariant(1, gain=(1.5, 1.0, 0.5), tint=(0.1, 0.0, 0.0), gamma=1.0)
        img = ss.gt_render(scene, camera_at([0, -4, 1]), var)
        np.testing.assert_allclose(img, np.broadcast_to([0.4, 0.4, 0.3], img.shape), atol=1e-15)

    def test_identity_variant_is_bit_exact(self):
        cam = camera_at([3, -2, 2])
        scene = ss.default_scene()
        np.testing.assert_array_equal(ss.gt_render(scene, cam, AppearanceVariant.identity()), ss.gt_render(scene, cam))

    def test_centered_sphere_shading(self):
        albedo = (0.8, 0.5, 0.2)
        scene = SceneSpec([Sphere((0.0, 0.0, 0.0), 1.0, albedo)])
        img = ss.gt_render(scene, camera_at([4 / math.sqrt(3), -4 / math.sqrt(3), 4 / math.sqrt(3)]))
        # the centre ray meets the sphere where the normal is (1, -1, 1)/sqrt(3)
        lambert = (0.3 - 0.5 + 0.8) / (math.sqrt(3) * math.sqrt(0.98))
        np.testing.assert_allclose(img[16, 16], np.asarray(albedo) * (0.25 + 0.75 * lambert), rtol=1e-12)

    def test_values_in_unit_range(self):
        var = AppearanceVariant.random(1, np.random.default_rng(0))
        img = ss.gt_render(ss.default_scene(), camera_at([3, 3, 3]), var)
        assert img.min() >= 0 and img.max() <= 1

    def test_degenerate_camera(self):
        with pytest.raises(ValueError, match="focal"):
            ss.CameraModel(0.0, 10.0, 5, 5, 10, 10, np.eye(4))


class TestCamera:
    def test_rays_are_unit(self):
        _, d = camera_at([2, -3, 2]).rays()
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_centre_ray_looks_at_target(self):
        cam = camera_at([2, -3, 2])
        o, d = cam.rays(np.array([[16.0, 16.0]]))
        np.testing.assert_allclose(d[0], -o[0] / np.linalg.norm(o[0]), atol=1e-12)

    def test_dict_round_trip(self):
        cam = camera_at([1, 2, 3])
        back = ss.CameraModel.from_dict(json.loads(json.dumps(cam.to_dict())))
        np.testing.assert_array_equal(back.pose, cam.pose)
        assert (back.fx, back.height) == (cam.fx, cam.height)

    def test_non_orthonormal_pose(self):
        pose = np.eye(4)
        pose[0, 0] = 2
        with pytest.raises(ValueError, match="orthonormal"):
            ss.CameraModel(10, 10, 5, 5, 10, 10, pose)


class TestScene:
    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            SceneSpec([], near=3.0, far=2.0)
        with pytest.raises(ValueError):
            SceneSpec([], near=0.0)

    def test_albedo_validated(self):
        with pytest.raises(ValueError):
            SceneSpec([Sphere((0, 0, 0), 1.0, (1.2, 0.0, 0.0))])

    def test_dict_round_trip(self):
        scene = ss.default_scene()
        assert SceneSpec.from_dict(json.loads(json.dumps(scene.to_dict()))) == scene


class TestTransients:
    def test_empty_list(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        out, mask = ss.composite_transients(img, TransientSpec())
        np.testing.assert_array_equal(out, img)
        assert not mask.any()

    def test_full_rectangle(self):
        _, mask = ss.composite_transients(np.zeros((8, 8, 3)), TransientSpec([Occluder("rect", 0, 0, 8, 8, (1, 0, 0))]))
        assert mask.all()

    def test_ten_by_ten(self):
        spec = TransientSpec([Occluder("rect", 3, 5, 10, 10, (0.5, 0.5, 0.5))])
        out, mask = ss.composite_transients(np.zeros((32, 32, 3)), spec)
        assert mask.sum() == 100
        np.testing.assert_array_equal(out[mask], np.full((100, 3), 0.5))

    def test_sampled_coverage(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert ss.sample_transients(64, 64, rng).mask(64, 64).mean() <= 0.4


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return ss.generate_dataset(ss.default_scene(), 8, 3, 3, 0.6, 5, root / "a", image_size=24)


class TestDataset:
    def test_layout(self, small_dataset):
        cams = json.loads((small_dataset / "cameras.json").read_text())
        assert len(cams) == 11
        keys = {"id", "fx", "fy", "cx", "cy", "H", "W", "pose", "split", "variant_id"}
        assert all(keys <= set(c) for c in cams)
        assert all(len(c["pose"]) == 16 for c in cams)
        for c in cams:
            assert (small_dataset / "images" / f"{c['id']}.png").exists()
            assert (small_dataset / "masks" / f"{c['id']}.png").exists() == (c["split"] == "train")
        assert (small_dataset / "variants.json").exists() and (small_dataset / "scene.json").exists()

    def test_same_seed_is_byte_identical(self, small_dataset, tmp_path):
        again = ss.generate_dataset(ss.default_scene(), 8, 3, 3, 0.6, 5, tmp_path / "b", image_size=24)
        for path in sorted(small_dataset.rglob("*")):
            if path.is_file():
                assert path.read_bytes() == (again / path.relative_to(small_dataset)).read_bytes(), path

    def test_masks_match_occluder_fills(self, small_dataset):
        ds = ss.Dataset.load(small_dataset)
        for rec in ds.split("train"):
            spec = TransientSpec([Occluder(**o) for o in rec["occluders"]])
            truth = spec.mask(24, 24)
            np.testing.assert_array_equal(ds.mask(rec["id"]), truth)
            expected, _ = ss.composite_transients(np.zeros((24, 24, 3)), spec)
            np.testing.assert_allclose(ds.image(rec["id"])[truth], expected[truth], atol=1e-12)

    def test_test_images_are_clean_renders(self, small_dataset):
        ds = ss.Dataset.load(small_dataset)
        variants = json.loads((small_dataset / "variants.json").read_text())
        for rec in ds.split("test"):
            var = AppearanceVariant(**{k: tuple(v) if isinstance(v, list) else v for k, v in variants[rec["variant_id"]].items()})
            clean = ss.to_uint8(ss.gt_render(ds.scene, ds.camera(rec["id"]), var)) / 255.0
            np.testing.assert_array_equal(ds.image(rec["id"]), clean)

    def test_reference_shares_variant(self, small_dataset):
        ds = ss.Dataset.load(small_dataset)
        for rec in ds.split("test"):
            if rec["reference_id"] is not None:
                assert ds.record(rec["reference_id"])["variant_id"] == rec["variant_id"]

    def test_cameras_see_the_scene(self, small_dataset):
        ds = ss.Dataset.load(small_dataset)
        for rec in ds.cameras:
            cam = ds.camera(rec["id"])
            o, d = cam.rays()
            # closest approach to the scene centre stays inside a radius-2 bounding sphere
            closest = np.linalg.norm(o - np.sum(o * d, axis=1, keepdims=True) * d, axis=1)
            assert closest.max() < 2.0

    def test_zero_occluder_rate(self, tmp_path):
        root = ss.generate_dataset(ss.default_scene(), 4, 1, 2, 0.0, 0, tmp_path, image_size=16)
        ds = ss.Dataset.load(root)
        assert not any(ds.mask(r["id"]).any() for r in ds.split("train"))

    def test_single_identity_variant(self, tmp_path):
        root = ss.generate_dataset(ss.default_scene(), 3, 2, 1, 0.0, 0, tmp_path, image_size=16)
        ds = ss.Dataset.load(root)
        for rec in ds.cameras:
            clean = ss.to_uint8(ss.gt_render(ds.scene, ds.camera(rec["id"]))) / 255.0
            np.testing.assert_array_equal(ds.image(rec["id"]), clean)

    def test_missing_cameras(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="cameras.json"):
            ss.Dataset.load(tmp_path)

    def test_invalid_arguments(self, tmp_path):
        with pytest.raises(ValueError):
            ss.generate_dataset(ss.default_scene(), 2, 1, 0, 0.0, 0, tmp_path)
        with pytest.raises(ValueError):
            ss.generate_dataset(ss.default_scene(), 2, 1, 1, 1.5, 0, tmp_path)
