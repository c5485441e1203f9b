"""Procedural scene generator: geometry oracles, pair transforms, dataset IO."""

import json
import math
import os

import numpy as np
import pytest
from PIL import Image

from cleandift.scenes import (
    CorrespondenceAnnotation, PairTransform, SceneObject, SceneSpec,
    generate_pair_set, generate_scene, generate_scene_set, ingest_folder,
    make_pair, make_scene_spec, object_bbox, object_keypoints,
    save_scene_dataset, transform_point, transform_spec,
)


def _single_object_spec(obj, canvas=64):
    return SceneSpec(seed=0, canvas=canvas, objects=(obj,), background_id=0)


def _disk(size=16.0, cx=32.0, cy=32.0, depth=3.0):
    return SceneObject(category=1, size=size, cx=cx, cy=cy, orientation=0.3,
                       color=(0.9, 0.2, -0.5), depth=depth)


class TestGeometry:
    def test_disk_pixel_area(self):
        # Lattice-point count inside a radius-16 disk on a 64px canvas is
        # within 2% of pi r^2.
        sample = generate_scene(_single_object_spec(_disk()))
        area = int((sample.mask == 1).sum())
        assert abs(area - math.pi * 16 * 16) / (math.pi * 16 * 16) < 0.02

    def test_square_bbox_axis_aligned(self):
        obj = SceneObject(category=2, size=10.0, cx=30.0, cy=30.0, orientation=0.0,
                          color=(0, 0, 0), depth=2.0)
        x, y, w, h = object_bbox(obj)
        half = 10.0 / math.sqrt(2.0)
        assert (x, y) == pytest.approx((30 - half, 30 - half), abs=1e-9)
        assert (w, h) == pytest.approx((2 * half, 2 * half), abs=1e-9)

    def test_square_bbox_rotated_45(self):
        # At 45 degrees the corners sit on the axes at distance size/sqrt(2) *
        # sqrt(2) = size from the center, so the bbox spans 2*size.
        obj = SceneObject(category=2, size=10.0, cx=0.0, cy=0.0,
                          orientation=math.pi / 4, color=(0, 0, 0), depth=2.0)
        x, y, w, h = object_bbox(obj)
        assert (w, h) == pytest.approx((20.0, 20.0), abs=1e-9)

    def test_keypoints_rotate_with_object(self):
        obj = _disk()
        kps = dict((n, (x, y)) for n, x, y in object_keypoints(obj))
        c, s = math.cos(0.3), math.sin(0.3)
        r = obj.size / 2
        assert kps["center"] == pytest.approx((32.0, 32.0), abs=1e-12)
        assert kps["east"] == pytest.approx((32 + c * r, 32 + s * r), abs=1e-9)
        assert kps["north"] == pytest.approx((32 + s * r, 32 - c * r), abs=1e-9)

    def test_keypoints_inside_mask(self):
        for seed in range(5):
            spec = make_scene_spec(seed, canvas=48)
            sample = generate_scene(spec)
            for kp in sample.keypoints:
                obj = spec.objects[kp["object_index"]]
                px, py = int(kp["x"]), int(kp["y"])
                # Keypoints may be occluded by a nearer object, but must lie
                # within their own object's analytic coverage.
                dx, dy = kp["x"] - obj.cx, kp["y"] - obj.cy
                assert math.hypot(dx, dy) <= obj.size + 1e-9

    def test_center_keypoint_hits_own_class(self):
        sample = generate_scene(_single_object_spec(_disk()))
        kp = [k for k in sample.keypoints if k["name"] == "center"][0]
        assert sample.mask[int(kp["y"]), int(kp["x"])] == 1


class TestSceneInvariants:
    def test_deterministic(self):
        a = generate_scene(make_scene_spec(3, 32))
        b = generate_scene(make_scene_spec(3, 32))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.depth, b.depth)
        assert a.keypoints == b.keypoints

    def test_depth_consistent_with_occlusion(self):
        for seed in (0, 4, 9):
            spec = make_scene_spec(seed, 32)
            sample = generate_scene(spec)
            # Depth discontinuities only where the mask changes.
            depth_jump = (np.abs(np.diff(sample.depth, axis=0)) > 1e-6)
            mask_change = np.diff(sample.mask, axis=0) != 0
            assert not np.any(depth_jump & ~mask_change)
            # Masked pixels carry their object's depth plane; nearer wins.
            depths = {o.category: o.depth for o in spec.objects}
            for cat in np.unique(sample.mask):
                if cat == 0:
                    continue
                vals = np.unique(sample.depth[sample.mask == cat])
                assert all(any(abs(v - o.depth) < 1e-6 for o in spec.objects
                               if o.category == cat) for v in vals)

    def test_object_count_and_distinct_depths(self):
        for seed in range(8):
            spec = make_scene_spec(seed, 48)
            assert 2 <= len(spec.objects) <= 4
            ds = [o.depth for o in spec.objects]
            assert len(set(ds)) == len(ds)

    def test_image_range_and_types(self):
        s = generate_scene(make_scene_spec(1, 32))
        assert s.image.dtype == np.float32
        assert s.image.min() >= -1.0 and s.image.max() <= 1.0
        assert s.mask.min() >= 0 and s.mask.max() <= 3
        assert s.label in (1, 2, 3)


class TestPairs:
    def test_identity_transform(self):
        spec = make_scene_spec(3, 32)
        src, tgt, ann = make_pair(spec, PairTransform())
        for (sx, sy), (tx, ty) in ann.keypoints:
            assert (sx, sy) == pytest.approx((tx, ty), abs=1e-12)
        np.testing.assert_array_equal(src.mask, tgt.mask)

    def test_pure_translation(self):
        spec = make_scene_spec(6, 48)
        tf = PairTransform(dx=3.0, dy=-2.0)
        _, _, ann = make_pair(spec, tf)
        for (sx, sy), (tx, ty) in ann.keypoints:
            assert (tx, ty) == pytest.approx((sx + 3.0, sy - 2.0), abs=1e-9)

    def test_rotation_90_hand_computed(self):
        spec = make_scene_spec(3, 32)
        tf = PairTransform(rotation=math.pi / 2)
        cc = 16.0
        x, y = 20.0, 10.0
        tx, ty = transform_point(spec, tf, x, y)
        # Rotate (dx, dy) = (4, -6) by 90 degrees: (dx, dy) -> (-dy, dx).
        assert (tx, ty) == pytest.approx((cc - (y - cc), cc + (x - cc)), abs=1e-9)

    def test_out_of_canvas_rejected(self):
        spec = make_scene_spec(3, 32)
        with pytest.raises(ValueError):
            make_pair(spec, PairTransform(dx=100.0))

    def test_transform_spec_scales_size(self):
        spec = make_scene_spec(3, 32)
        out = transform_spec(spec, PairTransform(scale=1.5))
        for a, b in zip(spec.objects, out.objects):
            assert b.size == pytest.approx(1.5 * a.size)
            assert b.depth == a.depth

    def test_photometric_touches_target_only(self):
        spec = make_scene_spec(3, 32)
        src_plain, _, _ = make_pair(spec, PairTransform())
        src_jit, tgt_jit, _ = make_pair(spec, PairTransform(brightness=0.1, contrast=1.05))
        np.testing.assert_array_equal(src_plain.image, src_jit.image)
        assert not np.array_equal(src_jit.image, tgt_jit.image)

    def test_pair_set_structure(self):
        pairs = generate_pair_set(3, canvas=32, seed=1)
        assert len(pairs) == 3
        for src, tgt, ann in pairs:
            assert isinstance(ann, CorrespondenceAnnotation)
            assert ann.target_bbox[2] > 0 and ann.target_bbox[3] > 0
            n = 32
            for (sx, sy), (tx, ty) in ann.keypoints:
                assert 0 <= sx < n and 0 <= sy < n
                assert 0 <= tx < n and 0 <= ty < n


class TestIO:
    def test_save_dataset_layout(self, tmp_path):
        scenes = generate_scene_set(2, 32, seed=0)
        path = str(tmp_path / "ds")
        save_scene_dataset(path, scenes)
        assert sorted(os.listdir(os.path.join(path, "images"))) == ["000000.png", "000001.png"]
        meta = json.load(open(os.path.join(path, "annotations.json")))
        assert len(meta["samples"]) == 2
        mask = np.asarray(Image.open(os.path.join(path, "masks", "000000.png")))
        np.testing.assert_array_equal(mask, scenes[0].mask)
        raw = np.fromfile(os.path.join(path, "depth", "000000.npybin"), dtype="<f4")
        side = json.load(open(os.path.join(path, "depth", "000000.json")))
        np.testing.assert_array_equal(
            raw.reshape(side["shape"]), scenes[0].depth.astype(np.float32)
        )

    def test_ingest_crop_arithmetic(self, tmp_path):
        # 100x60 image: center crop to 60x60 with x offset 20, then resize.
        arr = np.zeros((60, 100, 3), dtype=np.uint8)
        arr[:, 20:80] = 255  # exactly the crop box
        Image.fromarray(arr).save(tmp_path / "a.png")
        out = ingest_folder(str(tmp_path), target_size=60)
        assert out.shape == (1, 3, 60, 60)
        np.testing.assert_allclose(out[0], 1.0, atol=1e-2)

    def test_ingest_square_passthrough(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / "a.png")
        out = ingest_folder(str(tmp_path), target_size=16)
        np.testing.assert_allclose(
            out[0], arr.transpose(2, 0, 1) / 127.5 - 1.0, atol=1e-6
        )

    def test_ingest_skips_bad_and_errors_when_empty(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not an image")
        with pytest.raises(ValueError):
            with pytest.warns(UserWarning):
                ingest_folder(str(tmp_path), 16)
