import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mvacon.geometry import backproject
from mvacon.head import Box
from mvacon.scene import (GenerationError, Scene, SceneObject, ToyBackbone, generate_scene, read_pnm, render,
                          render_view, ring_rig, toy_backbone, write_pgm16, write_ppm, SCENE_DEFAULTS)
from mvacon.geometry import SceneRange
from mvacon.tensor import ParamStore


def ray_box_distance(origin, direction, box):
    """Slab test in the box frame; ray parameter of the first hit or inf."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    o = rot.T @ (origin - np.asarray(box.center))
    d = rot.T @ direction
    half = np.array([box.size[0], box.size[2], box.size[1]]) / 2
    t0, t1 = -math.inf, math.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if abs(o[k]) > half[k]:
                return math.inf
            continue
        a, b = (-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    return t0 if t0 <= t1 and t0 > 0 else math.inf


class TestGenerate:
    def test_empty_scene(self):
        scene = generate_scene({"objects": 0})
        assert scene.objects == []
        assert_array_equal(render(scene).images, 0.0)

    def test_deterministic(self):
        a, b = generate_scene(seed=3), generate_scene(seed=3)
        assert a.to_json() == b.to_json()
        assert_array_equal(render(a).images, render(b).images)

    def test_seed_changes_scene(self):
        assert generate_scene(seed=1).to_json() != generate_scene(seed=2).to_json()

    def test_camera_spacing(self):
        rig = generate_scene().rig
        fwd = [cam.forward for cam in rig]
        for n in range(6):
            cosang = fwd[n] @ fwd[(n + 1) % 6]
            assert math.degrees(math.acos(np.clip(cosang, -1, 1))) == pytest.approx(60.0, abs=1e-9)

    def test_objects_do_not_overlap(self):
        scene = generate_scene({"objects": 5}, seed=4)
        for i, a in enumerate(scene.objects):
            for b in scene.objects[i + 1:]:
                d = math.hypot(a.box.center[0] - b.box.center[0], a.box.center[2] - b.box.center[2])
                ra = 0.5 * math.hypot(*a.box.size[:2])
                rb = 0.5 * math.hypot(*b.box.size[:2])
                assert d > ra + rb

    def test_impossible_placement(self):
        with pytest.raises(GenerationError):
            generate_scene({"objects": 40, "placement": 1.0})

    def test_unknown_key(self):
        from mvacon.geometry import ConfigError
        with pytest.raises(ConfigError):
            generate_scene({"lights": 2})

    def test_advance_moves_centers(self):
        scene = generate_scene()
        later = scene.advance(0.5)
        for a, b in zip(scene.objects, later.objects):
            assert b.box.center[0] == pytest.approx(a.box.center[0] + 0.5 * a.box.velocity[0])
            assert b.box.center[2] == pytest.approx(a.box.center[2] + 0.5 * a.box.velocity[1])


class TestRender:
    def test_box_on_axis_centered(self):
        rig = ring_rig(1, (32, 32), 6.0, 1.0, 70.0, SceneRange())
        box = Box((0.0, 1.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        img, ids = render_view(rig[0], [SceneObject(box, 1.0)])
        rows, cols = np.nonzero(ids == 0)
        assert rows.size > 0
        assert (rows.min() + rows.max() + 1) / 2 == pytest.approx(16, abs=0.5)
        assert (cols.min() + cols.max() + 1) / 2 == pytest.approx(16, abs=0.5)

    def test_ray_cast_oracle(self):
        scene = generate_scene({"objects": 4}, seed=2)
        views = render(scene)
        for n, cam in enumerate(scene.rig):
            H, W = cam.height, cam.width
            for r in np.linspace(0, H - 1, 16).astype(int):
                for c in np.linspace(0, W - 1, 16).astype(int):
                    far = backproject(cam, c + 0.5, r + 0.5, 1.0)
                    d = far - cam.center
                    d /= np.linalg.norm(d)
                    dists = [ray_box_distance(cam.center, d, o.box) for o in scene.objects]
                    want = int(np.argmin(dists)) if np.isfinite(min(dists)) else -1
                    assert views.ids[n, r, c] == want, (n, r, c)

    def test_intensity_linearity(self):
        scene = generate_scene()
        doubled = Scene(scene.rig, [SceneObject(o.box, 2 * o.intensity) for o in scene.objects])
        assert_array_equal(render(doubled).images, 2 * render(scene).images)

    def test_flat_color_per_object(self):
        scene = generate_scene()
        views = render(scene)
        for k, o in enumerate(scene.objects):
            px = views.images[views.ids == k]
            if px.size:
                assert_array_equal(px, np.broadcast_to(o.color, px.shape))


class TestFiles:
    def test_ppm_round_trip(self, tmp_path, rng):
        img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
        write_ppm(tmp_path / "a.ppm", img, "config_hash=x")
        back, comments = read_pnm(tmp_path / "a.ppm")
        assert_allclose(back, img, atol=1e-12)
        assert comments == ["config_hash=x"]

    def test_pgm16_round_trip(self, tmp_path, rng):
        img = np.round(rng.uniform(size=(4, 6)) * 65535) / 65535
        write_pgm16(tmp_path / "a.pgm", img)
        back, _ = read_pnm(tmp_path / "a.pgm")
        assert_allclose(back, img, atol=1e-12)


class TestBackbone:
    def test_zero_images(self, rng):
        store = ParamStore(0)
        bb = ToyBackbone(store, "b", 4)
        for conv in bb.convs:
            conv.bias.data[...] = rng.normal(size=4)
        pyr = toy_backbone(np.zeros((1, 64, 64, 3)), bb)[0]
        for conv, m in zip(bb.convs, pyr):
            assert_array_equal(m.data, np.broadcast_to(np.maximum(conv.bias.data, 0), m.shape))

    def test_stride_arithmetic(self):
        bb = ToyBackbone(ParamStore(0), "b", 4)
        pyr = toy_backbone(np.zeros((1, 64, 64, 3)), bb)[0]
        assert [m.shape[:2] for m in pyr] == [(16, 16), (8, 8), (4, 4)] == bb.level_shapes(64, 64)
