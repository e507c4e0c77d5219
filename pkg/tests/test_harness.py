import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mvacon import verify
from mvacon.bench import BENCH_HEADER, doubling_ratios, run_bench, token_layout, write_bench_csv
from mvacon.cli import main
from mvacon.config import DEFAULTS, config_hash, load_config, make_config
from mvacon.geometry import ConfigError
from mvacon.model import Detector
from mvacon.scene import read_pnm
from mvacon.train import CSV_HEADER, TrainingError, load_checkpoint, make_batch, train
from mvacon.viz import cluster_heatmaps, deform_points, minmax, upsample

from conftest import small_config


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return lines[1], lines[2:]


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            make_config({"model": {"mvacon": {"cluster": 4}}})

    def test_defaults_materialized(self):
        cfg = make_config()
        assert cfg["training"] == {"steps": 200, "lr": 1e-2, "seed": 0}
        assert cfg["model"]["lift"]["layers"] == 6

    def test_hash_ignores_output(self):
        a = make_config({"output": "x"})
        b = make_config({"output": "y"})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(make_config({"training": {"lr": 0.5}}))

    def test_too_many_objects(self):
        with pytest.raises(ConfigError):
            make_config({"scene": {"objects": 20}})

    def test_defaults_not_mutated(self):
        make_config({"scene": {"objects": 1}})
        assert DEFAULTS["scene"]["objects"] == 3


class TestTrain:
    def test_zero_steps(self, tmp_path):
        cfg = small_config(steps=0)
        res = train(cfg, tmp_path)
        header, rows = read_csv(tmp_path / "metrics.csv")
        assert header == CSV_HEADER and rows == []
        _, state = load_checkpoint(tmp_path / "checkpoint.npz")
        init = Detector(cfg, make_batch(cfg).scene.rig).store.state_dict()
        for k in init:
            assert_array_equal(state[k], init[k])

    @pytest.mark.parametrize("mode", ["petr", "bevformer"])
    def test_deterministic(self, tmp_path, mode):
        cfg = small_config(mode)
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_rows_complete(self, tmp_path):
        train(small_config("petr"), tmp_path)
        _, rows = read_csv(tmp_path / "metrics.csv")
        assert len(rows) == 3
        for r in rows:
            vals = [float(x) for x in r.split(",")]
            assert len(vals) == 4 and np.isfinite(vals).all()

    def test_nonfinite_loss_dumps(self, tmp_path):
        cfg = small_config("petr", steps=5, lr=1e200)
        with pytest.raises(TrainingError):
            train(cfg, tmp_path)
        dumps = list(tmp_path.glob("nonfinite_step*.json"))
        assert len(dumps) == 1
        doc = json.loads(dumps[0].read_text())
        assert doc["config_hash"] == config_hash(cfg)


class TestViz:
    def test_upsample_loop_oracle(self, rng):
        a = rng.normal(size=(3, 5))
        H, W = 12, 20
        got = upsample(a, H, W)
        h, w = a.shape
        for y in range(H):
            for x in range(W):
                sy = min(max((y + 0.5) * h / H - 0.5, 0), h - 1)
                sx = min(max((x + 0.5) * w / W - 0.5, 0), w - 1)
                y0, x0 = int(sy), int(sx)
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                want = ((1 - fy) * (1 - fx) * a[y0, x0] + (1 - fy) * fx * a[y0, x1]
                        + fy * (1 - fx) * a[y1, x0] + fy * fx * a[y1, x1])
                assert got[y, x] == pytest.approx(want, abs=1e-12)

    def test_minmax(self):
        assert_array_equal(minmax(np.full((2, 2), 3.0)), 0.0)
        assert_allclose(minmax(np.array([1.0, 2.0, 5.0])), [0, 0.25, 1])

    @pytest.mark.parametrize("mode", ["petr", "bevformer"])
    def test_heatmap_contract(self, mode):
        cfg = small_config(mode)
        batch = make_batch(cfg)
        heat = cluster_heatmaps(Detector(cfg, batch.scene.rig), batch.images)
        assert heat.shape == batch.images.shape[:3]
        assert heat.min() >= 0 and heat.max() <= 1

    def test_constant_features_constant_heatmap(self):
        cfg = small_config("bevformer")
        batch = make_batch(cfg)
        det = Detector(cfg, batch.scene.rig)
        heat = cluster_heatmaps(det, np.zeros_like(batch.images))
        assert_array_equal(heat, 0.0)

    def test_deform_untrained_points_at_references(self):
        cfg = small_config("bevformer")
        batch = make_batch(cfg)
        det = Detector(cfg, batch.scene.rig)
        cell = int(np.argmax(det.table.visible.any(axis=(1, 3)).sum(axis=1)))
        layers = deform_points(det, batch.images, cell)
        assert len(layers) == cfg["model"]["lift"]["layers"]
        W = batch.images.shape[2]
        for pts in layers:
            assert pts
            assert sum(p.weight for p in pts) == pytest.approx(1.0, abs=1e-9)
            for p in pts:
                w = det.table.levels[p.level][1]
                assert p.u == pytest.approx(det.table.u[cell, p.pillar, p.view, p.level] * W / w, abs=1e-12)


class TestBench:
    def test_layout(self):
        for n in (1024, 2048, 4096, 8192, 12):
            h, w = token_layout(n)
            assert h * w == n and h <= w

    def test_small_run(self, tmp_path):
        timings = run_bench({"sizes": [64, 128], "clusters": 4, "channels": 8, "heads": 1, "reps": 5, "seed": 0})
        assert len(timings) == 4 and all(t.median_ms > 0 for t in timings)
        assert set(doubling_ratios(timings, "paca")) == {(64, 128)}
        write_bench_csv(tmp_path / "b.csv", timings, "h")
        header, rows = read_csv(tmp_path / "b.csv")
        assert header == BENCH_HEADER and len(rows) == 4


class TestGradcheckRegistry:
    def test_empty_registry(self):
        with pytest.raises(ValueError):
            verify.run_gradchecks({})

    def test_corrupted_plant_detected(self):
        res = verify.run_gradchecks(names={"layer_norm"}, corrupt={"layer_norm"})
        assert not res[0].passed and res[0].max_rel_error == pytest.approx(0.5, abs=1e-4)

    def test_registry_covers_components(self):
        names = set(verify.REGISTRY)
        for required in ("clusters_linear", "clusters_mlp", "clusters_conv", "paca_attend", "petr_lift",
                         "deformable_sample", "bev_encoder", "decoder", "predict", "match_and_loss",
                         "mvacon_contextualize", "toy_backbone", "end_to_end_petr", "end_to_end_bevformer"):
            assert required in names


def _write_small_config(tmp_path, mode):
    cfg = small_config(mode)
    cfg.pop("output")
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps(cfg))
    return path


class TestCli:
    def test_scene_gen(self, tmp_path):
        out = tmp_path / "scene"
        assert main(["scene-gen", "--config", str(_write_small_config(tmp_path, "petr")), "--out", str(out)]) == 0
        h = config_hash(load_config(out / "config.json"))
        img, comments = read_pnm(out / "frame1_view1.ppm")
        assert img.shape == (32, 32, 3) and comments[0].startswith(f"config_hash={h}")
        assert json.loads((out / "objects.json").read_text())["config_hash"] == h
        assert json.loads((out / "rig.json").read_text())["config_hash"] == h

    def test_seed_flag_changes_scene(self, tmp_path):
        cfg = str(_write_small_config(tmp_path, "petr"))
        main(["scene-gen", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["scene-gen", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
        a = json.loads((tmp_path / "a" / "objects.json").read_text())["objects"]
        b = json.loads((tmp_path / "b" / "objects.json").read_text())["objects"]
        assert a != b

    def test_train_and_visualize(self, tmp_path, capsys):
        cfg = str(_write_small_config(tmp_path, "bevformer"))
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(run)]) == 0
        assert (run / "training.png").exists()
        ckpt = str(run / "checkpoint.npz")
        assert main(["viz-clusters", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "vc")]) == 0
        heat, comments = read_pnm(tmp_path / "vc" / "clusters_view0.pgm")
        assert heat.shape == (32, 32) and comments[0].startswith("config_hash=")
        assert (tmp_path / "vc" / "clusters.png").exists()
        assert main(["viz-deform", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "vd")]) == 0
        files = sorted((tmp_path / "vd").glob("deform_layer*.csv"))
        assert len(files) == 2
        for f in files:
            header, rows = read_csv(f)
            assert header == "view,level,pillar,point,u,v,weight"
            assert sum(float(r.split(",")[-1]) for r in rows) == pytest.approx(1.0, abs=1e-8)

    def test_viz_deform_needs_bevformer(self, tmp_path):
        cfg = str(_write_small_config(tmp_path, "petr"))
        assert main(["viz-deform", "--config", cfg, "--out", str(tmp_path / "vd")]) == 2

    def test_gradcheck_exit_codes(self, tmp_path):
        out = str(tmp_path / "gc")
        assert main(["gradcheck", "--out", out, "--only", "matmul,softmax_axis"]) == 0
        assert main(["gradcheck", "--out", out, "--only", "matmul", "--corrupt", "matmul"]) == 1
        assert main(["gradcheck", "--out", out, "--only", "nonexistent"]) == 2

    def test_bench_command(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({"bench": {"sizes": [64, 128, 256, 512], "clusters": 4, "channels": 8}}))
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        header, rows = read_csv(tmp_path / "b" / "bench.csv")
        assert len(rows) == 8
        assert (tmp_path / "b" / "bench.png").exists()

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {"lift": {"mode": "lss"}}}))
        assert main(["scene-gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
