import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from voxelview import cli
from voxelview.cli import ExperimentConfig, main, read_manifest
from voxelview.errors import ConfigError
from voxelview.estimator import TrainedEstimator, image_features
from voxelview.geometry import euler_to_vector, viewpoint_error
from voxelview.renderer import read_pgm, read_ppm
from voxelview.volume import read_volume


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def car16(tmp_path_factory):
    path = tmp_path_factory.mktemp("vol") / "car16.vxv"
    assert run("gen-object", "--kind", "car", "--res", 16, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def small_set(tmp_path_factory, car16):
    out = tmp_path_factory.mktemp("data") / "set"
    assert run("render-dataset", "--volume", car16, "--n", 12, "--seed", 3, "--out-dir", out) == 0
    return out


def write_manifest(path, views):
    items = [{"azimuth_deg": a, "elevation_deg": e} for a, e in views]
    path.write_text(json.dumps({"items": items}))
    return path


class TestGenObject:
    def test_valid_and_readable(self, tmp_path):
        out = tmp_path / "cube.vxv"
        assert run("gen-object", "--kind", "cube", "--res", 16, "--out", out) == 0
        vol = read_volume(out)
        assert vol.resolution == 16
        assert vol.occupancy.max() > 0

    def test_bad_resolution_writes_nothing(self, tmp_path):
        out = tmp_path / "x.vxv"
        assert run("gen-object", "--kind", "cube", "--res", 4, "--out", out) == 2
        assert not out.exists()

    def test_unknown_kind_is_usage_error(self, tmp_path, capsys):
        assert run("gen-object", "--kind", "teapot", "--res", 16, "--out", tmp_path / "x") == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.vxv", tmp_path / "b.vxv"
        for p in (a, b):
            assert run("gen-object", "--kind", "chair", "--res", 16, "--out", p) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unwritable_output_is_io_error(self, tmp_path):
        assert run("gen-object", "--kind", "cube", "--res", 16, "--out", tmp_path / "no" / "dir" / "x.vxv") == 3


class TestRenderDataset:
    def test_counts_and_schema(self, tmp_path, car16):
        out = tmp_path / "d"
        assert run("render-dataset", "--volume", car16, "--n", 100, "--seed", 1, "--out-dir", out) == 0
        doc = json.loads((out / "manifest.json").read_text())
        assert set(doc) == {"volume", "camera_distance", "items"}
        assert doc["camera_distance"] == 2.5
        assert len(doc["items"]) == 100
        assert len(list(out.glob("*.ppm"))) == 100
        for item in doc["items"]:
            assert {"image", "azimuth_deg", "elevation_deg"} <= set(item)
            assert -20.0 <= item["elevation_deg"] <= 40.0
            assert 0.0 <= item["azimuth_deg"] < 360.0
        ds = read_manifest(out / "manifest.json")
        assert read_volume(ds.volume_path).resolution == 16
        img = read_ppm(ds.image_paths[0], read_pgm(ds.alpha_paths[0]))
        assert img.shape == (16, 16)

    def test_images_match_manifest_viewpoints(self, small_set, car16):
        from voxelview import renderer

        ds = read_manifest(small_set / "manifest.json")
        vol = read_volume(car16)
        for path, v in zip(ds.image_paths[:3], ds.viewpoints[:3]):
            ref = renderer.render_view(vol, v, renderer.CameraModel())
            got = read_ppm(path)
            assert np.max(np.abs(got.rgb - ref.rgb)) <= 0.5 / 255 + 1e-12

    def test_same_seed_identical(self, tmp_path, car16):
        for d in ("a", "b"):
            assert run("render-dataset", "--volume", car16, "--n", 5, "--seed", 9, "--out-dir", tmp_path / d) == 0
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_thread_count_does_not_change_output(self, tmp_path, car16, monkeypatch):
        for d, threads in (("one", "1"), ("four", "4")):
            monkeypatch.setenv("VOXELVIEW_THREADS", threads)
            assert run("render-dataset", "--volume", car16, "--n", 8, "--seed", 2, "--out-dir", tmp_path / d) == 0
        assert files(tmp_path / "one") == files(tmp_path / "four")

    def test_bad_n_writes_nothing(self, tmp_path, car16):
        out = tmp_path / "d"
        assert run("render-dataset", "--volume", car16, "--n", 0, "--out-dir", out) == 2
        assert not out.exists()

    def test_missing_volume_is_io_error(self, tmp_path):
        out = tmp_path / "d"
        assert run("render-dataset", "--volume", tmp_path / "none.vxv", "--n", 2, "--out-dir", out) == 3
        assert not out.exists()

    def test_bad_thread_env_is_usage_error(self, tmp_path, car16, monkeypatch):
        monkeypatch.setenv("VOXELVIEW_THREADS", "lots")
        out = tmp_path / "d"
        assert run("render-dataset", "--volume", car16, "--n", 2, "--out-dir", out) == 2
        assert not out.exists()

    def test_azimuth_histogram_uniform(self, tmp_path, car16):
        out = tmp_path / "big"
        assert run("render-dataset", "--volume", car16, "--n", 10000, "--seed", 5, "--out-dir", out) == 0
        items = json.loads((out / "manifest.json").read_text())["items"]
        az = np.array([it["azimuth_deg"] for it in items])
        counts = np.bincount((az // 30).astype(int), minlength=12)
        assert counts.size == 12
        assert np.all(np.abs(counts / 10000 - 1 / 12) <= 0.01)
        # chi-square against uniform, 11 dof, 0.1% critical value 31.26
        chi2 = float(np.sum((counts - 10000 / 12) ** 2 / (10000 / 12)))
        assert chi2 < 31.26
        # uniform in sin(elevation) over the band
        s = np.sin(np.radians([it["elevation_deg"] for it in items]))
        lo, hi = math.sin(math.radians(-20)), math.sin(math.radians(40))
        hist = np.histogram(s, bins=6, range=(lo, hi))[0]
        assert np.all(np.abs(hist / 10000 - 1 / 6) <= 0.015)


class TestRecover:
    def test_recovers_generated_set(self, tmp_path, car16, small_set):
        report = tmp_path / "rec.json"
        assert run("recover", "--dataset", small_set / "manifest.json", "--starts", 8, "--report", report) == 0
        doc = json.loads(report.read_text())
        assert doc["n_samples"] == 12
        assert doc["alignment"] == {"kind": "rotation", "rotation": np.eye(3).tolist()}
        assert doc["accuracy_at_30"] >= 0.9
        rows = list(csv.reader((tmp_path / "rec.scatter.csv").open()))
        assert rows[0] == ["gt_azimuth_deg", "pred_azimuth_deg", "head"]
        assert len(rows) == 13

    def test_deterministic(self, tmp_path, car16, small_set):
        outs = []
        for name in ("a.json", "b.json"):
            assert run("recover", "--volume", car16, "--dataset", small_set / "manifest.json", "--starts", 2,
                       "--report", tmp_path / name) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        assert (tmp_path / "a.scatter.csv").read_bytes() == (tmp_path / "b.scatter.csv").read_bytes()

    def test_missing_manifest(self, tmp_path):
        report = tmp_path / "r.json"
        assert run("recover", "--dataset", tmp_path / "nope.json", "--report", report) == 3
        assert not report.exists()

    def test_malformed_manifest(self, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text('{"items": [{"azimuth_deg": "north", "elevation_deg": 0}]}')
        assert run("recover", "--dataset", bad, "--report", tmp_path / "r.json") == 3

    def test_resolution_mismatch(self, tmp_path, small_set):
        big = tmp_path / "car32.vxv"
        assert run("gen-object", "--kind", "car", "--res", 32, "--out", big) == 0
        report = tmp_path / "r.json"
        assert run("recover", "--volume", big, "--dataset", small_set / "manifest.json", "--report", report) == 2
        assert not report.exists()

    def test_bad_starts(self, tmp_path, small_set):
        assert run("recover", "--dataset", small_set / "manifest.json", "--starts", 0, "--report", tmp_path / "r") == 2


TINY = {"seed": 4, "n_images": 12, "epochs": 2, "heads": 2}


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert run("train", "--config", cfg, "--out", d / "model.json") == 0
    return d / "model.json"


class TestTrain:
    def test_outputs(self, tiny_model):
        est = TrainedEstimator.from_json(tiny_model.read_text())
        assert est.n_heads == 2
        assert est.config.seed == 4
        rows = list(csv.reader(tiny_model.with_name("model.loss.csv").open()))
        assert rows[0] == ["epoch", "mean_recon_loss"]
        assert [r[0] for r in rows[1:]] == ["0", "1"]
        assert [float(r[1]) for r in rows[1:]] == list(est.history)

    def test_byte_identical(self, tmp_path, tiny_model):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(TINY))
        assert run("train", "--config", cfg, "--out", tmp_path / "m.json", "--loss-csv", tmp_path / "l.csv") == 0
        assert (tmp_path / "m.json").read_bytes() == tiny_model.read_bytes()
        assert (tmp_path / "l.csv").read_bytes() == tiny_model.with_name("model.loss.csv").read_bytes()

    @pytest.mark.parametrize(
        "text",
        [
            '{"heads": 0}',
            '{"epochs": -1}',
            '{"resolution": 4}',
            '{"target_mode": "depth"}',
            '{"object_kind": "teapot"}',
            '{"elev_min_deg": 50, "elev_max_deg": 40}',
            '{"colour": 1}',
            "[1, 2]",
            "{not json",
        ],
    )
    def test_bad_config_writes_nothing(self, tmp_path, text):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(text)
        out = tmp_path / "m.json"
        assert run("train", "--config", cfg, "--out", out) == 2
        assert not out.exists()
        assert not (tmp_path / "m.loss.csv").exists()

    def test_missing_config(self, tmp_path):
        assert run("train", "--config", tmp_path / "none.json", "--out", tmp_path / "m.json") == 3


class TestExperimentConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(seed=7, heads=1, target_mode="silhouette", camera_distance=3.0)
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_orthographic_round_trip(self):
        cfg = ExperimentConfig(camera_distance=math.inf)
        text = cfg.to_json()
        assert '"inf"' in text
        assert ExperimentConfig.from_json(text) == cfg
        assert cfg.camera().orthographic

    @pytest.mark.parametrize(
        "kw",
        [{"seed": -1}, {"seed": 2**64}, {"camera_distance": 1.0}, {"n_images": 0}, {"learning_rate": 0.0},
         {"cycle_weight": -1.0}, {"resolution": 129}],
    )
    def test_ranges(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)


class TestEvaluate:
    def test_align_none_equals_raw_errors(self, tmp_path, tiny_model, small_set):
        report = tmp_path / "r.json"
        manifest = small_set / "manifest.json"
        assert run("evaluate", "--model", tiny_model, "--dataset", manifest, "--align", "none",
                   "--calibration", 4, "--report", report) == 0
        doc = json.loads(report.read_text())
        ds = read_manifest(manifest)
        est = TrainedEstimator.from_json(tiny_model.read_text())
        errs = []
        for img, g in zip(ds.load_images()[4:], ds.viewpoints[4:]):
            p, _ = est.predict_features(image_features(img))
            errs.append(math.degrees(viewpoint_error(p, g)))
        errs.sort()
        assert doc["n_samples"] == 8
        assert doc["calibration_size"] == 4
        assert doc["median_error_deg"] == pytest.approx(errs[(len(errs) - 1) // 2], abs=1e-9)
        assert doc["accuracy_at_30"] == pytest.approx(np.mean(np.array(errs) <= 30.0))

    @pytest.mark.parametrize("align", ["procrustes", "linear", "none"])
    def test_idempotent(self, tmp_path, tiny_model, small_set, align):
        outs = []
        for name in ("a.json", "b.json"):
            assert run("evaluate", "--model", tiny_model, "--dataset", small_set / "manifest.json",
                       "--align", align, "--report", tmp_path / name) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        kind = json.loads(outs[0])["alignment"]["kind"]
        assert kind == {"procrustes": "rotation", "none": "rotation"}.get(align, align)
        rows = list(csv.reader((tmp_path / "a.scatter.csv").open()))
        assert len(rows) == 1 + 4

    def test_bad_model(self, tmp_path, small_set):
        model = tmp_path / "m.json"
        model.write_text('{"format": "something else"}')
        report = tmp_path / "r.json"
        assert run("evaluate", "--model", model, "--dataset", small_set / "manifest.json", "--report", report) == 2
        assert not report.exists()

    def test_missing_image(self, tmp_path, tiny_model, small_set):
        doc = json.loads((small_set / "manifest.json").read_text())
        doc["volume"] = None
        doc["items"][0]["image"] = "missing.ppm"
        m = small_set / "broken.json"
        m.write_text(json.dumps(doc))
        try:
            assert run("evaluate", "--model", tiny_model, "--dataset", m, "--report", tmp_path / "r.json") == 3
        finally:
            m.unlink()
        assert not (tmp_path / "r.json").exists()


class TestBiasReport:
    def test_concentrated(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 400
        inside = rng.random(n) < 0.9
        az = np.where(inside, rng.uniform(0, 30, n), rng.uniform(30, 360, n))
        m = write_manifest(tmp_path / "m.json", zip(az.tolist(), [0.0] * n))
        report = tmp_path / "r.json"
        assert run("bias-report", "--gts", m, "--calibration", 40, "--report", report) == 0
        doc = json.loads(report.read_text())
        assert doc["accuracy_at_30"] >= 0.8
        assert doc["dva"] <= 0.6
        assert "confidence_index" in doc
        assert doc["n_samples"] == n - 40

    def test_uniform(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 600
        m = write_manifest(tmp_path / "m.json", zip(rng.uniform(0, 360, n).tolist(), [10.0] * n))
        report = tmp_path / "r.json"
        assert run("bias-report", "--gts", m, "--calibration", 50, "--report", report) == 0
        assert json.loads(report.read_text())["accuracy_at_30"] <= 0.25

    def test_single_sample(self, tmp_path):
        m = write_manifest(tmp_path / "m.json", [(45.0, 10.0)])
        report = tmp_path / "r.json"
        assert run("bias-report", "--gts", m, "--report", report) == 0
        doc = json.loads(report.read_text())
        assert doc["n_samples"] == 1
        assert doc["accuracy_at_30"] == 1.0

    def test_degenerate_mean_is_a_field(self, tmp_path):
        m = write_manifest(tmp_path / "m.json", [(0.0, 0.0), (180.0, 0.0), (90.0, 0.0)])
        report = tmp_path / "r.json"
        assert run("bias-report", "--gts", m, "--calibration", 2, "--report", report) == 0
        doc = json.loads(report.read_text())
        assert doc["error"].startswith("DegenerateMean")
        assert doc["n_samples"] == 1

    def test_deterministic(self, tmp_path):
        m = write_manifest(tmp_path / "m.json", [(a, 5.0) for a in range(0, 360, 7)])
        for name in ("a.json", "b.json"):
            assert run("bias-report", "--gts", m, "--report", tmp_path / name) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_empty_manifest(self, tmp_path):
        m = write_manifest(tmp_path / "m.json", [])
        assert run("bias-report", "--gts", m, "--report", tmp_path / "r.json") == 3
        assert not (tmp_path / "r.json").exists()

    def test_constant_is_calibration_mean(self, tmp_path):
        views = [(10.0, 0.0), (20.0, 0.0), (300.0, 0.0)]
        m = write_manifest(tmp_path / "m.json", views)
        report = tmp_path / "r.json"
        assert run("bias-report", "--gts", m, "--calibration", 2, "--report", report) == 0
        c = json.loads(report.read_text())["constant_viewpoint"]
        assert c["azimuth_deg"] == pytest.approx(15.0)
        assert c["elevation_deg"] == pytest.approx(0.0, abs=1e-9)


class TestGradcheck:
    def test_passes_and_is_deterministic(self, capsys):
        assert run("gradcheck", "--res", 16, "--trials", 3, "--seed", 2) == 0
        first = capsys.readouterr().out
        assert run("gradcheck", "--res", 16, "--trials", 3, "--seed", 2) == 0
        assert capsys.readouterr().out == first
        assert first.startswith("worst relative error")

    def test_zero_trials(self):
        assert run("gradcheck", "--trials", 0) == 2

    def test_failure_exit_code(self, monkeypatch):
        monkeypatch.setattr(cli, "REL_TOL", 0.0)
        assert run("gradcheck", "--res", 16, "--trials", 1) == 1


class TestEntryPoint:
    def test_no_command(self):
        assert run() == 2

    def test_module_invocation(self, tmp_path):
        out = tmp_path / "c.vxv"
        proc = subprocess.run(
            [sys.executable, "-m", "voxelview", "gen-object", "--kind", "cube", "--res", "16", "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert out.exists()
        bad = subprocess.run([sys.executable, "-m", "voxelview", "gen-object"], capture_output=True, text=True)
        assert bad.returncode == 2


def test_manifest_viewpoints_round_trip(small_set):
    doc = json.loads((small_set / "manifest.json").read_text())
    ds = read_manifest(small_set / "manifest.json")
    for item, v in zip(doc["items"], ds.viewpoints):
        ref = euler_to_vector(math.radians(item["azimuth_deg"]), math.radians(item["elevation_deg"]))
        assert np.allclose(v, ref)
