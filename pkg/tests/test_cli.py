import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from photonfield.cli import main
from photonfield.config import ExperimentConfig, sub_seed
from photonfield.imaging import write_image
from photonfield.volume import load_raw

SMALL = {
    "seed": 4,
    "output": "out",
    "scene": {"synthetic": {"kind": "slab", "dims": [16, 16, 16]}},
    "trace": {"n_total": 6000},
    "train": {"total_steps": 12, "batch_size": 256, "K": 16, "radii": [0.05, 0.1, 0.15, 0.2],
              "pos_grid": {"levels": 3, "features_per_level": 2, "table_size_log2": 10},
              "dir_grid": {"levels": 2, "features_per_level": 2, "table_size_log2": 8},
              "hidden_layers": 2, "width": 16},
    "render": {"spp": 2, "K": 16, "camera": {"width": 8, "height": 8}},
}


def write_config(tmp_path, data=SMALL):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def report(tmp_path, cmd):
    return json.loads((tmp_path / "out" / f"{cmd}.json").read_text())


def test_synth_slab(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--dims", "64", "64", "64"]) == 0
    grid = load_raw(tmp_path / "out" / "volume.raw")
    z = (np.arange(64) + 0.5) / 64
    inside = (z >= 0.3) & (z <= 0.7)
    assert np.array_equal(grid.array[inside], np.ones((inside.sum(), 64, 64)))
    assert np.array_equal(grid.array[~inside], np.zeros(((~inside).sum(), 64, 64)))


def test_synth_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    args = ["synth", "--config", str(cfg), "--kind", "vortices", "--dims", "16", "16", "16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "volume.raw").read_bytes() == (tmp_path / "b" / "volume.raw").read_bytes()


def test_synth_sphere_volume_fraction(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--kind", "sphere", "--dims", "64", "64", "64"]) == 0
    frac = report(tmp_path, "synth")["metrics"]["occupied_fraction"]
    expected = 4 / 3 * math.pi * 0.25 ** 3
    assert abs(frac - expected) / expected < 0.05


def test_trace_stratifies_phases(tmp_path):
    data = {**SMALL, "trace": {"n_total": 300}}
    assert main(["trace", "--config", str(write_config(tmp_path, data))]) == 0
    assert report(tmp_path, "trace")["metrics"]["emitted_per_phase"] == [100, 100, 100]


def test_compare_identical(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3))
    write_image(img, tmp_path / "a.ppm")
    cfg = write_config(tmp_path)
    assert main(["compare", str(tmp_path / "a.ppm"), str(tmp_path / "a.ppm"), "--config", str(cfg)]) == 0
    m = report(tmp_path, "compare")["metrics"]
    assert m["mse"] == 0.0 and m["ssim"] == pytest.approx(1.0, abs=1e-12)


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig.load(write_config(tmp_path))
    cfg.save(tmp_path / "again.yaml")
    back = ExperimentConfig.load(tmp_path / "again.yaml")
    assert back == cfg
    assert back.to_dict() == cfg.to_dict()


def test_defaults_fill_missing_keys(tmp_path):
    cfg = ExperimentConfig.load(write_config(tmp_path, {}))
    assert cfg.train.total_steps == 3000 and cfg.trace.phase_set == (-0.75, 0.0, 0.75)


def test_sub_seeds_differ():
    assert len({sub_seed(1, n) for n in ("trace", "train", "render")}) == 3
    assert sub_seed(1, "trace") == sub_seed(1, "trace")


@pytest.mark.parametrize("data,needle", [
    ({"bogus": 1}, "unknown key"),
    ({"scene": {"volume": "nope.raw"}}, "not found"),
    ({"scene": {"lights": []}}, "at least one light"),
    ({"trace": {"phase_set": []}}, "phase set"),
    ({"render": {"backends": ["magic"]}}, "unknown backend"),
    ({"train": {"radii": [0.2, 0.1, 0.3, 0.4]}}, "increasing"),
])
def test_invalid_config_single_line_error(tmp_path, capsys, data, needle):
    assert main(["trace", "--config", str(write_config(tmp_path, data))]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("photonfield: error:") and needle in err
    assert "\n" not in err


def test_missing_upstream_artifact(tmp_path, capsys):
    assert main(["train", "--config", str(write_config(tmp_path))]) == 2
    assert "run 'photonfield trace' first" in capsys.readouterr().err


def test_pipeline_is_reproducible(tmp_path):
    cfg = str(write_config(tmp_path))
    digests = []
    for run in ("r1", "r2"):
        out = str(tmp_path / run)
        for cmd in ("trace", "train", "render"):
            assert main([cmd, "--config", cfg, "--out", out]) == 0
        digests.append(json.loads((tmp_path / run / "render.json").read_text())["metrics"])
        assert (tmp_path / run / "train_log.csv").exists()
    assert digests[0] == digests[1]
    for name in ("photons.pfm", "field.ckpt", "render_neural.f32", "render_photon_map.f32"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    m = digests[0]
    assert -1 <= m["ssim_neural_vs_photon_map"] <= 1


def test_bench_reports_timings(tmp_path, capsys):
    data = {**SMALL, "render": {**SMALL["render"], "max_bounces": 2, "step_size": 0.05}}
    assert main(["bench", "--config", str(write_config(tmp_path, data))]) == 0
    t = report(tmp_path, "bench")["timing"]
    assert {"trace", "train", "render"} <= set(t)
    assert set(t["render"]) == {"neural", "photon_map", "path", "ray_march"}
    assert {"knn_time", "step_time"} <= set(t["train"])
    assert "render neural" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    res = subprocess.run([sys.executable, "-m", "photonfield", "synth", "--config", str(cfg)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "photonfield", "train", "--config", str(tmp_path / "none.yaml")],
                         capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.count("\n") == 1
