"""End-to-end command-line interface tests."""

import json

import numpy as np
import pytest

from uampmf.cli import main
from uampmf.nearfield import load_scene


@pytest.fixture
def scene_path(tmp_path):
    rc = main([
        "genscene", "--out-dir", str(tmp_path), "--out", "scene.json",
        "--users", "2", "--symbols", "32", "--snr-db", "15",
        "--d-max", "20", "--seed", "6",
    ])
    assert rc == 0
    return tmp_path / "scene.json"


class TestGenscene:
    def test_writes_loadable_scene(self, scene_path, capsys):
        scene = load_scene(scene_path)
        assert scene.Y.shape == (64, 32)
        assert len(scene.users) == 2
        assert scene.snr_db == 15.0

    def test_seed_flag_controls_scene(self, tmp_path):
        for name, seed in (("a.json", "1"), ("b.json", "1"), ("c.json", "2")):
            main([
                "genscene", "--out-dir", str(tmp_path), "--out", name,
                "--users", "1", "--symbols", "16", "--seed", seed,
            ])
        a = load_scene(tmp_path / "a.json")
        b = load_scene(tmp_path / "b.json")
        c = load_scene(tmp_path / "c.json")
        assert np.array_equal(a.Y, b.Y)
        assert not np.array_equal(a.Y, c.Y)


class TestSpectrum:
    def test_grid_dimensions(self, scene_path, tmp_path):
        rc = main([
            "spectrum", str(scene_path), "--out-dir", str(tmp_path),
            "--out", "spec.csv", "--grid-d", "16", "--grid-theta", "24",
            "--d-max", "20",
        ])
        assert rc == 0
        lines = (tmp_path / "spec.csv").read_text().strip().splitlines()
        assert lines[0].startswith("# uampmf-spectrum-csv")
        assert len(lines) == 2 + 16  # comment, header, one row per distance
        assert len(lines[2].split(",")) == 1 + 24
        vals = np.array([
            [float(v) for v in line.split(",")[1:]] for line in lines[2:]
        ])
        assert np.all(vals >= 0)


class TestJnflsd:
    def test_full_pipeline(self, scene_path, tmp_path, capsys):
        rc = main([
            "jnflsd", str(scene_path), "--out-dir", str(tmp_path),
            "--out", "result.json", "--trace", "trace.csv",
            "--d-max", "20", "--u-max", "6", "--max-iter", "40",
        ])
        assert rc == 0
        payload = json.loads((tmp_path / "result.json").read_text())
        assert payload["format"] == "uampmf-jnflsd-result-v1"
        assert len(payload["locations"]) >= 1
        assert (tmp_path / "trace.csv").exists()
        out = capsys.readouterr().out
        assert "distance NMSE" in out and "BER" in out

    def test_config_file_overrides_flags(self, scene_path, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"u_max": 3, "max_iter": 30}))
        rc = main([
            "jnflsd", str(scene_path), "--out-dir", str(tmp_path),
            "--out", "r.json", "--d-max", "20",
            "--u-max", "9", "--config", str(cfg),
        ])
        assert rc == 0
        payload = json.loads((tmp_path / "r.json").read_text())
        # u_max = 3 from the config file caps the candidate count despite
        # the flag asking for 9.
        assert len(payload["locations"]) <= 3
        assert payload["iterations"] <= 30


class TestCampaign:
    def test_small_sweep(self, tmp_path):
        rc = main([
            "campaign", "--out-dir", str(tmp_path),
            "--snr-db", "10", "--d-max-list", "20", "--users-list", "2",
            "--trials", "2", "--antennas", "32", "--symbols", "32",
            "--u-max", "6", "--max-iter", "30", "--seed", "5",
        ])
        assert rc == 0
        tlines = (tmp_path / "trials.csv").read_text().strip().splitlines()
        assert len(tlines) == 2 + 2
        slines = (tmp_path / "summary.csv").read_text().strip().splitlines()
        assert len(slines) == 2 + 1

    def test_outdir_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UAMPMF_OUTDIR", str(tmp_path / "envout"))
        rc = main([
            "genscene", "--out", "s.json", "--users", "1", "--symbols", "8",
        ])
        assert rc == 0
        assert (tmp_path / "envout" / "s.json").exists()
