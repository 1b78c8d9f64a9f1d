import json
import subprocess
import sys

import numpy as np
import pytest

from ridgecraft.cli import main
from ridgecraft.geometry import read_point_cloud_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def circle_files(tmp_path):
    fit, mesh = tmp_path / "fit.csv", tmp_path / "mesh.csv"
    assert run("sample", "--manifold", "circle", "--count", 400, "--seed", 1, "--out", fit) == 0
    assert run("sample", "--manifold", "circle", "--count", 60, "--seed", 2, "--noise-sd", 0.05, "--out", mesh) == 0
    return fit, mesh


class TestSample:
    def test_writes_cloud_and_manifest(self, tmp_path):
        out = tmp_path / "c.csv"
        assert run("sample", "--manifold", "circle", "--scale", 0.9, "--count", 1000, "--seed", 7, "--out", out) == 0
        cloud = read_point_cloud_csv(out)
        assert cloud.points.shape == (1000, 2)
        assert np.allclose(np.linalg.norm(cloud.points, axis=1), 0.9)
        manifest = json.loads((tmp_path / "c.csv.manifest.json").read_text())
        assert manifest["command"] == "sample" and manifest["seed"] == 7
        assert manifest["outputs"] == [str(out)]
        assert manifest["config"]["scale"] == 0.9
        assert "version" in manifest and manifest["duration_seconds"] >= 0

    def test_zero_count_is_usage_error(self, tmp_path):
        assert run("sample", "--manifold", "sphere", "--count", 0, "--out", tmp_path / "x.csv") == 64

    def test_noise_keeps_clean_stream(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run("sample", "--manifold", "sphere", "--count", 50, "--seed", 4, "--out", a)
        run("sample", "--manifold", "sphere", "--count", 50, "--seed", 4, "--noise-sd", 0.05, "--out", b)
        diff = read_point_cloud_csv(b).points - read_point_cloud_csv(a).points
        assert 0.02 < diff.std() < 0.08

    def test_unknown_command_and_missing_flag(self, capsys):
        assert run("frobnicate") == 64
        assert run("sample", "--manifold", "circle") == 64
        assert run() == 64


class TestConfigFiles:
    def test_flags_win_over_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"manifold": "sphere", "count": 30, "seed": 5}))
        out = tmp_path / "o.csv"
        assert run("sample", "--config", cfg, "--count", 12, "--out", out) == 0
        assert read_point_cloud_csv(out).points.shape == (12, 3)

    def test_invalid_json_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{\n  "count": 3,\n  oops\n}\n')
        assert run("sample", "--config", cfg, "--manifold", "circle", "--out", tmp_path / "o.csv") == 64
        assert "line 3" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert run("sample", "--config", cfg, "--manifold", "circle", "--count", 3, "--out", tmp_path / "o.csv") == 64


class TestDescend:
    def test_kde(self, tmp_path, circle_files):
        fit, mesh = circle_files
        out = tmp_path / "t.csv"
        assert run("descend", "--asdf", "kde", "--fit", fit, "--mesh", mesh, "--d", 1, "--bandwidth", 0.1, "--out", out) == 0
        rows = out.read_text().splitlines()[1:]
        conv = [r for r in rows if r.split(",")[3] == "1"]
        assert len(conv) >= 0.95 * len(rows)
        assert (tmp_path / "t.csv.manifest.json").exists()

    def test_pca_prints_warnings(self, tmp_path, circle_files, capsys):
        fit, mesh = circle_files
        out = tmp_path / "t.csv"
        code = run(
            "descend", "--asdf", "pca", "--fit", fit, "--mesh", mesh, "--d", 1, "--bandwidth", 0.2,
            "--reach", 1.0, "--volume", 0.01, "--out", out,
        )
        assert code == 0
        assert "warning: packet condition 1 fails" in capsys.readouterr().err

    def test_missing_fit(self, tmp_path, circle_files):
        _, mesh = circle_files
        assert run("descend", "--asdf", "kde", "--mesh", mesh, "--d", 1, "--bandwidth", 0.1, "--out", tmp_path / "t.csv") == 64

    def test_bad_dimension(self, tmp_path, circle_files):
        fit, mesh = circle_files
        assert run("descend", "--asdf", "kde", "--fit", fit, "--mesh", mesh, "--d", 2, "--bandwidth", 0.1, "--out", tmp_path / "t.csv") == 64

    def test_missing_file_is_runtime_error(self, tmp_path, circle_files):
        _, mesh = circle_files
        code = run("descend", "--asdf", "kde", "--fit", tmp_path / "nope.csv", "--mesh", mesh, "--d", 1, "--bandwidth", 0.1, "--out", tmp_path / "t.csv")
        assert code == 1


class TestValidatePacket:
    def test_dense_circle_passes(self, tmp_path, capsys):
        fit = tmp_path / "dense.csv"
        run("sample", "--manifold", "circle", "--count", 5000, "--seed", 0, "--out", fit)
        out = tmp_path / "v.json"
        code = run("validate-packet", "--fit", fit, "--tau-bar", 0.1, "--d", 1, "--reach", 1, "--volume", 6.283185307179586, "--out", out)
        assert code == 0
        assert "2b" in capsys.readouterr().out
        assert json.loads(out.read_text())["passed"] is True

    def test_sparse_cloud_exit_2(self, tmp_path):
        fit = tmp_path / "sparse.csv"
        run("sample", "--manifold", "circle", "--count", 10, "--out", fit)
        assert run("validate-packet", "--fit", fit, "--tau-bar", 0.05, "--d", 1, "--reach", 1, "--volume", 6.28) == 2

    def test_d_too_large(self, tmp_path):
        fit = tmp_path / "c.csv"
        run("sample", "--manifold", "circle", "--count", 100, "--out", fit)
        assert run("validate-packet", "--fit", fit, "--tau-bar", 0.1, "--d", 3, "--reach", 1, "--volume", 6.28) == 64


class TestBenchAndReplay:
    def _bench(self, out_dir, cfg):
        return run("bench", "--config", cfg, "--out-dir", out_dir, "--cells", "circle:kde", "--seed", 4)

    def test_replay_bit_identical(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({"trials": 1, "n_fit": 200, "n_mesh": 30, "n_reference": 500}))
        out = tmp_path / "b"
        assert self._bench(out, cfg) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"}
        assert set(first) == {"report_circle_kde.json", "rms_circle_kde.csv", "table.csv"}
        manifest = json.loads((out / "manifest.json").read_text())
        for p in out.iterdir():
            if p.name != "manifest.json":
                p.unlink()
        assert run("replay", out / "manifest.json") == 0
        again = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"}
        assert again == first
        assert manifest["config"]["overrides"]["trials"] == 1

    def test_unknown_bench_key(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({"trails": 1}))
        assert self._bench(tmp_path / "b", cfg) == 64

    def test_bad_cells(self, tmp_path):
        assert run("bench", "--out-dir", tmp_path, "--cells", "torus:kde") == 64


def test_module_entry_point(tmp_path):
    out = tmp_path / "c.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "ridgecraft", "sample", "--manifold", "curve", "--count", "5", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert read_point_cloud_csv(out).points.shape == (5, 3)


def test_threads_flag(tmp_path, circle_files, monkeypatch):
    fit, mesh = circle_files
    monkeypatch.setenv("RIDGECRAFT_THREADS", "2")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["descend", "--asdf", "kde", "--fit", fit, "--mesh", mesh, "--d", 1, "--bandwidth", 0.1]
    assert run(*args, "--out", a) == 0
    assert run(*args, "--threads", 1, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run(*args, "--threads", 0, "--out", b) == 64
