import json
import math

import numpy as np
import pytest

from ridgecraft.geometry import ManifoldKind, default_spec
from ridgecraft.metrics import (
    AsdfKind,
    ExperimentConfig,
    PRESET_BANDWIDTH,
    RateStudyResult,
    fit_slope,
    preset_config,
    rate_study,
    run_experiment,
    write_report_csv,
    write_report_json,
)

CIRCLE = default_spec("circle")


def small(**kw):
    base = dict(n_fit=300, n_mesh=60, n_reference=2000, trials=2, seed=3)
    base.update(kw)
    return preset_config("circle", "kde", "ci", **base)


@pytest.fixture(scope="module")
def report():
    return run_experiment(small())


class TestConfig:
    def test_presets(self):
        cfg = preset_config("sphere", "pca")
        assert cfg.bandwidth == PRESET_BANDWIDTH[(ManifoldKind.SPHERE, AsdfKind.PCA)]
        assert cfg.trials == 20
        assert preset_config("circle", "kde", "full").trials == 100
        assert (cfg.n_fit, cfg.n_mesh, cfg.noise_sd, cfg.n_reference) == (1000, 1000, 0.05, 10000)

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            preset_config("circle", "kde", "huge")

    @pytest.mark.parametrize("kw", [dict(n_fit=0), dict(trials=0), dict(noise_sd=-0.1), dict(bandwidth=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small(**kw)

    def test_dict_round_trip(self):
        cfg = small(step_size=0.05)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestExperiment:
    def test_mean_invariant(self, report):
        assert report.mean_rms == pytest.approx(np.mean(report.rms_per_trial), abs=1e-12)
        assert len(report.rms_per_trial) == 2
        assert 0 <= report.convergence_fraction <= 1

    def test_hausdorff_dominates_nearest_neighbor(self, report):
        # symmetric Hausdorff is at least the RMS nearest-neighbor distance
        for h, r in zip(report.hausdorff_per_trial, report.rms_reference_per_trial):
            assert h >= r

    def test_scores_reasonable(self, report):
        assert report.convergence_fraction > 0.9
        assert report.mean_rms < 0.01
        assert sum(report.status_counts.values()) == 2 * 60

    def test_deterministic(self, report, tmp_path):
        again = run_experiment(small())
        a = write_report_json(report, tmp_path / "a.json").read_bytes()
        b = write_report_json(again, tmp_path / "b.json").read_bytes()
        assert a == b

    def test_single_point_on_manifold(self):
        cfg = small(trials=1, n_mesh=1, noise_sd=0.0)
        rep = run_experiment(cfg)
        # with no noise the descent only removes the kernel bias
        assert rep.mean_rms <= 0.01
        # covering radius of 2000 uniform points on the circle, with high probability
        assert rep.mean_rms_reference <= math.pi * 2 * math.log(2000) / 2000

    def test_csv(self, report, tmp_path):
        lines = write_report_csv(report, tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("trial,rms,")
        assert float(lines[1].split(",")[1]) == report.rms_per_trial[0]

    def test_pca_cell_runs(self):
        rep = run_experiment(preset_config("circle", "pca", n_fit=1000, n_mesh=50, n_reference=1000, trials=1))
        assert rep.convergence_fraction > 0.3
        assert rep.mean_rms < 0.005


class TestRates:
    def test_slope_exact(self):
        x = [0.2, 0.1, 0.05]
        assert fit_slope(x, [3 * v**1.25 for v in x]) == pytest.approx(1.25)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            rate_study(CIRCLE, "kde", [0.1], small())
        with pytest.raises(ValueError):
            rate_study(CIRCLE, "kde", [0.05, 0.1, 0.2], small())

    def test_sample_scaling_and_csv(self):
        base = small(n_fit=200, n_mesh=30, trials=1, n_reference=500, noise_sd=0.01)
        res = rate_study(CIRCLE, "kde", [0.4, 0.2, 0.1], base)
        assert res.n_fit == (50, 100, 200)
        assert len(res.hausdorff) == 3
        text = res.to_csv()
        assert text.splitlines()[0] == "bandwidth,hausdorff,n_fit"
        assert text.splitlines()[-1] == f"# slope {res.slope!r}"

    def test_pca_scaling_exponent(self):
        res = RateStudyResult((0.2, 0.1, 0.05), (1.0, 0.25, 0.0625), (1, 2, 3), 2.0)
        assert res.slope == 2.0
        assert math.ceil(2000 * (0.05 / 0.2) ** 1.5) == 250
