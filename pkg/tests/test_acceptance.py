"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (a summary line per criterion
is printed at the end) or directly with ``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ridgecraft.cli import main as cli_main
from ridgecraft.geometry import (
    PointCloud,
    build_net,
    default_spec,
    estimate_reach,
    fibonacci_sphere,
    sample_manifold,
    tangent_basis,
)
from ridgecraft.kde_asdf import KdeAsdf
from ridgecraft.metrics import fit_slope, preset_config, rate_study, run_experiment
from ridgecraft.pca_asdf import (
    CylinderPacket,
    build_packet,
    bump_theta,
    estimate_tangent,
    fobar_eval,
    ideal_packet,
    principal_sines,
    tangent_error_bound,
    validate_packet,
)
from ridgecraft.ridge import DescentConfig, DescentStatus, NormalQuadratic, run_descent

pytestmark = pytest.mark.slow

CIRCLE = default_spec("circle")
SPHERE = default_spec("sphere")


def test_criterion_01_circle_kde(record):
    t0 = time.perf_counter()
    rep = run_experiment(preset_config("circle", "kde", "ci"))
    elapsed = time.perf_counter() - t0
    ok = 1e-4 <= rep.mean_rms <= 2.2e-3 and elapsed < 120
    record(
        1,
        ok,
        f"circle/KDE sigma={rep.config.bandwidth} mean RMS {rep.mean_rms:.3e} in [1e-4, 2.2e-3], "
        f"converged {rep.convergence_fraction:.3f}, {elapsed:.0f}s (< 120s)",
    )
    assert ok


TABLE_BANDS = {
    ("circle", "pca"): (3e-5, 7.3e-4),
    ("sphere", "kde"): (5e-4, 1.1e-2),
    ("sphere", "pca"): (1.2e-4, 3e-3),
}


def test_criterion_02_table_cells(record):
    parts, ok = [], True
    for (m, a), (lo, hi) in TABLE_BANDS.items():
        rep = run_experiment(preset_config(m, a, "ci"))
        cell_ok = lo <= rep.mean_rms <= hi
        ok &= cell_ok
        parts.append(f"{m}/{a} {rep.mean_rms:.3e} {'in' if cell_ok else 'NOT in'} [{lo:g}, {hi:g}]")
    for a in ("kde", "pca"):
        rep = run_experiment(preset_config("curve", a, "ci"))
        cell_ok = rep.mean_rms <= 1e-2 and rep.convergence_fraction >= 0.9
        ok &= cell_ok
        parts.append(f"curve/{a} {rep.mean_rms:.3e} conv {rep.convergence_fraction:.3f} {'ok' if cell_ok else 'FAIL'}")
    record(2, ok, "; ".join(parts))
    assert ok


def test_criterion_03_kde_rate(record):
    t0 = time.perf_counter()
    base = preset_config("circle", "kde", "ci", n_fit=1000, n_mesh=500, noise_sd=0.01, trials=3)
    res = rate_study(CIRCLE, "kde", [0.2, 0.1, 0.05], base)
    elapsed = time.perf_counter() - t0
    ok = res.slope >= 1.0 and elapsed < 300
    errs = ", ".join(f"{h:.2e}" for h in res.hausdorff)
    record(3, ok, f"KDE circle slope {res.slope:.2f} (>= 1.0), hausdorff [{errs}], {elapsed:.0f}s (< 300s)")
    assert ok


def test_criterion_04_pca_rate(record):
    base = preset_config("circle", "pca", "ci", n_fit=2000, n_mesh=500, noise_sd=0.01, trials=3)
    res = rate_study(CIRCLE, "pca", [0.2, 0.1, 0.05], base)
    errs = ", ".join(f"{h:.2e}" for h in res.hausdorff)
    ok = res.slope >= 1.5
    record(4, ok, f"PCA circle slope {res.slope:.2f} (>= 1.5), hausdorff [{errs}], n_fit {list(res.n_fit)}")
    assert ok


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def _kde_worst(spec, seed):
    asdf = KdeAsdf(sample_manifold(spec, 500, seed), 0.1, spec.intrinsic_dim)
    rng = np.random.default_rng(seed)
    n = spec.ambient_dim
    idx = rng.integers(0, len(asdf.samples), 100)
    off = rng.normal(size=(100, n))
    off *= (rng.uniform(0, 2 * asdf.sigma, 100) / np.linalg.norm(off, axis=1))[:, None]
    h = 1e-6
    wg = wh = 0.0
    for x in asdf.samples.points[idx] + off:
        xh = asdf.to_internal(x)
        ev = asdf.evaluate(xh)
        E = np.eye(n) * h
        g = np.array([(asdf.evaluate(xh + e).value - asdf.evaluate(xh - e).value) / (2 * h) for e in E])
        H = np.column_stack([(asdf.evaluate(xh + e).gradient - asdf.evaluate(xh - e).gradient) / (2 * h) for e in E])
        wg, wh = max(wg, _rel(ev.gradient, g)), max(wh, _rel(ev.hessian, H))
    return wg, wh


def _fobar_worst(spec, seed):
    tb = 0.2
    packet = build_packet(sample_manifold(spec, 3000 if spec.intrinsic_dim == 1 else 20000, seed), tb, spec.intrinsic_dim)
    rng = np.random.default_rng(seed)
    n = spec.ambient_dim
    h = 1e-6
    worst, checked = 0.0, 0
    while checked < 100:
        z = sample_manifold(spec, 1, int(rng.integers(1 << 30))).points[0] + rng.normal(0, tb / 4, n)
        idx = packet.containing(z)
        if idx.size == 0:
            continue
        t = np.einsum("kn,knd->kd", z - packet.centers[idx], packet.bases[idx])
        if bump_theta(t / (2 * tb))[0].sum() < 0.1:
            continue
        if any(not np.array_equal(packet.containing(z + s * h * e), idx) for e in np.eye(n) for s in (1, -1)):
            continue
        ev = fobar_eval(packet, z)
        g = np.array([(fobar_eval(packet, z + h * e).value - fobar_eval(packet, z - h * e).value) / (2 * h) for e in np.eye(n)])
        worst = max(worst, _rel(ev.gradient, g))
        checked += 1
    return worst


def test_criterion_05_derivatives(record):
    kg, kh = zip(*(_kde_worst(s, 11) for s in (CIRCLE, SPHERE)))
    fg = [_fobar_worst(s, 12) for s in (CIRCLE, SPHERE)]
    ok = max(kg) < 1e-5 and max(kh) < 1e-4 and max(fg) < 1e-4
    record(
        5,
        ok,
        f"KDE grad {max(kg):.1e} (< 1e-5), KDE Hessian {max(kh):.1e} (< 1e-4), F grad {max(fg):.1e} (< 1e-4)",
    )
    assert ok


def test_criterion_06_tangent_bound(record):
    ok, parts = True, []
    for spec in (CIRCLE, SPHERE):
        d = spec.intrinsic_dim
        cloud = sample_manifold(spec, 20000 if d == 1 else 100000, 2)
        centers = sample_manifold(spec, 50, 3).points
        T = tangent_basis(spec, centers)
        worst_ratio = 0.0
        for tb in (0.05, 0.1, 0.2):
            bound = tangent_error_bound(tb, spec.reach, d)
            sines = [principal_sines(estimate_tangent(cloud, c, tb, d).basis, t)[0] for c, t in zip(centers, T)]
            worst_ratio = max(worst_ratio, max(sines) / bound)
        # fixed neighbor count isolates the bandwidth dependence
        taus = [0.05, 0.1, 0.2, 0.4]
        many = sample_manifold(spec, 200, 1).points
        Tm = tangent_basis(spec, many)
        errs = []
        for tb in taus:
            n = math.ceil(300 * math.pi / (math.sqrt(2) * tb)) if d == 1 else math.ceil(600 / tb**2)
            c2 = sample_manifold(spec, n, 0)
            errs.append(np.mean([principal_sines(estimate_tangent(c2, c, tb, d).basis, t)[0] for c, t in zip(many, Tm)]))
        slope = fit_slope(taus, errs)
        ok &= worst_ratio <= 1.0 and slope >= 0.8
        parts.append(f"{spec.kind.value}: max sin/bound {worst_ratio:.3f} (<= 1), slope {slope:.2f} (>= 0.8)")
    record(6, ok, "; ".join(parts))
    assert ok


def _fibonacci_cloud(count):
    pts = np.array(fibonacci_sphere(count).points)
    np.random.default_rng(0).shuffle(pts)
    return PointCloud(pts)


def test_criterion_07_packet_validation(record):
    parts, ok = [], True
    cases = [
        (CIRCLE, 0.1, sample_manifold(CIRCLE, 5000, 0)),
        (CIRCLE, 0.05, sample_manifold(CIRCLE, 10000, 0)),
        (SPHERE, 0.1, _fibonacci_cloud(100_000)),
        (SPHERE, 0.05, _fibonacci_cloud(400_000)),
    ]
    circle_packet = None
    for spec, tb, cloud in cases:
        packet = ideal_packet(spec, cloud, tb)
        rep = validate_packet(packet, spec.reach, spec.volume)
        ok &= rep.passed
        parts.append(f"ideal {spec.kind.value} tb={tb}: {'pass' if rep.passed else 'fails ' + ','.join(rep.failed)}")
        if spec is CIRCLE and tb == 0.1:
            circle_packet = packet
    # forced violations on the ideal circle packet at tb / reach = 0.1
    centers = np.vstack([circle_packet.centers, circle_packet.centers[:1]])
    bases = np.concatenate([circle_packet.bases, circle_packet.bases[:1]])
    dup = validate_packet(CylinderPacket(centers, bases, 0.1), CIRCLE.reach, CIRCLE.volume)
    ok &= dup.failed == ("2a",)
    parts.append(f"coincident centers fail {dup.failed} (want ('2a',))")
    rot_bases = np.array(circle_packet.bases)
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    rot_bases[0] = np.array([[c, -s], [s, c]]) @ rot_bases[0]
    rot = validate_packet(CylinderPacket(circle_packet.centers, rot_bases, 0.1), CIRCLE.reach, CIRCLE.volume)
    ok &= rot.failed == ("2c",)
    parts.append(f"rotated frame fails {rot.failed} (want ('2c',))")
    record(7, ok, "; ".join(parts))
    assert ok


def test_criterion_08_reach(record):
    parts, ok = [], True
    for spec, cloud, r in (
        (CIRCLE, sample_manifold(CIRCLE, 20000, 0), 0.01),
        (SPHERE, _fibonacci_cloud(100_000), 0.03),
    ):
        net = build_net(cloud, r, r / 2).centers
        est = estimate_reach(net, tangent_basis(spec, net.points))
        err = abs(est - spec.reach) / spec.reach
        ok &= err <= 0.05
        parts.append(f"{spec.kind.value} net of {len(net)}: {est:.6f} (rel err {err:.1e})")
    record(8, ok, "; ".join(parts) + " (<= 5%)")
    assert ok


def test_criterion_09_quadratic_oracle(record):
    rng = np.random.default_rng(9)
    worst = 0.0
    all_conv = True
    for n, d in ((2, 1), (3, 1), (3, 2), (5, 2)):
        starts = rng.normal(0, 1, (100, n))
        tol = 1e-9
        traces = run_descent(NormalQuadratic(n, d), PointCloud(starts), DescentConfig(d, tolerance=tol))
        for s, t in zip(starts, traces):
            all_conv &= t.status is DescentStatus.CONVERGED
            # brute force: the ridge is R^d x {0}; gradient there is 2 * normal part
            resid = 2 * np.linalg.norm(t.final_point[d:])
            worst = max(worst, resid / tol)
            all_conv &= np.array_equal(t.final_point[:d], s[:d])
    ok = all_conv and worst <= 1.0
    record(9, ok, f"400 starts in 4 (n, d) settings, all converged: {all_conv}, max residual/tol {worst:.3f}")
    assert ok


def test_criterion_10_determinism(record, tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({"trials": 2, "n_mesh": 100, "n_reference": 2000}))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli_main(["bench", "--config", str(cfg), "--out-dir", str(out), "--seed", "17", "--cells", "circle:kde,sphere:pca"])
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"})
    ok = outs[0] == outs[1] and len(outs[0]) == 5
    record(10, ok, f"two bench runs with seed 17: {len(outs[0])} report files, identical bytes: {outs[0] == outs[1]}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))
