"""Monte Carlo experiments: fit, descend, and score against the true manifold."""

from __future__ import annotations

import enum
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text, dump_json
from .geometry import (
    ManifoldKind,
    ManifoldSpec,
    PointCloud,
    add_gaussian_noise,
    default_spec,
    directed_hausdorff,
    distance_to_manifold,
    hausdorff_distance,
    rms_distance,
    sample_manifold,
)
from .kde_asdf import KdeAsdf
from .pca_asdf import build_packet
from .ridge import DescentConfig, DescentStatus, run_descent

RATE_EPSILON = 0.5


class AsdfKind(str, enum.Enum):
    KDE = "Kde"
    PCA = "Pca"

    @classmethod
    def parse(cls, name: "str | AsdfKind") -> "AsdfKind":
        if isinstance(name, AsdfKind):
            return name
        key = str(name).lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown asdf kind {name!r}")


# tuned bandwidths (sigma for KDE, tau_bar for PCA) per manifold
PRESET_BANDWIDTH = {
    (ManifoldKind.CIRCLE, AsdfKind.KDE): 0.05,
    (ManifoldKind.SPHERE, AsdfKind.KDE): 0.05,
    (ManifoldKind.CURVE, AsdfKind.KDE): 0.05,
    (ManifoldKind.CIRCLE, AsdfKind.PCA): 0.05,
    (ManifoldKind.SPHERE, AsdfKind.PCA): 0.2,
    (ManifoldKind.CURVE, AsdfKind.PCA): 0.13,
}

PROFILE_TRIALS = {"ci": 20, "full": 100}


@dataclass(frozen=True)
class ExperimentConfig:
    spec: ManifoldSpec
    asdf_kind: AsdfKind
    bandwidth: float
    n_fit: int = 1000
    n_mesh: int = 1000
    noise_sd: float = 0.05
    n_reference: int = 10000
    trials: int = 20
    seed: int = 0
    step_size: float | None = None
    max_iters: int = 1000
    tolerance: float | None = None
    backtracking: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "asdf_kind", AsdfKind.parse(self.asdf_kind))
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        for name in ("n_fit", "n_mesh", "n_reference", "trials"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["spec"] = self.spec.to_dict()
        out["asdf_kind"] = self.asdf_kind.value
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        data = dict(payload)
        data["spec"] = ManifoldSpec.from_dict(data["spec"])
        return cls(**data)


def preset_config(kind: "str | ManifoldKind", asdf_kind: "str | AsdfKind", profile: str = "ci", **overrides) -> ExperimentConfig:
    """Benchmark configuration for one cell of the results table."""
    mk = ManifoldKind.parse(kind)
    ak = AsdfKind.parse(asdf_kind)
    if profile not in PROFILE_TRIALS:
        raise ValueError(f"unknown profile {profile!r}")
    cfg = ExperimentConfig(
        spec=default_spec(mk),
        asdf_kind=ak,
        bandwidth=PRESET_BANDWIDTH[(mk, ak)],
        trials=PROFILE_TRIALS[profile],
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class ExperimentReport:
    """Per-trial and averaged scores.

    ``rms_per_trial`` is the RMS distance of converged final points to the
    true manifold. ``rms_reference_per_trial`` measures the same points
    against a fresh reference sample of ``n_reference`` points instead.
    ``hausdorff_estimate`` averages the symmetric Hausdorff distance between
    the final points and the reference sample; ``hausdorff_to_manifold`` the
    largest distance from a converged final point to the manifold.
    """

    config: ExperimentConfig
    rms_per_trial: tuple[float, ...]
    rms_reference_per_trial: tuple[float, ...]
    hausdorff_per_trial: tuple[float, ...]
    hausdorff_to_manifold_per_trial: tuple[float, ...]
    convergence_per_trial: tuple[float, ...]
    status_counts: dict = field(default_factory=dict)

    @property
    def mean_rms(self) -> float:
        return float(np.mean(self.rms_per_trial))

    @property
    def mean_rms_reference(self) -> float:
        return float(np.mean(self.rms_reference_per_trial))

    @property
    def convergence_fraction(self) -> float:
        return float(np.mean(self.convergence_per_trial))

    @property
    def hausdorff_estimate(self) -> float:
        return float(np.mean(self.hausdorff_per_trial))

    @property
    def hausdorff_to_manifold(self) -> float:
        return float(np.mean(self.hausdorff_to_manifold_per_trial))

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "mean_rms": self.mean_rms,
            "mean_rms_reference": self.mean_rms_reference,
            "convergence_fraction": self.convergence_fraction,
            "hausdorff_estimate": self.hausdorff_estimate,
            "hausdorff_to_manifold": self.hausdorff_to_manifold,
            "rms_per_trial": list(self.rms_per_trial),
            "rms_reference_per_trial": list(self.rms_reference_per_trial),
            "hausdorff_per_trial": list(self.hausdorff_per_trial),
            "hausdorff_to_manifold_per_trial": list(self.hausdorff_to_manifold_per_trial),
            "convergence_per_trial": list(self.convergence_per_trial),
            "status_counts": dict(sorted(self.status_counts.items())),
        }


def _trial_seeds(base_seed: int, trial: int) -> list[int]:
    # independent streams for fit sample, mesh sample, mesh noise, reference
    ss = np.random.SeedSequence(base_seed + trial)
    return [int(v) for v in ss.generate_state(4)]


def fit_asdf(config: ExperimentConfig, fit: PointCloud):
    d = config.spec.intrinsic_dim
    if config.asdf_kind is AsdfKind.KDE:
        return KdeAsdf(fit, config.bandwidth, d)
    return build_packet(fit, config.bandwidth, d)


def run_trial(config: ExperimentConfig, trial: int, threads: int | None = None) -> dict:
    spec = config.spec
    s_fit, s_mesh, s_noise, s_ref = _trial_seeds(config.seed, trial)
    fit = sample_manifold(spec, config.n_fit, s_fit)
    asdf = fit_asdf(config, fit)
    mesh = add_gaussian_noise(sample_manifold(spec, config.n_mesh, s_mesh), config.noise_sd, s_noise)
    dcfg = DescentConfig(
        spec.intrinsic_dim,
        step_size=config.step_size,
        max_iters=config.max_iters,
        tolerance=config.tolerance,
        backtracking=config.backtracking,
    )
    traces = run_descent(asdf, mesh, dcfg, threads=threads)
    counts = Counter(t.status.value for t in traces)
    conv = [t.final_point for t in traces if t.status is DescentStatus.CONVERGED]
    reference = sample_manifold(spec, config.n_reference, s_ref)
    if conv:
        finals = PointCloud(np.vstack(conv))
        rms = rms_distance(finals, spec)
        rms_ref = rms_distance(finals, reference)
        haus = hausdorff_distance(finals, reference)
        haus_m = float(np.max(distance_to_manifold(spec, finals.points)))
    else:
        rms = rms_ref = haus = haus_m = float("nan")
    return {
        "rms": rms,
        "rms_reference": rms_ref,
        "hausdorff": haus,
        "hausdorff_to_manifold": haus_m,
        "convergence": len(conv) / len(traces),
        "counts": counts,
    }


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> ExperimentReport:
    """Run ``config.trials`` independent trials; trial ``k`` is seeded from ``seed + k``."""
    rows = [run_trial(config, k, threads) for k in range(config.trials)]
    total: Counter = Counter()
    for r in rows:
        total.update(r["counts"])
    return ExperimentReport(
        config=config,
        rms_per_trial=tuple(r["rms"] for r in rows),
        rms_reference_per_trial=tuple(r["rms_reference"] for r in rows),
        hausdorff_per_trial=tuple(r["hausdorff"] for r in rows),
        hausdorff_to_manifold_per_trial=tuple(r["hausdorff_to_manifold"] for r in rows),
        convergence_per_trial=tuple(r["convergence"] for r in rows),
        status_counts=dict(total),
    )


def write_report_json(report: ExperimentReport, path: "str | Path") -> Path:
    return dump_json(path, report.to_dict())


def write_report_csv(report: ExperimentReport, path: "str | Path") -> Path:
    buf = io.StringIO()
    buf.write("trial,rms,rms_reference,hausdorff,hausdorff_to_manifold,convergence\n")
    for k, row in enumerate(
        zip(
            report.rms_per_trial,
            report.rms_reference_per_trial,
            report.hausdorff_per_trial,
            report.hausdorff_to_manifold_per_trial,
            report.convergence_per_trial,
        )
    ):
        buf.write(f"{k}," + ",".join(repr(float(v)) for v in row) + "\n")
    return atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# rates


@dataclass(frozen=True)
class RateStudyResult:
    bandwidths: tuple[float, ...]
    hausdorff: tuple[float, ...]
    n_fit: tuple[int, ...]
    slope: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bandwidth,hausdorff,n_fit\n")
        for b, h, n in zip(self.bandwidths, self.hausdorff, self.n_fit):
            buf.write(f"{b!r},{h!r},{n}\n")
        buf.write(f"# slope {self.slope!r}\n")
        return buf.getvalue()


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def rate_study(
    spec: ManifoldSpec,
    kind: "str | AsdfKind",
    bandwidths: Sequence[float],
    base_config: ExperimentConfig,
    threads: int | None = None,
) -> RateStudyResult:
    """Hausdorff error as the bandwidth shrinks, with the sample size grown to match.

    The smallest bandwidth uses ``base_config.n_fit`` samples; the others use
    ``n_fit * (b_min / b) ** k`` with ``k = d`` (KDE) or ``k = d + 1/2`` (PCA).
    The error at each bandwidth is the mean over trials of the largest
    distance from a converged final point to the manifold.
    """
    kind = AsdfKind.parse(kind)
    bws = [float(b) for b in bandwidths]
    if len(bws) < 3:
        raise ValueError("need at least three bandwidths")
    if any(b2 >= b1 for b1, b2 in zip(bws, bws[1:])):
        raise ValueError("bandwidths must be strictly decreasing")
    d = spec.intrinsic_dim
    power = d if kind is AsdfKind.KDE else d + RATE_EPSILON
    b_min = bws[-1]
    errors, sizes = [], []
    for b in bws:
        n_fit = int(math.ceil(base_config.n_fit * (b_min / b) ** power))
        cfg = replace(base_config, spec=spec, asdf_kind=kind, bandwidth=b, n_fit=n_fit)
        errors.append(run_experiment(cfg, threads).hausdorff_to_manifold)
        sizes.append(n_fit)
    return RateStudyResult(tuple(bws), tuple(errors), tuple(sizes), fit_slope(bws, errors))
