"""Subspace-constrained gradient descent (SCGD) onto the ridge of an asdf.

One step from ``x``: diagonalize the Hessian ``H``, let ``V`` hold the
eigenvectors of the ``n - d`` largest eigenvalues, and move to
``x - eta * V V^T grad``. The ridge is where ``V V^T grad`` vanishes.
"""

from __future__ import annotations

import enum
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .asdf import AsdfEvaluation, BatchEvaluation, Evaluator
from .errors import EigenFailure
from .geometry import PointCloud

DEFAULT_TOLERANCE_FACTOR = 1e-7
SPLIT_GAP_FACTOR = 1e-12
_CHUNK = 256


class DescentStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    LEFT_DOMAIN = "LeftDomain"
    STALLED = "Stalled"


@dataclass(frozen=True)
class DescentConfig:
    """Descent settings.

    ``step_size`` and ``tolerance`` are in the evaluator's internal
    coordinates. ``None`` picks the evaluator's default step, and a tolerance
    of ``DEFAULT_TOLERANCE_FACTOR`` times the median starting gradient norm.
    """

    intrinsic_dim: int
    step_size: float | None = None
    max_iters: int = 1000
    tolerance: float | None = None
    backtracking: bool = True
    shrink: float = 0.5
    min_step: float = 1e-8
    record_values: bool = False

    def __post_init__(self) -> None:
        if self.intrinsic_dim < 1:
            raise ValueError("intrinsic_dim must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class DescentTrace:
    """Outcome for one mesh point. ``final_point`` is in external coordinates."""

    final_point: np.ndarray
    iterations: int
    converged: bool
    residual: float
    status: DescentStatus
    degenerate_split: bool = False
    values: tuple = field(default=())


def _normal_frame(hessians: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``n - d`` eigenvectors (descending) and a degenerate-split mask."""
    if not np.all(np.isfinite(hessians)):
        raise EigenFailure("Hessian has non-finite entries")
    try:
        lam, vec = np.linalg.eigh(hessians)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    n = hessians.shape[-1]
    k = n - d
    # eigh sorts ascending; flip to descending and keep the first n - d
    vec = vec[..., ::-1][..., :k]
    lam = lam[..., ::-1]
    gap = lam[..., k - 1] - lam[..., k]
    scale = np.maximum(np.abs(lam[..., 0]), 1.0)
    return vec, gap < SPLIT_GAP_FACTOR * scale


def _projected_gradient(ev_grad: np.ndarray, ev_hess: np.ndarray, d: int):
    V, degenerate = _normal_frame(ev_hess, d)
    coeff = np.einsum("...nk,...n->...k", V, ev_grad)
    proj = np.einsum("...nk,...k->...n", V, coeff)
    return proj, np.linalg.norm(proj, axis=-1), degenerate


def scgd_step(
    evaluation: AsdfEvaluation,
    x: np.ndarray,
    config: DescentConfig,
    asdf: Evaluator | None = None,
) -> tuple[np.ndarray, float]:
    """One SCGD step from ``x`` (internal coordinates).

    Returns ``(x_next, residual)`` where ``residual = |V V^T grad|`` at ``x``.
    When ``config.backtracking`` is set and ``asdf`` is given, the step is
    halved until the asdf value does not increase (down to
    ``config.min_step``, after which ``x`` is returned unchanged).

    Raises
    ------
    EigenFailure
        If the Hessian is not finite.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if config.intrinsic_dim >= n:
        raise ValueError("intrinsic_dim must be smaller than the ambient dimension")
    proj, residual, _ = _projected_gradient(evaluation.gradient, evaluation.hessian, config.intrinsic_dim)
    eta = config.step_size if config.step_size is not None else getattr(asdf, "default_step", 0.1)
    if not (config.backtracking and asdf is not None):
        return x - eta * proj, float(residual)
    while eta >= config.min_step:
        cand = x - eta * proj
        ev = asdf.evaluate_many(cand[None, :])
        if ev.valid[0] and ev.values[0] <= evaluation.value:
            return cand, float(residual)
        eta *= config.shrink
    return x.copy(), float(residual)


def default_tolerance(asdf: Evaluator, mesh: PointCloud) -> float:
    """``DEFAULT_TOLERANCE_FACTOR`` times the median gradient norm over ``mesh``."""
    ev = asdf.evaluate_many(asdf.to_internal(mesh.points))
    norms = np.linalg.norm(ev.gradients[ev.valid], axis=1)
    if norms.size == 0 or not np.median(norms) > 0:
        return DEFAULT_TOLERANCE_FACTOR
    return float(DEFAULT_TOLERANCE_FACTOR * np.median(norms))


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``RIDGECRAFT_THREADS``, else the CPU count."""
    if threads is None:
        env = os.environ.get("RIDGECRAFT_THREADS", "").strip()
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError("threads must be at least 1")
    return int(threads)


def run_descent(
    asdf: Evaluator,
    mesh: PointCloud,
    config: DescentConfig,
    threads: int | None = None,
) -> list[DescentTrace]:
    """Run SCGD from every mesh point; one trace per point, in mesh order.

    Points are processed in fixed-size chunks so results do not depend on the
    thread count. A point whose evaluation raises a domain error (at the
    start, or at every backtracked candidate) is frozen at its last valid
    position with status ``LeftDomain``. A point already within tolerance is
    returned unchanged after one iteration.
    """
    if mesh.ambient_dim != asdf.ambient_dim:
        raise ValueError("mesh and asdf ambient dimensions differ")
    if config.intrinsic_dim >= mesh.ambient_dim:
        raise ValueError("intrinsic_dim must be smaller than the ambient dimension")
    tol = config.tolerance if config.tolerance is not None else default_tolerance(asdf, mesh)
    eta = config.step_size if config.step_size is not None else asdf.default_step
    chunks = [slice(lo, lo + _CHUNK) for lo in range(0, len(mesh), _CHUNK)]

    def work(sl: slice) -> list[DescentTrace]:
        return _descend_chunk(asdf, mesh.points[sl], config, tol, eta)

    n_threads = resolve_threads(threads)
    if n_threads == 1 or len(chunks) == 1:
        parts = [work(sl) for sl in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(work, chunks))
    return [t for part in parts for t in part]


def _descend_chunk(
    asdf: Evaluator, start: np.ndarray, config: DescentConfig, tol: float, eta0: float
) -> list[DescentTrace]:
    m = start.shape[0]
    d = config.intrinsic_dim
    x = asdf.to_internal(start)
    ev = asdf.evaluate_many(x)
    values = ev.values.copy()
    grads = ev.gradients.copy()
    hess = ev.hessians.copy()
    status: list[DescentStatus | None] = [None] * m
    iters = np.zeros(m, dtype=int)
    residual = np.full(m, np.nan)
    degenerate = np.zeros(m, dtype=bool)
    moved = np.zeros(m, dtype=bool)
    history: list[list[float]] = [[v] if ok else [] for v, ok in zip(values, ev.valid)]
    for i in np.flatnonzero(~ev.valid):
        status[i] = DescentStatus.LEFT_DOMAIN
    active = np.flatnonzero(ev.valid)

    for it in range(1, config.max_iters + 1):
        if active.size == 0:
            break
        finite = np.all(np.isfinite(hess[active]), axis=(1, 2))
        for i in active[~finite]:
            status[i] = DescentStatus.LEFT_DOMAIN
        active = active[finite]
        if active.size == 0:
            break
        proj, res, degen = _projected_gradient(grads[active], hess[active], d)
        iters[active] = it
        residual[active] = res
        degenerate[active] |= degen
        done = res <= tol
        for i in active[done]:
            status[i] = DescentStatus.CONVERGED
        if it == config.max_iters:
            for i in active[~done]:
                status[i] = DescentStatus.MAX_ITERS
            break
        active, proj = active[~done], proj[~done]
        if active.size == 0:
            break
        step = np.full(active.size, eta0)
        pending = np.ones(active.size, dtype=bool)
        keep = np.ones(active.size, dtype=bool)
        while np.any(pending):
            sel = np.flatnonzero(pending)
            idx = active[sel]
            cand = x[idx] - step[sel, None] * proj[sel]
            cev = asdf.evaluate_many(cand)
            if config.backtracking:
                ok = cev.valid & (cev.values <= values[idx])
            else:
                ok = cev.valid
            acc = sel[ok]
            acc_idx = active[acc]
            x[acc_idx] = cand[ok]
            values[acc_idx] = cev.values[ok]
            grads[acc_idx] = cev.gradients[ok]
            hess[acc_idx] = cev.hessians[ok]
            moved[acc_idx] = True
            if config.record_values:
                for i, v in zip(acc_idx, cev.values[ok]):
                    history[i].append(float(v))
            pending[acc] = False
            rej = sel[~ok]
            if not config.backtracking:
                for j in rej:
                    status[active[j]] = DescentStatus.LEFT_DOMAIN
                keep[rej] = False
                pending[rej] = False
                continue
            step[rej] *= config.shrink
            gave_up = rej[step[rej] < config.min_step]
            for j in gave_up:
                # the last rejection tells us whether the domain or the value blocked us
                last_valid = cev.valid[np.flatnonzero(sel == j)[0]]
                status[active[j]] = DescentStatus.STALLED if last_valid else DescentStatus.LEFT_DOMAIN
            keep[gave_up] = False
            pending[gave_up] = False
        active = active[keep]

    out_pts = asdf.to_external(x)
    # unmoved points are returned bit-for-bit
    out_pts[~moved] = start[~moved]
    traces = []
    for i in range(m):
        st = status[i] if status[i] is not None else DescentStatus.MAX_ITERS
        traces.append(
            DescentTrace(
                final_point=out_pts[i].copy(),
                iterations=int(iters[i]),
                converged=st is DescentStatus.CONVERGED,
                residual=float(residual[i]),
                status=st,
                degenerate_split=bool(degenerate[i]),
                values=tuple(history[i]) if config.record_values else (),
            )
        )
    return traces


def final_cloud(traces: Sequence[DescentTrace], converged_only: bool = False) -> PointCloud:
    pts = [t.final_point for t in traces if t.converged or not converged_only]
    if not pts:
        raise ValueError("no traces to collect")
    return PointCloud(np.vstack(pts))


@dataclass(frozen=True)
class NormalQuadratic:
    """Test asdf ``F(x) = |N x|^2`` with ``N`` the projector onto the last
    ``n - d`` coordinates. Its ridge is the coordinate subspace ``R^d``."""

    n: int
    intrinsic_dim: int

    @property
    def ambient_dim(self) -> int:
        return self.n

    @property
    def default_step(self) -> float:
        return 0.25

    def to_internal(self, points):
        return np.array(points, dtype=float)

    def to_external(self, points):
        return np.array(points, dtype=float)

    def evaluate_many(self, points) -> BatchEvaluation:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = pts.shape[0]
        mask = np.zeros(self.n)
        mask[self.intrinsic_dim :] = 1.0
        values = np.sum((pts * mask) ** 2, axis=1)
        grads = 2 * pts * mask
        hess = np.broadcast_to(2 * np.diag(mask), (m, self.n, self.n)).copy()
        return BatchEvaluation(values, grads, hess, np.ones(m, dtype=bool), (None,) * m)


# ---------------------------------------------------------------------------
# CSV


def write_traces_csv(traces: Sequence[DescentTrace], path: "str | Path") -> Path:
    """Columns ``x0..x{n-1}, iterations, converged, residual, status``."""
    if not traces:
        raise ValueError("no traces")
    n = traces[0].final_point.shape[0]
    buf = io.StringIO()
    buf.write(",".join([f"x{i}" for i in range(n)] + ["iterations", "converged", "residual", "status"]) + "\n")
    for t in traces:
        coords = ",".join(repr(float(v)) for v in t.final_point)
        buf.write(f"{coords},{t.iterations},{int(t.converged)},{float(t.residual)!r},{t.status.value}\n")
    return atomic_write_text(path, buf.getvalue())


def read_traces_csv(path: "str | Path") -> list[DescentTrace]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    n = sum(1 for h in header if h.startswith("x"))
    out = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split(",")
        st = DescentStatus(parts[n + 3])
        out.append(
            DescentTrace(
                final_point=np.array([float(v) for v in parts[:n]]),
                iterations=int(parts[n]),
                converged=bool(int(parts[n + 1])),
                residual=float(parts[n + 2]),
                status=st,
            )
        )
    return out
