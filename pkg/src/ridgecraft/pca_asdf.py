"""Local-PCA asdf built from a packet of cylinders.

A net of the sample at scale ``tau_bar`` gives centers ``x_i``; local PCA
gives each center an estimated tangent space ``P_i`` (``n x d`` orthonormal
basis). Cylinder ``i`` is the product of the ``tau_bar`` ball in the tangent
space and the ``tau_bar`` ball in the normal space, both centered at ``x_i``.

For a query ``z`` lying in at least one cylinder,

    F(z) = sum_i w_i(z) phi_i(z) / sum_i w_i(z)

over the cylinders containing ``z``, with ``phi_i(z) = |N_i (z - x_i)|^2``,
``N_i = I - P_i P_i^T`` and ``w_i(z) = theta(P_i^T (z - x_i) / (2 tau_bar))``
for the smooth radial bump ``theta``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._io import atomic_write_text
from .asdf import AsdfEvaluation, BatchEvaluation, empty_batch
from .errors import DegenerateSpectrum, InsufficientNeighbors, OutsidePacket, ZeroWeight
from .geometry import ManifoldSpec, PointCloud, build_net, tangent_basis

NET_COVER_FACTOR = 0.5
NET_SEPARATION_FACTOR = 1 / 2.9
SPECTRUM_GAP_FACTOR = 1e-12


@dataclass(frozen=True, eq=False)
class TangentFrame:
    center: np.ndarray
    basis: np.ndarray
    eigen_gap: float

    @property
    def intrinsic_dim(self) -> int:
        return int(self.basis.shape[1])


@dataclass(frozen=True, eq=False)
class Cylinder:
    center: np.ndarray
    basis: np.ndarray
    tau_bar: float
    eigen_gap: float = float("nan")

    def contains(self, z: np.ndarray) -> bool:
        rel = np.asarray(z, dtype=float) - self.center
        t = self.basis.T @ rel
        nrm = rel - self.basis @ t
        return bool(np.linalg.norm(t) <= self.tau_bar and np.linalg.norm(nrm) <= self.tau_bar)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    cols = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[cols, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def estimate_tangent(
    cloud: PointCloud,
    center: np.ndarray,
    tau_bar: float,
    d: int,
    tree: cKDTree | None = None,
) -> TangentFrame:
    """Tangent space at ``center`` from the sample points within ``tau_bar * sqrt(2)``.

    The second-moment matrix is taken about ``center`` itself, not about the
    neighborhood mean, and its top ``d`` eigenvectors form the basis.

    Raises
    ------
    InsufficientNeighbors
        Fewer than ``d + 1`` sample points in the ball.
    DegenerateSpectrum
        ``lambda_d - lambda_{d+1} < 1e-12 * lambda_1``.
    """
    center = np.asarray(center, dtype=float)
    n = cloud.ambient_dim
    if not 1 <= d < n:
        raise ValueError("need 1 <= d < ambient_dim")
    tree = tree if tree is not None else cKDTree(cloud.points)
    idx = np.sort(np.asarray(tree.query_ball_point(center, tau_bar * math.sqrt(2)), dtype=int))
    if idx.size < d + 1:
        raise InsufficientNeighbors(f"{idx.size} points within {tau_bar * math.sqrt(2):g} of the center; need {d + 1}")
    y = cloud.points[idx] - center
    cov = y.T @ y / idx.size
    lam, vec = np.linalg.eigh(cov)
    lam, vec = lam[::-1], vec[:, ::-1]
    gap = float(lam[d - 1] - lam[d])
    if not gap >= SPECTRUM_GAP_FACTOR * lam[0] or lam[0] <= 0:
        raise DegenerateSpectrum(f"eigen-gap {gap:g} too small relative to {lam[0]:g}")
    return TangentFrame(center.copy(), _fix_signs(vec[:, :d].copy()), gap)


def pca_schedule(n_samples: int, d: int, epsilon: float, scale: float = 1.0) -> float:
    """``tau_bar = scale * N ** (-1 / (d + epsilon))``."""
    if n_samples < 1 or d < 1 or epsilon <= 0 or scale <= 0:
        raise ValueError("invalid schedule arguments")
    return float(scale * n_samples ** (-1.0 / (d + epsilon)))


# ---------------------------------------------------------------------------
# bump function


def _smoothstep(t: np.ndarray):
    """``S(t) = f(t) / (f(t) + f(1 - t))`` with ``f(t) = exp(-1/t) [t > 0]``,
    and its first two derivatives."""
    t = np.asarray(t, dtype=float)
    s = np.where(t >= 1, 1.0, 0.0)
    ds = np.zeros_like(t)
    dds = np.zeros_like(t)
    inner = (t > 0) & (t < 1)
    if np.any(inner):
        ti = t[inner]
        # S = 1 / (1 + exp(h)) with h = 1/t - 1/(1-t); tanh form avoids overflow
        h = 1 / ti - 1 / (1 - ti)
        th = np.tanh(h / 2)
        si = 0.5 * (1 - th)
        sq = 0.25 * (1 - th) * (1 + th)
        k = 1 / ti**2 + 1 / (1 - ti) ** 2
        dk = -2 / ti**3 + 2 / (1 - ti) ** 3
        d1 = sq * k
        d2 = d1 * (1 - 2 * si) * k + sq * dk
        s[inner], ds[inner], dds[inner] = si, d1, d2
    return s, ds, dds


def bump_theta(y: np.ndarray):
    """Radial bump ``theta(y) = S((1 - |y|) / (3/4))`` with gradient and Hessian.

    ``theta = 1`` for ``|y| <= 1/4`` and ``0`` for ``|y| >= 1``.
    ``y`` has shape ``(..., d)``; returns ``(theta, grad, hess)`` with shapes
    ``(...)``, ``(..., d)``, ``(..., d, d)``.
    """
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(y, axis=-1)
    s, ds, dds = _smoothstep((1 - r) / 0.75)
    g1 = -ds / 0.75
    g2 = dds / 0.5625
    safe = np.where(r > 0, r, 1.0)
    yhat = y / safe[..., None]
    grad = g1[..., None] * yhat
    d = y.shape[-1]
    outer = yhat[..., :, None] * yhat[..., None, :]
    hess = g2[..., None, None] * outer + (g1 / safe)[..., None, None] * (np.eye(d) - outer)
    return s, grad, hess


# ---------------------------------------------------------------------------
# packets


@dataclass(frozen=True, eq=False)
class CylinderPacket:
    """Cylinders sharing one scale ``tau_bar``; ``bases`` has shape ``(K, n, d)``."""

    centers: np.ndarray
    bases: np.ndarray
    tau_bar: float
    eigen_gaps: np.ndarray | None = None
    coverage: float = float("nan")
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self) -> None:
        centers = np.array(self.centers, dtype=float, copy=True)
        bases = np.array(self.bases, dtype=float, copy=True)
        if centers.ndim != 2 or bases.ndim != 3 or bases.shape[:2] != centers.shape:
            raise ValueError("need centers (K, n) and bases (K, n, d)")
        if not 1 <= bases.shape[2] < bases.shape[1]:
            raise ValueError("need 1 <= d < n")
        if len(centers) == 0:
            raise ValueError("a packet needs at least one cylinder")
        if not self.tau_bar > 0:
            raise ValueError("tau_bar must be positive")
        gaps = np.full(len(centers), np.nan) if self.eigen_gaps is None else np.asarray(self.eigen_gaps, float)
        for arr in (centers, bases, gaps):
            arr.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "eigen_gaps", gaps)
        object.__setattr__(self, "tau_bar", float(self.tau_bar))
        object.__setattr__(self, "_tree", cKDTree(centers))

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def ambient_dim(self) -> int:
        return int(self.centers.shape[1])

    @property
    def intrinsic_dim(self) -> int:
        return int(self.bases.shape[2])

    @property
    def cylinders(self) -> list[Cylinder]:
        return [
            Cylinder(c, b, self.tau_bar, float(g)) for c, b, g in zip(self.centers, self.bases, self.eigen_gaps)
        ]

    def subset(self, index) -> "CylinderPacket":
        index = np.asarray(index)
        return CylinderPacket(self.centers[index], self.bases[index], self.tau_bar, self.eigen_gaps[index])

    def containing(self, z: np.ndarray) -> np.ndarray:
        """Sorted indices of the cylinders containing ``z``."""
        pairs, _ = _member_pairs(self, np.atleast_2d(np.asarray(z, dtype=float)))
        return pairs[1]

    # evaluator protocol -------------------------------------------------

    @property
    def default_step(self) -> float:
        return 0.25

    def to_internal(self, points):
        return np.array(points, dtype=float)

    def to_external(self, points):
        return np.array(points, dtype=float)

    def evaluate_many(self, points) -> BatchEvaluation:
        return fobar_eval_many(self, points)

    def evaluate(self, z) -> AsdfEvaluation:
        return fobar_eval(self, z)


def _member_pairs(packet: CylinderPacket, pts: np.ndarray):
    """``(point, cylinder)`` index pairs with the cylinder containing the point,
    ordered by point then cylinder, plus per-pair relative coordinates."""
    tb = packet.tau_bar
    # a point of cylinder i is within tau_bar * sqrt(2) of x_i
    lists = packet._tree.query_ball_point(pts, tb * math.sqrt(2) * (1 + 1e-12))
    counts = np.fromiter((len(lst) for lst in lists), dtype=int, count=len(lists))
    p_idx = np.repeat(np.arange(len(lists)), counts)
    c_idx = np.fromiter((c for lst in lists for c in sorted(lst)), dtype=int, count=int(counts.sum()))
    rel = pts[p_idx] - packet.centers[c_idx]
    P = packet.bases[c_idx]
    tang = np.einsum("kn,knd->kd", rel, P)
    normal = rel - np.einsum("knd,kd->kn", P, tang)
    inside = (np.linalg.norm(tang, axis=1) <= tb) & (np.linalg.norm(normal, axis=1) <= tb)
    return (p_idx[inside], c_idx[inside]), (rel[inside], tang[inside], normal[inside], P[inside])


def fobar_eval_many(packet: CylinderPacket, points: np.ndarray) -> BatchEvaluation:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, n = pts.shape
    if n != packet.ambient_dim:
        raise ValueError(f"expected points in R^{packet.ambient_dim}")
    tb = packet.tau_bar
    (p_idx, _), (rel, tang, normal, P) = _member_pairs(packet, pts)

    theta, dtheta, htheta = bump_theta(tang / (2 * tb))
    phi = np.einsum("kn,kn->k", normal, normal)
    dphi = 2 * normal
    eye = np.eye(n)
    proj_n = eye[None] - np.einsum("knd,kmd->knm", P, P)
    hphi = 2 * proj_n
    dw = np.einsum("knd,kd->kn", P, dtheta) / (2 * tb)
    hw = np.einsum("kna,kab,kmb->knm", P, htheta, P) / (4 * tb * tb)

    W = np.zeros(m)
    S = np.zeros(m)
    dW = np.zeros((m, n))
    dS = np.zeros((m, n))
    hW = np.zeros((m, n, n))
    hS = np.zeros((m, n, n))
    # np.add.at accumulates in pair order, which keeps results independent of
    # cylinders that do not contain the query
    np.add.at(W, p_idx, theta)
    np.add.at(S, p_idx, theta * phi)
    np.add.at(dW, p_idx, dw)
    np.add.at(dS, p_idx, phi[:, None] * dw + theta[:, None] * dphi)
    np.add.at(hW, p_idx, hw)
    cross = dw[:, :, None] * dphi[:, None, :]
    np.add.at(hS, p_idx, phi[:, None, None] * hw + cross + np.swapaxes(cross, 1, 2) + theta[:, None, None] * hphi)

    count = np.bincount(p_idx, minlength=m)
    values, grads, hess = empty_batch(m, n)
    valid = (count > 0) & (W > 0)
    v = np.flatnonzero(valid)
    F = S[v] / W[v]
    g = (dS[v] - F[:, None] * dW[v]) / W[v][:, None]
    outer = g[:, :, None] * dW[v][:, None, :]
    H = (hS[v] - F[:, None, None] * hW[v] - outer - np.swapaxes(outer, 1, 2)) / W[v][:, None, None]
    values[v], grads[v], hess[v] = F, g, 0.5 * (H + np.swapaxes(H, 1, 2))
    errors = tuple(
        None
        if ok
        else (OutsidePacket("query lies in no cylinder") if c == 0 else ZeroWeight("bump weights sum to zero"))
        for ok, c in zip(valid, count)
    )
    return BatchEvaluation(values, grads, hess, valid, errors)


def fobar_eval(packet: CylinderPacket, z: np.ndarray, finite_difference: bool = False, h: float | None = None) -> AsdfEvaluation:
    """Evaluate the packet asdf at ``z``.

    ``finite_difference=True`` replaces the analytic derivatives by central
    differences of the value (step ``h``, default ``1e-4 * tau_bar``); meant
    for debugging only.

    Raises
    ------
    OutsidePacket
        ``z`` lies in no cylinder.
    ZeroWeight
        The bump weights of the containing cylinders sum to zero.
    """
    z = np.asarray(z, dtype=float)
    ev = fobar_eval_many(packet, z[None, :]).single(0)
    if not finite_difference:
        return ev
    h = 1e-4 * packet.tau_bar if h is None else h
    n = z.shape[0]
    E = np.eye(n) * h

    def val(p):
        return fobar_eval_many(packet, p[None, :]).single(0).value

    grad = np.array([(val(z + E[i]) - val(z - E[i])) / (2 * h) for i in range(n)])
    hess = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            hess[i, j] = (
                val(z + E[i] + E[j]) - val(z + E[i] - E[j]) - val(z - E[i] + E[j]) + val(z - E[i] - E[j])
            ) / (4 * h * h)
    return AsdfEvaluation(ev.value, grad, 0.5 * (hess + hess.T))


def build_packet(cloud: PointCloud, tau_bar: float, d: int) -> CylinderPacket:
    """Net the sample at scale ``tau_bar`` and estimate a tangent frame per center.

    The net has covering radius ``tau_bar / 2`` and separation
    ``tau_bar / 2.9``. The fraction of sample points lying in at least one
    cylinder is stored as ``coverage``.

    Raises
    ------
    NetInfeasible, InsufficientNeighbors, DegenerateSpectrum
    """
    net = build_net(cloud, NET_COVER_FACTOR * tau_bar, NET_SEPARATION_FACTOR * tau_bar)
    tree = cKDTree(cloud.points)
    frames = [estimate_tangent(cloud, c, tau_bar, d, tree) for c in net.centers.points]
    packet = CylinderPacket(
        net.centers.points,
        np.stack([f.basis for f in frames]),
        tau_bar,
        np.array([f.eigen_gap for f in frames]),
    )
    return _with_coverage(packet, cloud)


def ideal_packet(spec: ManifoldSpec, cloud: PointCloud, tau_bar: float) -> CylinderPacket:
    """Packet on a net of ``cloud`` (assumed to lie on ``spec``) with exact tangents."""
    net = build_net(cloud, NET_COVER_FACTOR * tau_bar, NET_SEPARATION_FACTOR * tau_bar)
    bases = tangent_basis(spec, net.centers.points)
    return _with_coverage(CylinderPacket(net.centers.points, bases, tau_bar), cloud)


def _with_coverage(packet: CylinderPacket, cloud: PointCloud) -> CylinderPacket:
    (p_idx, _), _ = _member_pairs(packet, cloud.points)
    covered = np.unique(p_idx).size / len(cloud)
    return CylinderPacket(packet.centers, packet.bases, packet.tau_bar, packet.eigen_gaps, covered)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ConditionResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class PacketValidationReport:
    conditions: tuple[ConditionResult, ...]
    n_cylinders: int
    n_pairs: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def failed(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.conditions if not c.passed)

    def __getitem__(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_cylinders": self.n_cylinders,
            "n_pairs": self.n_pairs,
            "conditions": [c.__dict__ for c in self.conditions],
        }

    def table(self) -> str:
        rows = [f"{'condition':<10} {'result':<6} {'margin':>14}  detail"]
        for c in self.conditions:
            rows.append(f"{c.name:<10} {'pass' if c.passed else 'FAIL':<6} {c.margin:>14.6g}  {c.detail}")
        return "\n".join(rows)


def _project_to_cylinder(z, center, P, tb):
    rel = z - center
    t = np.einsum("kn,knd->kd", rel, P)
    nrm = rel - np.einsum("knd,kd->kn", P, t)
    tl = np.sqrt(np.einsum("kd,kd->k", t, t))[:, None]
    nl = np.sqrt(np.einsum("kn,kn->k", nrm, nrm))[:, None]
    t = t * np.minimum(1.0, tb / np.maximum(tl, 1e-300))
    nrm = nrm * np.minimum(1.0, tb / np.maximum(nl, 1e-300))
    return center + np.einsum("knd,kd->kn", P, t) + nrm


def intersecting_pairs(packet: CylinderPacket, max_iterations: int = 2000) -> np.ndarray:
    """Unordered pairs ``(i, j)``, ``i < j``, of cylinders that intersect.

    Candidates come from the ball bound ``|x_i - x_j| <= 2 sqrt(2) tau_bar``;
    each is decided by alternating projections between the two (convex)
    cylinders, stopping once the gap vanishes or stops shrinking.
    """
    tb = packet.tau_bar
    cand = packet._tree.query_pairs(2 * math.sqrt(2) * tb * (1 + 1e-12), output_type="ndarray")
    if cand.size == 0:
        return np.zeros((0, 2), dtype=int)
    cand = cand[np.lexsort((cand[:, 1], cand[:, 0]))]
    tol = 1e-9 * tb
    hit = np.zeros(len(cand), dtype=bool)
    active = np.arange(len(cand))
    z = 0.5 * (packet.centers[cand[:, 0]] + packet.centers[cand[:, 1]])
    prev = np.full(len(cand), np.inf)
    done = 0
    while active.size and done < max_iterations:
        ci, cj = packet.centers[cand[active, 0]], packet.centers[cand[active, 1]]
        Pi, Pj = packet.bases[cand[active, 0]], packet.bases[cand[active, 1]]
        za = z[active]
        for _ in range(5):
            za = _project_to_cylinder(_project_to_cylinder(za, cj, Pj, tb), ci, Pi, tb)
        done += 5
        z[active] = za
        gap = np.linalg.norm(za - _project_to_cylinder(za, cj, Pj, tb), axis=1)
        meet = gap <= tol
        hit[active[meet]] = True
        # disjoint sets: the gap settles at their positive distance
        settled = ~meet & (prev[active] - gap <= 1e-6 * gap)
        prev[active] = gap
        active = active[~meet & ~settled]
    return cand[hit]


def _sin_largest_angle(Pi: np.ndarray, Pj: np.ndarray) -> np.ndarray:
    sv = np.linalg.svd(np.einsum("knd,kne->kde", Pi, Pj), compute_uv=False)
    return np.sqrt(np.clip(1.0 - np.min(sv, axis=1) ** 2, 0.0, None))


def _disc_grid(d: int, radius: float, step: float) -> np.ndarray:
    k = int(math.ceil(radius / step))
    axis = np.arange(-k, k + 1) * step
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return grid[np.linalg.norm(grid, axis=1) <= radius * (1 + 1e-12)]


def validate_packet(
    packet: CylinderPacket,
    reach: float,
    volume: float,
    *,
    count_constant: float = 10.0,
    count_scale: str = "tau_bar",
    separation_fraction: float = 1 / 3,
    net_fraction: float = 0.5,
    grid_fraction: float = 1 / 20,
    rotation_constant: float = 6.0,
    offset_constant: float = 4.0,
) -> PacketValidationReport:
    """Check the packet conditions; each margin is ``bound - observed`` (or
    ``observed - bound`` for lower bounds), so a condition passes iff its
    margin is non-negative.

    ``1``  number of cylinders ``<= count_constant * volume / s^d`` with
           ``s = tau_bar`` (``count_scale="tau_bar"``) or ``s = reach``.
    ``2a`` for intersecting ``i, j``: ``|P_i^T (x_j - x_i)| >= tau_bar / 3``.
    ``2b`` ``{0} U {P_i^T (x_j - x_i)}`` over all intersecting neighbors is a
           ``tau_bar / 2`` net of the cross-section ball, checked on a grid of
           step ``tau_bar / 20``; the grid error ``tau_bar sqrt(d) / 20`` is
           charged against the margin. Projected neighbors falling outside
           the ball still count, otherwise the rim is never covered.
    ``2c`` ``sin`` of the largest principal angle between ``P_i`` and ``P_j``
           is at most ``rotation_constant * sqrt(d) * tau_bar / reach``.
    ``2d`` ``|N_i (x_j - x_i)| <= offset_constant * tau_bar^2 / reach``.
    """
    tb = packet.tau_bar
    K = len(packet)
    d = packet.intrinsic_dim
    n = packet.ambient_dim
    scale = tb if count_scale == "tau_bar" else reach
    if count_scale not in ("tau_bar", "reach"):
        raise ValueError("count_scale must be 'tau_bar' or 'reach'")
    count_bound = count_constant * volume / scale**d
    results = [ConditionResult("1", K <= count_bound, count_bound - K, f"{K} cylinders, bound {count_bound:.4g}")]

    pairs = intersecting_pairs(packet)
    ordered = np.concatenate([pairs, pairs[:, ::-1]]) if pairs.size else np.zeros((0, 2), dtype=int)
    sep_bound = separation_fraction * tb
    rot_bound = rotation_constant * math.sqrt(d) * tb / reach
    off_bound = offset_constant * tb * tb / reach
    if ordered.size:
        i, j = ordered[:, 0], ordered[:, 1]
        rel = packet.centers[j] - packet.centers[i]
        Pi = packet.bases[i]
        tang = np.einsum("kn,knd->kd", rel, Pi)
        normal = rel - np.einsum("knd,kd->kn", Pi, tang)
        sep = np.linalg.norm(tang, axis=1)
        off = np.linalg.norm(normal, axis=1)
        sin = _sin_largest_angle(Pi, packet.bases[j])
        results.append(_lower("2a", sep, sep_bound, ordered))
    else:
        tang = np.zeros((0, d))
        results.append(ConditionResult("2a", True, sep_bound, "no intersecting pairs"))

    # 2b: per cylinder, grid of its cross-section ball against projected neighbors
    grid = _disc_grid(d, tb, grid_fraction * tb)
    grid_err = tb * math.sqrt(d) * grid_fraction
    worst_cover = 0.0
    worst_i = -1
    order = np.argsort(ordered[:, 0], kind="stable") if ordered.size else np.zeros(0, dtype=int)
    starts = np.searchsorted(ordered[order, 0], np.arange(K + 1)) if ordered.size else np.zeros(K + 1, int)
    for c in range(K):
        own = tang[order[starts[c] : starts[c + 1]]] if ordered.size else np.zeros((0, d))
        net = np.vstack([np.zeros((1, d)), own])
        dist, _ = cKDTree(net).query(grid)
        cover = float(dist.max())
        if cover > worst_cover:
            worst_cover, worst_i = cover, c
    margin_b = net_fraction * tb - (worst_cover + grid_err)
    results.append(
        ConditionResult("2b", margin_b >= 0, margin_b, f"worst covering radius {worst_cover:.4g} at cylinder {worst_i}")
    )
    if ordered.size:
        results.append(_upper("2c", sin, rot_bound, ordered))
        results.append(_upper("2d", off, off_bound, ordered))
    else:
        results.append(ConditionResult("2c", True, rot_bound, "no intersecting pairs"))
        results.append(ConditionResult("2d", True, off_bound, "no intersecting pairs"))
    return PacketValidationReport(tuple(results), K, int(len(pairs)))


def _lower(name, observed, bound, ordered) -> ConditionResult:
    k = int(np.argmin(observed))
    margin = float(observed[k] - bound)
    return ConditionResult(name, margin >= 0, margin, f"worst pair {tuple(int(v) for v in ordered[k])}")


def _upper(name, observed, bound, ordered) -> ConditionResult:
    k = int(np.argmax(observed))
    margin = float(bound - observed[k])
    return ConditionResult(name, margin >= 0, margin, f"worst pair {tuple(int(v) for v in ordered[k])}")


def tangent_error_bound(tau_bar: float, reach: float, d: int, epsilon: float = 0.5, const: float = 1.0) -> float:
    """Upper bound on ``|sin theta|`` between estimated and true tangent spaces.

    ``(2 tb^3 / tau + 2 tb^4 / tau^2)(d + 2)`` divided by
    ``(1 - epsilon) tb^2 (1 + C^2 tb^2 / tau^2)^(-d/2)``.
    """
    tb, tau = tau_bar, reach
    num = (2 * tb**3 / tau + 2 * tb**4 / tau**2) * (d + 2)
    den = (1 - epsilon) * tb**2 * (1 + const**2 * tb**2 / tau**2) ** (-d / 2)
    return num / den


def principal_sines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Sines of the principal angles between the column spans of ``A`` and ``B``."""
    sv = np.linalg.svd(A.T @ B, compute_uv=False)
    return np.sqrt(np.clip(1.0 - sv**2, 0.0, None))[::-1]


# ---------------------------------------------------------------------------
# serialization


def packet_to_dict(packet: CylinderPacket) -> dict:
    return {
        "tau_bar": packet.tau_bar,
        "cylinders": [
            {
                "center": [float(v) for v in c],
                # column-major: basis vectors one after another
                "basis": [float(v) for v in b.T.ravel()],
                "eigen_gap": None if not np.isfinite(g) else float(g),
            }
            for c, b, g in zip(packet.centers, packet.bases, packet.eigen_gaps)
        ],
    }


def packet_from_dict(payload: dict, intrinsic_dim: int | None = None) -> CylinderPacket:
    cyl = payload["cylinders"]
    centers = np.array([c["center"] for c in cyl], dtype=float)
    n = centers.shape[1]
    flat = [np.asarray(c["basis"], dtype=float) for c in cyl]
    d = intrinsic_dim if intrinsic_dim is not None else flat[0].size // n
    bases = np.stack([f.reshape(d, n).T for f in flat])
    gaps = np.array([np.nan if c.get("eigen_gap") is None else c["eigen_gap"] for c in cyl], dtype=float)
    return CylinderPacket(centers, bases, float(payload["tau_bar"]), gaps)


def save_packet(packet: CylinderPacket, path: "str | os.PathLike") -> Path:
    return atomic_write_text(path, json.dumps(packet_to_dict(packet), indent=2) + "\n")


def load_packet(path: "str | os.PathLike") -> CylinderPacket:
    return packet_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def frames_of(packet: CylinderPacket) -> Sequence[TangentFrame]:
    return [TangentFrame(c, b, float(g)) for c, b, g in zip(packet.centers, packet.bases, packet.eigen_gaps)]
