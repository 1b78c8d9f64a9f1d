"""Synthetic manifolds, point clouds, nets and distance measures.

Three test manifolds are supported, all contained in the unit ball:

* ``Circle2D``: the circle of radius ``scale`` in the plane.
* ``Sphere3D``: the 2-sphere of radius ``scale`` in R^3.
* ``ClosedCurve3D``: ``t -> scale * (cos t, sin t, 0.3 sin 2t)``, a smooth
  closed space curve (``scale=0.5`` is the standard benchmark curve).
"""

from __future__ import annotations

import enum
import io
import itertools
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.spatial import cKDTree

from ._io import atomic_write_text
from .errors import DegeneratePair, NetInfeasible, ProjectionAmbiguous

REACH_SENTINEL = 1e12
"""Returned by :func:`estimate_reach` when the sample looks flat."""

_CURVE_Z = 0.3
_ARC_GRID = 100_001
_PROJ_GRID = 2048


class ManifoldKind(str, enum.Enum):
    CIRCLE = "Circle2D"
    SPHERE = "Sphere3D"
    CURVE = "ClosedCurve3D"

    @classmethod
    def parse(cls, name: "str | ManifoldKind") -> "ManifoldKind":
        if isinstance(name, ManifoldKind):
            return name
        aliases = {"circle": cls.CIRCLE, "sphere": cls.SPHERE, "curve": cls.CURVE}
        key = str(name)
        if key.lower() in aliases:
            return aliases[key.lower()]
        return cls(key)


_DIMS = {
    ManifoldKind.CIRCLE: (1, 2),
    ManifoldKind.SPHERE: (2, 3),
    ManifoldKind.CURVE: (1, 3),
}


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ``(N, n)`` array of finite points; the array is stored read-only."""

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.points, dtype=float, copy=True)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"points must be a 2-d array of shape (N, n), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("points must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    @property
    def ambient_dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.points[index])


@dataclass(frozen=True)
class ManifoldSpec:
    """Which synthetic manifold, and its size.

    ``intrinsic_dim`` and ``ambient_dim`` are fixed by ``kind``.
    """

    kind: ManifoldKind
    scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ManifoldKind.parse(self.kind))
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        limit = 1.0 / np.sqrt(1.0 + _CURVE_Z**2) if self.kind is ManifoldKind.CURVE else 1.0
        if scale > limit + 1e-12:
            raise ValueError(f"scale {scale} puts {self.kind.value} outside the unit ball")
        object.__setattr__(self, "scale", scale)

    @property
    def intrinsic_dim(self) -> int:
        return _DIMS[self.kind][0]

    @property
    def ambient_dim(self) -> int:
        return _DIMS[self.kind][1]

    @property
    def volume(self) -> float:
        """Length (d=1) or area (d=2) of the manifold."""
        s = self.scale
        if self.kind is ManifoldKind.CIRCLE:
            return 2 * np.pi * s
        if self.kind is ManifoldKind.SPHERE:
            return 4 * np.pi * s * s
        return s * float(_curve_arc_table()[1][-1])

    @property
    def reach(self) -> float:
        if self.kind is ManifoldKind.CURVE:
            return self.scale * _unit_curve_reach()
        return self.scale

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "scale": self.scale}

    @classmethod
    def from_dict(cls, payload: dict) -> "ManifoldSpec":
        return cls(ManifoldKind.parse(payload["kind"]), float(payload.get("scale", 1.0)))


def default_spec(kind: "str | ManifoldKind") -> ManifoldSpec:
    """Benchmark manifolds: unit circle, unit sphere and the half-scale curve."""
    kind = ManifoldKind.parse(kind)
    return ManifoldSpec(kind, 0.5 if kind is ManifoldKind.CURVE else 1.0)


# ---------------------------------------------------------------------------
# closed curve helpers (unit scale; callers multiply by spec.scale)


def _curve(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.stack([np.cos(t), np.sin(t), _CURVE_Z * np.sin(2 * t)], axis=-1)


def _curve_d1(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.stack([-np.sin(t), np.cos(t), 2 * _CURVE_Z * np.cos(2 * t)], axis=-1)


def _curve_d2(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.stack([-np.cos(t), -np.sin(t), -4 * _CURVE_Z * np.sin(2 * t)], axis=-1)


@lru_cache(maxsize=1)
def _curve_arc_table() -> tuple[np.ndarray, np.ndarray]:
    """Parameter grid and cumulative arc length of the unit-scale curve."""
    t = np.linspace(0.0, 2 * np.pi, _ARC_GRID)
    speed = np.linalg.norm(_curve_d1(t), axis=1)
    s = cumulative_trapezoid(speed, t, initial=0.0)
    return t, s


@lru_cache(maxsize=1)
def _unit_curve_reach() -> float:
    t = np.linspace(0.0, 2 * np.pi, 3000, endpoint=False)
    pts = _curve(t)
    tangents = _curve_d1(t)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    return estimate_reach(PointCloud(pts), tangents[:, :, None])


def _curve_nearest_param(points: np.ndarray, check_ambiguity: bool = False) -> np.ndarray:
    """Parameter of the closest curve point (unit scale) for each row of ``points``.

    Dense grid search followed by safeguarded Newton steps on the squared
    distance.
    """
    points = np.atleast_2d(points)
    grid = np.linspace(0.0, 2 * np.pi, _PROJ_GRID, endpoint=False)
    step = grid[1] - grid[0]
    gpts = _curve(grid)
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], 512):
        chunk = points[lo : lo + 512]
        d2 = ((chunk[:, None, :] - gpts[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        if check_ambiguity:
            _check_curve_ties(d2, best)
        t = grid[best]
        for _ in range(30):
            diff = chunk - _curve(t)
            d1 = _curve_d1(t)
            g = -2 * np.einsum("ij,ij->i", diff, d1)
            h = 2 * (np.einsum("ij,ij->i", d1, d1) - np.einsum("ij,ij->i", diff, _curve_d2(t)))
            delta = np.where(h > 0, g / np.where(h > 0, h, 1.0), np.sign(g) * step * 0.5)
            delta = np.clip(delta, -step, step)
            t = t - delta
            if np.all(np.abs(delta) < 1e-15):
                break
        out[lo : lo + 512] = np.mod(t, 2 * np.pi)
    return out


def _check_curve_ties(d2: np.ndarray, best: np.ndarray) -> None:
    k = d2.shape[1]
    for row, b in zip(d2, best):
        local = (row <= np.roll(row, 1)) & (row <= np.roll(row, -1))
        cand = np.flatnonzero(local)
        sep = np.minimum(np.abs(cand - b), k - np.abs(cand - b))
        cand = cand[sep > 4]
        if cand.size and np.min(np.sqrt(row[cand]) - np.sqrt(row[b])) <= 1e-9 * (1 + np.sqrt(row[b])):
            raise ProjectionAmbiguous("query is equidistant from separate parts of the curve")


# ---------------------------------------------------------------------------
# sampling


def sample_manifold(spec: ManifoldSpec, count: int, seed: int) -> PointCloud:
    """Draw ``count`` points i.i.d. from the uniform (volume) measure on ``spec``."""
    count = int(count)
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    s = spec.scale
    if spec.kind is ManifoldKind.CIRCLE:
        theta = rng.uniform(0.0, 2 * np.pi, count)
        pts = s * np.column_stack([np.cos(theta), np.sin(theta)])
    elif spec.kind is ManifoldKind.SPHERE:
        g = rng.standard_normal((count, 3))
        pts = s * g / np.linalg.norm(g, axis=1, keepdims=True)
    else:
        t_grid, arc = _curve_arc_table()
        u = rng.uniform(0.0, arc[-1], count)
        # np.interp inverts the monotone arc-length table by binary search
        pts = s * _curve(np.interp(u, arc, t_grid))
    return PointCloud(pts)


def add_gaussian_noise(cloud: PointCloud, sd: float, seed: int) -> PointCloud:
    """Add isotropic N(0, sd^2 I) noise. ``sd == 0`` returns ``cloud`` itself."""
    if sd < 0:
        raise ValueError("sd must be non-negative")
    if sd == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + sd * rng.standard_normal(cloud.points.shape))


# ---------------------------------------------------------------------------
# nets


@dataclass(frozen=True, eq=False)
class NetResult:
    centers: PointCloud
    indices: np.ndarray
    covering_radius: float
    min_separation: float

    def __len__(self) -> int:
        return len(self.centers)


def build_net(cloud: PointCloud, covering_radius: float, min_separation: float) -> NetResult:
    """Greedy net: scan points in order, keep those not within ``min_separation``
    of an already kept center.

    Raises
    ------
    NetInfeasible
        If a point is left uncovered, or if some center has no other center
        within ``3 * covering_radius``. A sample point at distance between
        ``covering_radius`` and ``2 * covering_radius`` from a center is
        covered by a center at most ``3 * covering_radius`` away, so an
        isolated center marks a hole in the sample around it.
    """
    if not covering_radius > 0:
        raise ValueError("covering_radius must be positive")
    if not 0 <= min_separation <= covering_radius:
        raise ValueError("need 0 <= min_separation <= covering_radius")
    pts = cloud.points
    n = pts.shape[1]
    kept: list[int] = []
    if min_separation == 0 or n > 6:
        for i, p in enumerate(pts):
            if not kept or np.min(np.linalg.norm(pts[kept] - p, axis=1)) >= min_separation:
                kept.append(i)
    else:
        cell = min_separation
        buckets: dict[tuple, list[int]] = {}
        offsets = list(itertools.product((-1, 0, 1), repeat=n))
        s2 = min_separation * min_separation
        for i, p in enumerate(pts):
            key = tuple(np.floor(p / cell).astype(int))
            close = False
            for off in offsets:
                for j in buckets.get(tuple(k + o for k, o in zip(key, off)), ()):
                    diff = pts[j] - p
                    if diff @ diff < s2:
                        close = True
                        break
                if close:
                    break
            if not close:
                kept.append(i)
                buckets.setdefault(key, []).append(i)
    idx = np.asarray(kept, dtype=int)
    centers = PointCloud(pts[idx])
    tree = cKDTree(centers.points)
    dist, _ = tree.query(pts)
    if np.any(dist > covering_radius):
        raise NetInfeasible(f"{int(np.sum(dist > covering_radius))} points are not covered")
    if len(idx) >= 2:
        nn, _ = tree.query(centers.points, k=2)
        isolated = nn[:, 1] > 3 * covering_radius
        if np.any(isolated):
            raise NetInfeasible(
                f"{int(isolated.sum())} net centers have no neighbor within "
                f"{3 * covering_radius:g}; the sample is too sparse at this scale"
            )
    return NetResult(centers, idx, float(covering_radius), float(min_separation))


# ---------------------------------------------------------------------------
# projection and distances


def project_to_manifold(spec: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    """Nearest point of the manifold to ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.ambient_dim,):
        raise ValueError(f"expected a point in R^{spec.ambient_dim}")
    if spec.kind is ManifoldKind.CURVE:
        t = _curve_nearest_param(x[None, :] / spec.scale, check_ambiguity=True)
        return spec.scale * _curve(t)[0]
    r = np.linalg.norm(x)
    if r < 1e-300 * spec.scale or r == 0:
        raise ProjectionAmbiguous("the center is equidistant from every manifold point")
    return spec.scale * x / r


def project_many(spec: ManifoldSpec, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project_to_manifold` without the ambiguity checks."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if spec.kind is ManifoldKind.CURVE:
        return spec.scale * _curve(_curve_nearest_param(points / spec.scale))
    r = np.linalg.norm(points, axis=1, keepdims=True)
    if np.any(r == 0):
        raise ProjectionAmbiguous("the center is equidistant from every manifold point")
    return spec.scale * points / r


def distance_to_manifold(spec: ManifoldSpec, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if spec.kind is ManifoldKind.CURVE:
        return np.linalg.norm(points - project_many(spec, points), axis=1)
    return np.abs(np.linalg.norm(points, axis=1) - spec.scale)


def tangent_basis(spec: ManifoldSpec, points: np.ndarray) -> np.ndarray:
    """Orthonormal tangent bases, shape ``(N, n, d)``, at the projections of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if spec.kind is ManifoldKind.CIRCLE:
        u = points / np.linalg.norm(points, axis=1, keepdims=True)
        return np.stack([-u[:, 1], u[:, 0]], axis=1)[:, :, None]
    if spec.kind is ManifoldKind.CURVE:
        t = _curve_nearest_param(points / spec.scale)
        d1 = _curve_d1(t)
        return (d1 / np.linalg.norm(d1, axis=1, keepdims=True))[:, :, None]
    u = points / np.linalg.norm(points, axis=1, keepdims=True)
    # pick the coordinate axis least aligned with u to seed the frame
    axis = np.eye(3)[np.argmin(np.abs(u), axis=1)]
    e1 = np.cross(u, axis)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return np.stack([e1, e2], axis=2)


def rms_distance(cloud: PointCloud, reference: "ManifoldSpec | PointCloud") -> float:
    """Root-mean-square distance from ``cloud`` to a manifold or a reference sample.

    Against a sample the distance is to the nearest reference point.
    """
    if len(cloud) == 0:
        raise ValueError("cloud is empty")
    if isinstance(reference, ManifoldSpec):
        d = distance_to_manifold(reference, cloud.points)
    else:
        d, _ = cKDTree(reference.points).query(cloud.points)
    return float(np.sqrt(np.mean(d * d)))


def directed_hausdorff(a: PointCloud, b: PointCloud) -> float:
    """``max_{x in a} min_{y in b} |x - y|``."""
    d, _ = cKDTree(b.points).query(a.points)
    return float(np.max(d))


def hausdorff_distance(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Hausdorff distance between two finite samples."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def _basis_array(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        arr = frames
    else:
        arr = np.stack([np.asarray(getattr(f, "basis", f), dtype=float) for f in frames])
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.asarray(arr, dtype=float)


def estimate_reach(cloud: PointCloud, frames: "Sequence | np.ndarray") -> float:
    """Reach estimate ``1 / sup_{a != b} 2 |N_a (b - a)| / |b - a|^2``.

    ``frames`` holds an orthonormal tangent basis (``n x d``) per point, as an
    array of shape ``(N, n, d)`` or a sequence of objects with a ``basis``
    attribute. Returns :data:`REACH_SENTINEL` when the sample is flat.
    """
    pts = cloud.points
    bases = _basis_array(frames)
    if bases.shape[0] != pts.shape[0] or bases.shape[1] != pts.shape[1]:
        raise ValueError("need one n x d tangent basis per point")
    sup = 0.0
    chunk = max(1, 2_000_000 // max(1, pts.shape[0] * pts.shape[1]))
    for lo in range(0, pts.shape[0], chunk):
        a = pts[lo : lo + chunk]
        P = bases[lo : lo + chunk]
        diff = pts[None, :, :] - a[:, None, :]
        den = np.einsum("abk,abk->ab", diff, diff)
        own = np.arange(lo, lo + a.shape[0])
        den[np.arange(a.shape[0]), own] = np.inf
        if np.any(den == 0):
            raise DegeneratePair("two points of the sample coincide")
        tang = np.einsum("abk,akd->abd", diff, P)
        normal = diff - np.einsum("akd,abd->abk", P, tang)
        ratio = 2 * np.linalg.norm(normal, axis=2) / den
        sup = max(sup, float(np.max(ratio)))
    if sup * REACH_SENTINEL <= 1.0:
        return REACH_SENTINEL
    return 1.0 / sup


# ---------------------------------------------------------------------------
# CSV


def write_point_cloud_csv(cloud: PointCloud, path: "str | Path", header: bool = False) -> Path:
    """One point per row, comma separated; optional ``x0,x1,...`` header."""
    buf = io.StringIO()
    if header:
        buf.write(",".join(f"x{i}" for i in range(cloud.ambient_dim)) + "\n")
    np.savetxt(buf, cloud.points, delimiter=",", fmt="%.17g")
    return atomic_write_text(path, buf.getvalue())


def read_point_cloud_csv(path: "str | Path") -> PointCloud:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no points")
    try:
        [float(v) for v in lines[0].split(",")]
    except ValueError:
        lines = lines[1:]
        if not lines:
            raise ValueError(f"{path}: header but no points") from None
    try:
        arr = np.loadtxt(io.StringIO("\n".join(lines)), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return PointCloud(arr)


def fibonacci_sphere(count: int, scale: float = 1.0) -> PointCloud:
    """Deterministic, nearly uniform points on the sphere of radius ``scale``."""
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * k
    return PointCloud(scale * np.column_stack([r * np.cos(phi), r * np.sin(phi), z]))
