"""Kernel density asdf.

With samples ``y_i`` and bandwidth ``sigma`` work in scaled coordinates
``xh = x / (sigma * sqrt(2 pi))``. The asdf is

    F(xh) = -log( (1/N) sum_i exp(-pi |xh - yh_i|^2) ) + log_nf

i.e. minus the log of a Gaussian kernel density estimate, shifted by a
normalizing constant. With softmax weights ``w_i`` and ``u_i = xh - yh_i``:

    grad F = 2 pi sum_i w_i u_i
    hess F = 2 pi I - 4 pi^2 (sum_i w_i u_i u_i^T - m m^T),  m = sum_i w_i u_i

All derivatives are with respect to the scaled coordinates.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._io import atomic_write_text
from .asdf import AsdfEvaluation, BatchEvaluation, empty_batch
from .errors import NumericUnderflow
from .geometry import PointCloud, read_point_cloud_csv, write_point_cloud_csv

LOG_TINY = float(np.log(np.finfo(float).smallest_subnormal))
"""Exponents below this underflow to zero even as subnormals."""

CUTOFF_SIGMAS = 6.0
"""Optional truncation radius, in units of sigma. Each dropped term is at most
``exp(-CUTOFF_SIGMAS**2 / 2)`` relative to the kernel peak."""

_CHUNK_ELEMS = 1_500_000


@dataclass(frozen=True, eq=False)
class KdeAsdf:
    """Gaussian-kernel asdf fitted to ``samples``.

    Parameters
    ----------
    samples : PointCloud
        The fitting sample.
    sigma : float
        Kernel bandwidth, in the units of ``samples``.
    intrinsic_dim : int
        Dimension ``d`` of the manifold being fitted; ``d < n``.
    log_nf : float
        Additive normalizing constant. Only changes the value.
    cutoff : bool
        Drop samples farther than ``CUTOFF_SIGMAS * sigma`` from the query.
    """

    samples: PointCloud
    sigma: float
    intrinsic_dim: int
    log_nf: float = 0.0
    cutoff: bool = False
    samples_file: str | None = None
    _scaled: np.ndarray = field(init=False, repr=False)
    _tree: cKDTree | None = field(init=False, repr=False, default=None)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive")
        if len(self.samples) < 1:
            raise ValueError("need at least one sample")
        if not 1 <= self.intrinsic_dim < self.samples.ambient_dim:
            raise ValueError("need 1 <= intrinsic_dim < ambient_dim")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "log_nf", float(self.log_nf))
        scaled = self.samples.points * self.scale
        scaled.setflags(write=False)
        object.__setattr__(self, "_scaled", scaled)
        if self.cutoff:
            object.__setattr__(self, "_tree", cKDTree(scaled))

    @property
    def scale(self) -> float:
        """Factor taking original coordinates to scaled ones."""
        return 1.0 / (self.sigma * math.sqrt(2 * math.pi))

    @property
    def ambient_dim(self) -> int:
        return self.samples.ambient_dim

    @property
    def default_step(self) -> float:
        return 0.1

    def to_internal(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.scale

    def to_external(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.scale

    def evaluate(self, xh: np.ndarray) -> AsdfEvaluation:
        """Evaluate at one point given in scaled coordinates."""
        return self.evaluate_many(np.asarray(xh, dtype=float)[None, :]).single(0)

    def evaluate_many(self, xh: np.ndarray) -> BatchEvaluation:
        xh = np.atleast_2d(np.asarray(xh, dtype=float))
        m, n = xh.shape
        if n != self.ambient_dim:
            raise ValueError(f"expected points in R^{self.ambient_dim}")
        values, grads, hess = empty_batch(m, n)
        valid = np.zeros(m, dtype=bool)
        rows = max(1, _CHUNK_ELEMS // (len(self.samples) * n))
        for lo in range(0, m, rows):
            sl = slice(lo, lo + rows)
            v, g, h, ok = self._eval_chunk(xh[sl])
            values[sl], grads[sl], hess[sl], valid[sl] = v, g, h, ok
        errors = tuple(
            None if ok else NumericUnderflow("every kernel term underflows at this query")
            for ok in valid
        )
        return BatchEvaluation(values, grads, hess, valid, errors)

    def _eval_chunk(self, xh: np.ndarray):
        ys = self._scaled
        n_total = ys.shape[0]
        if self._tree is not None:
            radius = CUTOFF_SIGMAS * self.sigma * self.scale
            near = self._tree.query_ball_point(xh, radius)
            pool = np.unique(np.concatenate([np.asarray(ix, dtype=int) for ix in near]))
            ys = ys[pool]
        u = xh[:, None, :] - ys[None, :, :]
        expo = -np.pi * np.einsum("mkn,mkn->mk", u, u)
        if self._tree is not None:
            expo[np.einsum("mkn,mkn->mk", u, u) > radius * radius] = -np.inf
        top = np.max(expo, axis=1) if ys.shape[0] else np.full(xh.shape[0], -np.inf)
        ok = top >= LOG_TINY
        top_safe = np.where(ok, top, 0.0)
        w = np.exp(expo - top_safe[:, None])
        total = w.sum(axis=1)
        with np.errstate(divide="ignore"):
            lse = top_safe + np.log(total)
        value = -(lse - math.log(n_total)) + self.log_nf
        w = w / np.where(total > 0, total, 1.0)[:, None]
        mean = np.einsum("mk,mkn->mn", w, u)
        grad = 2 * np.pi * mean
        second = np.einsum("mk,mki,mkj->mij", w, u, u) - mean[:, :, None] * mean[:, None, :]
        n = xh.shape[1]
        hess = 2 * np.pi * np.eye(n)[None] - 4 * np.pi**2 * second
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        value = np.where(ok, value, np.nan)
        grad[~ok] = np.nan
        hess[~ok] = np.nan
        return value, grad, hess, ok


def kde_eval(asdf: KdeAsdf, x: np.ndarray) -> AsdfEvaluation:
    """Evaluate ``asdf`` at ``x`` (original coordinates).

    The returned gradient and Hessian are with respect to the scaled
    coordinates ``x / (sigma sqrt(2 pi))``.

    Raises
    ------
    NumericUnderflow
        If ``x`` is so far from every sample (about 38.6 sigma) that all
        kernel terms underflow.
    """
    return asdf.evaluate(asdf.to_internal(np.asarray(x, dtype=float)))


def kde_schedule(sigma: float) -> float:
    """Scale ``tau_bar = sigma ** (5/6)`` at which the KDE asdf is tracked."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(sigma) ** (5.0 / 6.0)


@dataclass(frozen=True)
class KdeDiagnostics:
    """Constants of the KDE guarantee, evaluated with unit constant ``C``.

    ``rho`` includes the finite-sample term ``epsilon_prime``;
    ``rho_expected`` is the same quantity without it.
    """

    k1: float
    k2: float
    c_f: float
    epsilon1: float
    epsilon_prime: float
    alpha: float
    beta: float
    n_f: float
    rho: float
    rho_expected: float
    tau_bar: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


EPSILON_SENTINEL = 1e12


def kde_diagnostics(
    asdf: KdeAsdf,
    manifold_volume: float,
    reach: float,
    delta: float,
    ambient_dim: int | None = None,
    const: float = 1.0,
) -> KdeDiagnostics:
    """Evaluate the KDE guarantee constants for ``asdf``.

    Lengths are measured in units of ``sigma``: ``tau_hat = reach / sigma``
    and ``tau_bar_hat = sigma ** (-1/6)``. ``epsilon_prime`` is set to
    ``EPSILON_SENTINEL`` when the sample is too small for the concentration
    bound to be informative (``epsilon1 >= k1``).
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if manifold_volume <= 0 or reach <= 0:
        raise ValueError("volume and reach must be positive")
    sigma = asdf.sigma
    d = asdf.intrinsic_dim
    n = asdf.ambient_dim if ambient_dim is None else int(ambient_dim)
    N = len(asdf.samples)
    C = const
    tau_hat = reach / sigma
    tbh = sigma ** (-1.0 / 6.0)

    c_f = d * C * C * tbh**2 / (2 * tau_hat**2) + (
        tbh**4 / tau_hat**2 + 2 * math.sqrt(2) * tbh**3 / tau_hat
    ) * math.pi
    n_f = sigma**d / manifold_volume
    gap = max(tbh - math.sqrt(d / (2 * math.pi)), 0.0)
    conc = max(1.0 - 2.0 * math.exp(-gap * gap * math.pi), 0.0)
    k1 = n_f * math.exp(-0.5) * conc * math.exp(-c_f)
    k2 = math.exp(c_f) * n_f + math.exp(-tbh * tbh * math.pi / 2)
    alpha = 4 * manifold_volume * sigma ** (-d) * math.exp(-(sigma ** (-1 / 3)) * math.pi / 4)
    beta = 4 * math.exp(-(sigma ** (-1 / 3)) * math.pi / 2)
    v_hat = manifold_volume / sigma**d
    log_c = math.log(C * v_hat) + d * math.log(100.0) + n * math.log(2 * math.sqrt(2 * math.pi / math.e))
    eps1 = 24 / math.sqrt(N) * (math.sqrt(math.pi * n) / 2 + math.sqrt(max(log_c, 0.0))) + math.sqrt(
        2 * math.log(2 / delta) / N
    )
    eps_prime = eps1 / (k1 - eps1) if eps1 < k1 else EPSILON_SENTINEL
    rho_exp = math.sqrt(2 * (alpha + beta + c_f))
    rho = math.sqrt(2 * (alpha + beta + c_f + eps_prime))
    return KdeDiagnostics(
        k1=k1,
        k2=k2,
        c_f=c_f,
        epsilon1=eps1,
        epsilon_prime=eps_prime,
        alpha=alpha,
        beta=beta,
        n_f=n_f,
        rho=rho,
        rho_expected=rho_exp,
        tau_bar=kde_schedule(sigma),
    )


# ---------------------------------------------------------------------------
# serialization


def save_kde_asdf(asdf: KdeAsdf, path: "str | os.PathLike", samples_path: "str | os.PathLike | None" = None) -> Path:
    """Write the asdf as JSON plus a CSV of its samples.

    ``samples_path`` defaults to ``<path stem>.samples.csv``; the JSON stores
    it relative to the JSON file when possible.
    """
    path = Path(path)
    samples_path = Path(samples_path) if samples_path else path.with_suffix(".samples.csv")
    write_point_cloud_csv(asdf.samples, samples_path)
    try:
        ref = os.path.relpath(samples_path, path.parent)
    except ValueError:
        ref = str(samples_path)
    payload = {
        "sigma": asdf.sigma,
        "intrinsic_dim": asdf.intrinsic_dim,
        "log_nf": asdf.log_nf,
        "samples_file": ref,
    }
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_kde_asdf(path: "str | os.PathLike") -> KdeAsdf:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    samples_path = Path(payload["samples_file"])
    if not samples_path.is_absolute():
        samples_path = path.parent / samples_path
    return KdeAsdf(
        read_point_cloud_csv(samples_path),
        float(payload["sigma"]),
        int(payload["intrinsic_dim"]),
        float(payload.get("log_nf", 0.0)),
        samples_file=payload["samples_file"],
    )
