"""Exception types raised across ridgecraft."""

from __future__ import annotations


class RidgecraftError(RuntimeError):
    """Base class for all library errors."""


class NetInfeasible(RidgecraftError):
    """The sample is too sparse to support a net at the requested scale."""


class ProjectionAmbiguous(RidgecraftError):
    """The query point has no unique nearest point on the manifold."""


class DegeneratePair(RidgecraftError):
    """Two points used for a reach estimate coincide."""


class DomainError(RidgecraftError):
    """An asdf was queried outside the region where it is defined."""


class NumericUnderflow(DomainError):
    """Every kernel term underflows; the query is far from all samples."""


class OutsidePacket(DomainError):
    """The query lies in no cylinder of the packet."""


class ZeroWeight(DomainError):
    """Cylinders contain the query but their bump weights sum to zero."""


class InsufficientNeighbors(RidgecraftError):
    """Too few sample points near a net center to estimate a tangent space."""


class DegenerateSpectrum(RidgecraftError):
    """The local covariance has no usable gap between tangent and normal."""


class EigenFailure(RidgecraftError):
    """The Hessian could not be diagonalized (non-finite entries)."""
