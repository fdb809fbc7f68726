"""Two-agent opinion model: interaction kernel, pair/mean coordinates,
semilinear drift factorization, and quadratic cost weights.

Opinions live in [-1, 1]. The pair (x_i, x_j) is controlled toward
consensus; the quadratic control problem is posed in the transformed
coordinates (x_i, xbar) with xbar the pair mean. All scalar functions
accept numpy arrays and broadcast elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "OPINION_MIN",
    "OPINION_MAX",
    "DomainViolation",
    "ModelConfig",
    "BinaryState",
    "TransformedState",
    "kernel",
    "binary_drift",
    "to_transformed",
    "from_transformed",
    "semilinear_factors",
    "semilinear_A",
    "cost_weights",
    "pair_step",
]

OPINION_MIN = -1.0
OPINION_MAX = 1.0
_DOMAIN_TOL = 1e-12


class DomainViolation(ValueError):
    """A state left the opinion interval [-1, 1]."""


@dataclass(frozen=True)
class ModelConfig:
    """Kernel strength ``beta`` and control penalty ``gamma``.

    Defaults: beta = -1 (drives opinions apart when uncontrolled) and
    gamma = 0.025. The quadratic control weight is R = (gamma/2) I.
    """

    beta: float = -1.0
    gamma: float = 0.025

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if not (np.isfinite(self.gamma) and self.gamma > 0.0):
            raise ValueError("gamma must be positive")

    @property
    def r(self) -> float:
        """Scalar control weight; R = r * I with r = gamma / 2."""
        return 0.5 * self.gamma


class BinaryState(NamedTuple):
    xi: float
    xj: float


class TransformedState(NamedTuple):
    xi: float
    xbar: float


def kernel(xi, beta):
    """Interaction strength beta * (1 - xi^2); vanishes at the boundary,
    so agents holding extreme opinions do not move."""
    return beta * (1.0 - xi * xi)


def binary_drift(xi, xj, cfg: ModelConfig):
    """Uncontrolled pair drift (dxi/dt, dxj/dt).

    Each agent moves toward the other at rate kernel(own opinion)/2;
    the 1/2 is the 1/N averaging prefactor at N = 2.
    """
    fi = 0.5 * kernel(xi, cfg.beta) * (xj - xi)
    fj = 0.5 * kernel(xj, cfg.beta) * (xi - xj)
    return fi, fj


def to_transformed(xi, xj) -> TransformedState:
    """(x_i, x_j) -> (x_i, xbar) with xbar the pair mean."""
    return TransformedState(xi, 0.5 * (xi + xj))


def from_transformed(xi, xbar) -> BinaryState:
    """Inverse of :func:`to_transformed`; the reconstructed x_j must stay
    inside the opinion interval."""
    xj = 2.0 * xbar - xi
    if np.any(np.abs(xj) > OPINION_MAX + _DOMAIN_TOL) or np.any(
        np.abs(np.asarray(xi)) > OPINION_MAX + _DOMAIN_TOL
    ):
        raise DomainViolation(
            f"reconstructed pair ({xi}, {xj}) leaves [{OPINION_MIN}, {OPINION_MAX}]"
        )
    return BinaryState(xi, xj)


def semilinear_factors(xi, xbar, cfg: ModelConfig):
    """Row factors (P, Pbar) of the drift factorization f(z) = A(z) z.

    P is the kernel at x_i. Pbar carries a 1/2 relative to P's form so
    that the mean row reproduces d(xbar)/dt exactly, as enforced by the
    consistency tests.
    """
    p = kernel(xi, cfg.beta)
    xj = 2.0 * xbar - xi
    pbar = 0.5 * cfg.beta * (xj * xj - xi * xi)
    return p, pbar


def semilinear_A(xi, xbar, cfg: ModelConfig) -> np.ndarray:
    """Drift matrix A(z) with rows [-P, P] and [-Pbar, Pbar]; A(z) z equals
    the transformed uncontrolled drift, and A annihilates the consensus
    direction (1, 1)."""
    p, pbar = semilinear_factors(xi, xbar, cfg)
    return np.array([[-p, p], [-pbar, pbar]])


def cost_weights(cfg: ModelConfig):
    """Quadratic weights (Q, R, B) in transformed coordinates.

    z'Qz = (x_i - xbar)^2, which equals the mean squared distance to the
    pair mean; R = (gamma/2) I; the control enters through B = I.
    """
    q = np.array([[1.0, -1.0], [-1.0, 1.0]])
    r = cfg.r * np.eye(2)
    b = np.eye(2)
    return q, r, b


def pair_step(xi, xj, ui, uj, h, cfg: ModelConfig):
    """One forward-Euler update of the controlled pair, clamped to the
    opinion interval.

    Returns (xi_new, xj_new, clamped) where ``clamped`` flags entries the
    clamp actually moved. Shared by the pair integrator and the Monte
    Carlo collision step so the two produce identical arithmetic.
    """
    fi, fj = binary_drift(xi, xj, cfg)
    raw_i = xi + h * (fi + ui)
    raw_j = xj + h * (fj + uj)
    new_i = np.clip(raw_i, OPINION_MIN, OPINION_MAX)
    new_j = np.clip(raw_j, OPINION_MIN, OPINION_MAX)
    clamped = (raw_i != new_i) | (raw_j != new_j)
    return new_i, new_j, clamped
