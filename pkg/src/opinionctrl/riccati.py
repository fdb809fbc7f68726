"""Solvers for small continuous-time algebraic Riccati equations (CARE).

The equation solved is

    A' X + X A - X B R^{-1} B' X + Q = 0

for the positive-semidefinite stabilizing solution X. Two independent
methods are provided so that each can serve as an oracle for the other:
``solve_care_hamiltonian`` extracts the stable invariant subspace of the
Hamiltonian matrix, ``solve_care_newton`` runs a Newton-Kleinman
iteration built on Lyapunov solves.

Problems whose drift and cost share a common right kernel (vectors v
with A v = 0 and Q v = 0) are degenerate: when B R^{-1} B' is positive
definite every PSD solution annihilates v, and the Hamiltonian becomes
defective on the imaginary axis, which ruins eigenvector accuracy. Such
directions are deflated exactly before solving and the closed loop is
marginal (not strictly stable) along them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RiccatiError",
    "NotStabilizable",
    "SingularSubspace",
    "NoConvergence",
    "DivergedIterate",
    "RiccatiProblem",
    "RiccatiSolution",
    "solve_care_hamiltonian",
    "solve_care_newton",
    "eig4",
    "care_residual",
    "feedback_gain",
]


class RiccatiError(Exception):
    """Base class for Riccati solver failures."""


class NotStabilizable(RiccatiError):
    """The pair (A, B) cannot be stabilized, or the Hamiltonian lacks a
    full stable subspace."""


class SingularSubspace(RiccatiError):
    """The stable-subspace basis is numerically singular."""


class NoConvergence(RiccatiError):
    """An iterative method failed to reach its tolerance."""


class DivergedIterate(RiccatiError):
    """An iterate blew up beyond any plausible solution scale."""


_KERNEL_RTOL = 1e-12
_PSD_TOL = -1e-10
_RESIDUAL_TOL = 1e-9
# Directions in the common kernel of A and Q stay marginal in closed
# loop; everything else must be strictly stable.
_CLOSED_LOOP_TOL = 1e-9
_COND_LIMIT = 1e12
_DIVERGENCE_LIMIT = 1e12


def _as_square(m, name: str) -> np.ndarray:
    arr = np.array(m, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _require_symmetric(m: np.ndarray, name: str) -> None:
    if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
        raise ValueError(f"{name} must be symmetric")


def _check_stabilizable(a: np.ndarray, b: np.ndarray) -> None:
    """PBH test: every eigenvalue of A with Re >= 0 must be controllable."""
    n = a.shape[0]
    scale = max(1.0, np.linalg.norm(a), np.linalg.norm(b))
    for lam in np.linalg.eigvals(a):
        if lam.real < -1e-12 * scale:
            continue
        pencil = np.hstack([a - lam * np.eye(n), b.astype(complex)])
        if np.linalg.matrix_rank(pencil, tol=1e-10 * scale) < n:
            raise NotStabilizable(
                f"uncontrollable unstable mode at eigenvalue {lam:.6g}"
            )


@dataclass
class RiccatiProblem:
    """Data (A, B, Q, R) of a CARE; validated on construction.

    Q must be symmetric PSD, R symmetric positive definite, and (A, B)
    stabilizable.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        self.A = _as_square(self.A, "A")
        self.B = _as_square(self.B, "B")
        self.Q = _as_square(self.Q, "Q")
        self.R = _as_square(self.R, "R")
        n = self.A.shape[0]
        for name, m in (("B", self.B), ("Q", self.Q), ("R", self.R)):
            if m.shape != (n, n):
                raise ValueError(f"{name} must match A's shape {(n, n)}")
        _require_symmetric(self.Q, "Q")
        if np.linalg.eigvalsh(self.Q).min() < _PSD_TOL:
            raise ValueError("Q must be positive semidefinite")
        _require_symmetric(self.R, "R")
        if np.linalg.eigvalsh(self.R).min() <= 0.0:
            raise ValueError("R must be positive definite")
        _check_stabilizable(self.A, self.B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def control_weight(self) -> np.ndarray:
        """W = B R^{-1} B'."""
        return self.B @ np.linalg.solve(self.R, self.B.T)


@dataclass
class RiccatiSolution:
    """Symmetric PSD solution with its CARE residual (Frobenius norm).

    ``iterations`` counts Lyapunov solves for the Newton path and is
    None for the direct solver.
    """

    Pi: np.ndarray
    residual: float
    iterations: int | None = None


def care_residual(problem: RiccatiProblem, pi: np.ndarray) -> float:
    """Frobenius norm of A'X + XA - XWX + Q at X = pi."""
    w = problem.control_weight()
    res = problem.A.T @ pi + pi @ problem.A - pi @ w @ pi + problem.Q
    return float(np.linalg.norm(res))


def feedback_gain(problem: RiccatiProblem, pi: np.ndarray) -> np.ndarray:
    """Gain K = R^{-1} B' X of the feedback u = -K x."""
    return np.linalg.solve(problem.R, problem.B.T @ pi)


def eig4(h) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of a real 4x4 matrix.

    Each returned pair satisfies ||H v - lambda v|| <= 1e-9 ||v||.
    """
    arr = _as_square(h, "h")
    if arr.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {arr.shape}")
    return _eig(arr)


def _eig(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        return np.linalg.eig(h)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"eigen-iteration failed: {exc}") from exc


def _cost_free_kernel(a: np.ndarray, q: np.ndarray):
    """Orthonormal basis U of the complement of ker A's intersection with
    ker Q, or None when that intersection is trivial."""
    stacked = np.vstack([a, q])
    svals = np.linalg.svd(stacked, compute_uv=False)
    tol = _KERNEL_RTOL * max(1.0, svals.max(initial=0.0))
    k = int(np.count_nonzero(svals <= tol))
    if k == 0:
        return None
    _, _, vt = np.linalg.svd(stacked)
    return vt[: a.shape[0] - k].T


def _stable_subspace_pi(a: np.ndarray, w: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Stabilizing solution from the Hamiltonian's stable eigenspace."""
    n = a.shape[0]
    ham = np.block([[a, -w], [-q, -a.T]])
    evals, evecs = eig4(ham) if ham.shape == (4, 4) else _eig(ham)
    order = np.argsort(evals.real)
    sel = order[:n]
    if not np.all(evals[sel].real < 0.0):
        stable = int(np.count_nonzero(evals.real < 0.0))
        raise NotStabilizable(
            f"Hamiltonian has {stable} stable eigenvalue(s), need {n}; "
            f"spectrum {np.sort_complex(evals)}"
        )
    x = evecs[:n, sel]
    y = evecs[n:, sel]
    cond = np.linalg.cond(x)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularSubspace(
            f"stable-subspace basis condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}"
        )
    pi = (y @ np.linalg.inv(x)).real
    return 0.5 * (pi + pi.T)


def _finish(problem: RiccatiProblem, pi: np.ndarray,
            iterations: int | None) -> RiccatiSolution:
    pi = 0.5 * (pi + pi.T)
    residual = care_residual(problem, pi)
    if not np.isfinite(residual) or residual > _RESIDUAL_TOL:
        raise RiccatiError(f"solution residual {residual:.3e} exceeds {_RESIDUAL_TOL:.0e}")
    if np.linalg.eigvalsh(pi).min() < _PSD_TOL:
        raise RiccatiError("solution is not positive semidefinite")
    closed = np.linalg.eigvals(problem.A - problem.control_weight() @ pi)
    if closed.real.max() > _CLOSED_LOOP_TOL:
        raise RiccatiError(
            f"closed loop has unstable eigenvalue (max Re {closed.real.max():.3e})"
        )
    return RiccatiSolution(Pi=pi, residual=residual, iterations=iterations)


def _deflate(problem: RiccatiProblem):
    """Return (A, W, Q, U) of the reduced problem; U is None when no
    deflation applies (trivial kernel, or W not positive definite)."""
    w = problem.control_weight()
    if np.linalg.eigvalsh(w).min() <= 1e-12 * max(1.0, np.abs(w).max()):
        return problem.A, w, problem.Q, None
    basis = _cost_free_kernel(problem.A, problem.Q)
    if basis is None:
        return problem.A, w, problem.Q, None
    u = basis
    return u.T @ problem.A @ u, u.T @ w @ u, u.T @ problem.Q @ u, u


def _lift(pi_red: np.ndarray, u: np.ndarray | None, n: int) -> np.ndarray:
    if u is None:
        return pi_red
    if pi_red.size == 0:
        return np.zeros((n, n))
    return u @ pi_red @ u.T


def solve_care_hamiltonian(problem: RiccatiProblem) -> RiccatiSolution:
    """Direct CARE solve via the stable invariant subspace of

        H = [[A, -B R^{-1} B'], [-Q, -A']].

    Columns [X; Y] spanning the stable eigenspace give Pi = Y X^{-1},
    symmetrized on output.
    """
    a, w, q, u = _deflate(problem)
    if a.shape[0] == 0:
        pi = np.zeros((problem.n, problem.n))
    else:
        pi = _lift(_stable_subspace_pi(a, w, q), u, problem.n)
    return _finish(problem, pi, iterations=None)


def _solve_lyapunov(m: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve M'X + XM = C through the Kronecker linear system."""
    n = m.shape[0]
    eye = np.eye(n)
    lhs = np.kron(m.T, eye) + np.kron(eye, m.T)
    x = np.linalg.solve(lhs, c.reshape(-1)).reshape(n, n)
    return 0.5 * (x + x.T)


def _is_hurwitz(m: np.ndarray) -> bool:
    return bool(np.linalg.eigvals(m).real.max() < -1e-12)


def _default_newton_start(a: np.ndarray, w: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Stabilizing initial iterate.

    Default: solve the Lyapunov equation with A shifted to A - cI for a
    c that makes the shift Hurwitz; fall back to scaled identities.
    """
    n = a.shape[0]
    max_re = float(np.linalg.eigvals(a).real.max())
    for margin in (1.0, 0.5, 2.0, 0.25, 4.0, 8.0):
        c = max(0.0, max_re) + margin
        p0 = _solve_lyapunov(a - c * np.eye(n), -q)
        if _is_hurwitz(a - w @ p0):
            return p0
    for alpha in (1.0, 10.0, 100.0, 1000.0):
        p0 = alpha * np.eye(n)
        if _is_hurwitz(a - w @ p0):
            return p0
    raise NoConvergence("found no stabilizing initial iterate")


def solve_care_newton(problem: RiccatiProblem, pi0: np.ndarray | None = None,
                      tol: float = 1e-12, max_iter: int = 60) -> RiccatiSolution:
    """Newton-Kleinman iteration: each step solves the Lyapunov equation

        (A - W X_k)' X_{k+1} + X_{k+1} (A - W X_k) = -(Q + X_k W X_k)

    and terminates once the CARE residual drops below ``tol``.
    Independent of the Hamiltonian path; used as its oracle.
    """
    a, w, q, u = _deflate(problem)
    n_red = a.shape[0]
    if n_red == 0:
        return _finish(problem, np.zeros((problem.n, problem.n)), iterations=0)
    if pi0 is not None:
        p = _as_square(pi0, "pi0")
        if u is not None:
            p = u.T @ p @ u
    else:
        p = _default_newton_start(a, w, q)

    iterations = 0
    while True:
        res = np.linalg.norm(a.T @ p + p @ a - p @ w @ p + q)
        if res < tol:
            return _finish(problem, _lift(p, u, problem.n), iterations=iterations)
        if iterations >= max_iter:
            raise NoConvergence(
                f"residual {res:.3e} after {max_iter} Newton iterations"
            )
        if np.abs(p).max() > _DIVERGENCE_LIMIT:
            raise DivergedIterate(f"iterate magnitude exceeds {_DIVERGENCE_LIMIT:.0e}")
        closed = a - w @ p
        if not _is_hurwitz(closed):
            raise NoConvergence("Newton iterate lost closed-loop stability")
        p = _solve_lyapunov(closed, -(q + p @ w @ p))
        iterations += 1
