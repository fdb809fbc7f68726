"""Frozen-coefficient Riccati feedback for the opinion pair, closed-loop
integration, and an open-loop baseline from first-order optimality
conditions.

At every state the drift matrix A(z) is frozen and the resulting
algebraic Riccati equation is solved. For this model the consensus
direction (1, 1) is both drift-free and cost-free, so the solution is
rank one,

    Pi(z) = a(z) * [[1, -1], [-1, 1]],

with a(z) the nonnegative root of a scalar quadratic (see
:func:`riccati_coefficient`). This closed form is what the generic
solvers in :mod:`opinionctrl.riccati` produce after deflation; they are
cross-checked against it in the test suite. All feedback evaluation is
vectorized and purely elementwise, which makes single-pair and batched
paths bit-identical.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from opinionctrl import model
from opinionctrl.errors import SchemaError
from opinionctrl.model import ModelConfig

__all__ = [
    "NonFiniteState",
    "FeedbackEval",
    "TrajectoryRecord",
    "riccati_coefficient",
    "feedback_arrays",
    "sdre_feedback",
    "pair_controls",
    "pair_controls_arrays",
    "control_from_grad",
    "make_pair_controller",
    "integrate_closed_loop",
    "pmp_open_loop",
    "CONTROLLER_TAGS",
]

CONTROLLER_TAGS = ("none", "sdre", "nn_value", "nn_direct", "openloop")

TRAJECTORY_HEADER = ["t", "xi", "xj", "ui", "uj", "cost", "gap"]


class NonFiniteState(RuntimeError):
    """Trajectory integration produced a non-finite state."""


def riccati_coefficient(xi, xbar, cfg: ModelConfig):
    """Scalar a(z) of the rank-one Riccati solution Pi = a K, K = [[1,-1],[-1,1]].

    Because A(z) and Q both annihilate (1, 1) and the control weight is
    positive definite, every PSD solution satisfies Pi (1,1)' = 0; on the
    disagreement direction the Riccati equation collapses to

        (2/r) a^2 - 2 (Pbar - P) a - 1 = 0,

    whose nonnegative root is returned. Vectorized over states.
    """
    p, pbar = model.semilinear_factors(xi, xbar, cfg)
    d = pbar - p
    r = cfg.r
    return 0.5 * r * (d + np.sqrt(d * d + 2.0 / r))


def control_from_grad(grad, cfg: ModelConfig):
    """Feedback from a value gradient: u = -(1/2) R^{-1} B' grad with
    B = I and R = r I. Used verbatim for both Riccati and neural-network
    gradients so the two controller paths share their arithmetic."""
    return -0.5 * (1.0 / cfg.r) * grad


def feedback_arrays(xi, xbar, cfg: ModelConfig):
    """Vectorized feedback quantities at transformed states.

    Returns (a, V, (g1, g2), (u1, u2)) with V = z'Pi z, grad = 2 Pi z and
    u = -(1/2) R^{-1} B' grad. All operations are elementwise.
    """
    a = riccati_coefficient(xi, xbar, cfg)
    s = xi - xbar
    value = a * s * s
    g1 = 2.0 * a * s
    u1 = control_from_grad(g1, cfg)
    return a, value, (g1, -g1), (u1, -u1)


@dataclass
class FeedbackEval:
    """Feedback at one transformed state: control u, frozen Riccati
    solution Pi, value V = z'Pi z and gradient 2 Pi z."""

    u: np.ndarray
    Pi: np.ndarray
    V: float
    gradV: np.ndarray


def sdre_feedback(xi: float, xbar: float, cfg: ModelConfig) -> FeedbackEval:
    """Solve the frozen Riccati equation at (x_i, xbar) and assemble the
    feedback. At consensus states the control and value vanish exactly."""
    a, value, (g1, g2), (u1, u2) = feedback_arrays(
        np.float64(xi), np.float64(xbar), cfg
    )
    a = float(a)
    pi = np.array([[a, -a], [-a, a]])
    return FeedbackEval(
        u=np.array([u1, u2]),
        Pi=pi,
        V=float(value),
        gradV=np.array([g1, g2]),
    )


def pair_controls_arrays(xi, xj, cfg: ModelConfig):
    """Per-agent controls for pair arrays: each agent receives the first
    control component of its own frozen problem, both sharing the pair
    mean."""
    xbar = 0.5 * (xi + xj)
    _, _, _, (ui, _) = feedback_arrays(xi, xbar, cfg)
    _, _, _, (uj, _) = feedback_arrays(xj, xbar, cfg)
    return ui, uj


def pair_controls(xi: float, xj: float, cfg: ModelConfig) -> tuple[float, float]:
    """Controls (u_i, u_j) received by the two agents of a pair."""
    ui, uj = pair_controls_arrays(np.float64(xi), np.float64(xj), cfg)
    return float(ui), float(uj)


def make_pair_controller(controller, cfg: ModelConfig, net_value=None,
                         net_control=None):
    """Resolve a controller tag (or callable) to a callable
    (xi_array, xj_array) -> (ui_array, uj_array), or None for 'none'.

    'nn_value' needs a scalar value network, 'nn_direct' a two-output
    control network; both are evaluated at (own opinion, pair mean) and
    the agent takes the first control component.
    """
    if callable(controller):
        return controller
    if controller in (None, "none"):
        return None
    if controller == "sdre":
        return lambda xi, xj: pair_controls_arrays(xi, xj, cfg)
    if controller == "nn_value":
        if net_value is None:
            raise ValueError("controller 'nn_value' requires a value network")

        def _value_ctrl(xi, xj):
            xbar = 0.5 * (xi + xj)
            _, gi = net_value.value_and_grad_batch(np.column_stack([xi, xbar]))
            _, gj = net_value.value_and_grad_batch(np.column_stack([xj, xbar]))
            return (
                control_from_grad(gi[:, 0], cfg),
                control_from_grad(gj[:, 0], cfg),
            )

        return _value_ctrl
    if controller == "nn_direct":
        if net_control is None:
            raise ValueError("controller 'nn_direct' requires a control network")

        def _direct_ctrl(xi, xj):
            xbar = 0.5 * (xi + xj)
            ui = net_control.forward_batch(np.column_stack([xi, xbar]))[:, 0]
            uj = net_control.forward_batch(np.column_stack([xj, xbar]))[:, 0]
            return ui, uj

        return _direct_ctrl
    raise ValueError(f"unknown controller {controller!r}")


@dataclass
class TrajectoryRecord:
    """Time series of one controlled pair.

    Arrays share a common length; ``cost`` holds the instantaneous
    quadratic cost (transformed coordinates) and ``gap`` the consensus
    gap |x_i - x_j|. ``converged`` is only meaningful for the open-loop
    baseline.
    """

    times: np.ndarray
    xi: np.ndarray
    xj: np.ndarray
    ui: np.ndarray
    uj: np.ndarray
    cost: np.ndarray
    gap: np.ndarray
    clamp_hits: int = 0
    converged: bool = True

    def total_cost(self) -> float:
        """Left-endpoint quadrature of the running cost."""
        return float(np.sum(self.cost[:-1] * np.diff(self.times)))

    def to_csv(self, path) -> None:
        lines = [",".join(TRAJECTORY_HEADER)]
        for k in range(len(self.times)):
            lines.append(
                ",".join(
                    repr(float(v))
                    for v in (
                        self.times[k], self.xi[k], self.xj[k],
                        self.ui[k], self.uj[k], self.cost[k], self.gap[k],
                    )
                )
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrajectoryRecord":
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln]
        if not lines or lines[0].split(",") != TRAJECTORY_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        if data.size == 0:
            raise SchemaError(f"{path}: no data rows")
        return cls(*(data[:, k] for k in range(7)))


def _running_cost(xi, xj, ui, uj, cfg: ModelConfig):
    """z'Qz + u'Ru in transformed coordinates; the pair's transformed
    control is (u_i, (u_i + u_j)/2)."""
    xbar = 0.5 * (xi + xj)
    uz2 = 0.5 * (ui + uj)
    return (xi - xbar) ** 2 + cfg.r * (ui * ui + uz2 * uz2)


def integrate_closed_loop(s0, controller, dt: float, horizon: float,
                          cfg: ModelConfig, net_value=None,
                          net_control=None, max_sweeps: int = 200,
                          sweep_tol: float = 1e-6) -> TrajectoryRecord:
    """Forward-Euler integration of the controlled pair, states clamped
    to the opinion interval after every step.

    ``controller`` is one of 'none' | 'sdre' | 'nn_value' | 'nn_direct' |
    'openloop' or a callable; 'openloop' delegates to
    :func:`pmp_open_loop` on the same grid.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    if controller == "openloop":
        return pmp_open_loop(s0, horizon, dt, cfg,
                             max_sweeps=max_sweeps, tol=sweep_tol)
    ctrl = make_pair_controller(controller, cfg, net_value, net_control)
    n_steps = int(round(horizon / dt))
    xi = np.array([float(s0[0])])
    xj = np.array([float(s0[1])])
    cols = {name: np.empty(n_steps + 1) for name in ("xi", "xj", "ui", "uj", "cost", "gap")}
    clamp_hits = 0
    for k in range(n_steps + 1):
        if ctrl is None:
            ui = np.zeros(1)
            uj = np.zeros(1)
        else:
            ui, uj = ctrl(xi, xj)
        cols["xi"][k] = xi[0]
        cols["xj"][k] = xj[0]
        cols["ui"][k] = ui[0]
        cols["uj"][k] = uj[0]
        cols["cost"][k] = _running_cost(xi, xj, ui, uj, cfg)[0]
        cols["gap"][k] = abs(xi[0] - xj[0])
        if k < n_steps:
            xi, xj, clamped = model.pair_step(xi, xj, ui, uj, dt, cfg)
            clamp_hits += int(np.count_nonzero(clamped))
            if not (np.isfinite(xi[0]) and np.isfinite(xj[0])):
                raise NonFiniteState(f"state non-finite at t={dt * (k + 1):.6g}")
    return TrajectoryRecord(
        times=dt * np.arange(n_steps + 1),
        xi=cols["xi"], xj=cols["xj"], ui=cols["ui"], uj=cols["uj"],
        cost=cols["cost"], gap=cols["gap"], clamp_hits=clamp_hits,
    )


def _drift_and_jacobian(x: float, m: float, beta: float):
    """Transformed drift f(z) = (f1, f2) at z = (x_i, xbar) and its
    Jacobian, used by the adjoint sweep."""
    xj = 2.0 * m - x
    f1 = beta * (1.0 - x * x) * (m - x)
    w = xj * xj - x * x
    f2 = 0.5 * beta * (m - x) * w
    j11 = beta * (-2.0 * x * (m - x) - (1.0 - x * x))
    j12 = beta * (1.0 - x * x)
    dw_dx = -2.0 * xj - 2.0 * x
    dw_dm = 4.0 * xj
    j21 = 0.5 * beta * (-w + (m - x) * dw_dx)
    j22 = 0.5 * beta * (w + (m - x) * dw_dm)
    return f1, f2, j11, j12, j21, j22


def _openloop_forward(z0, u, dt, cfg, keep_states):
    """Euler forward pass; returns (cost, states or None)."""
    x, m = z0
    r = cfg.r
    beta = cfg.beta
    n = len(u)
    states = np.empty((n + 1, 2)) if keep_states else None
    cost = 0.0
    for k in range(n):
        if keep_states:
            states[k, 0] = x
            states[k, 1] = m
        u1 = u[k, 0]
        u2 = u[k, 1]
        s = x - m
        cost += dt * (s * s + r * (u1 * u1 + u2 * u2))
        f1, f2, *_ = _drift_and_jacobian(x, m, beta)
        x += dt * (f1 + u1)
        m += dt * (f2 + u2)
    if keep_states:
        states[n, 0] = x
        states[n, 1] = m
    return cost, states


def _openloop_adjoint(states, dt, cfg):
    """Exact discrete adjoint of the Euler scheme; lam[k] = dJ/dz_k."""
    n = len(states) - 1
    beta = cfg.beta
    lam = np.zeros((n + 1, 2))
    l1 = 0.0
    l2 = 0.0
    for k in range(n - 1, -1, -1):
        x, m = states[k]
        _, _, j11, j12, j21, j22 = _drift_and_jacobian(x, m, beta)
        s = x - m
        n1 = dt * 2.0 * s + l1 + dt * (j11 * l1 + j21 * l2)
        n2 = dt * (-2.0) * s + l2 + dt * (j12 * l1 + j22 * l2)
        l1, l2 = n1, n2
        lam[k, 0] = l1
        lam[k, 1] = l2
    return lam


def pmp_open_loop(s0, horizon: float, dt: float, cfg: ModelConfig,
                  max_sweeps: int = 200, tol: float = 1e-6) -> TrajectoryRecord:
    """Open-loop control of the pair over a finite horizon by a
    forward-backward sweep.

    Forward state pass with the current control, exact discrete adjoint
    pass, candidate update u <- -(1/2) R^{-1} B' lam with Armijo
    backtracking on the discrete cost. Starts from u = 0, so the
    returned cost never exceeds the uncontrolled one. On failure to
    converge the best iterate is returned with ``converged=False`` and a
    warning.
    """
    if not dt > 0.0 or not horizon > 0.0:
        raise ValueError("dt and horizon must be positive")
    n = int(round(horizon / dt))
    z0 = model.to_transformed(float(s0[0]), float(s0[1]))
    r = cfg.r
    u = np.zeros((n, 2))
    cost, states = _openloop_forward(z0, u, dt, cfg, keep_states=True)
    converged = False
    for _ in range(max_sweeps):
        lam = _openloop_adjoint(states, dt, cfg)
        cand = -(0.5 / r) * lam[1:]
        direction = cand - u
        if np.abs(direction).max() < tol:
            converged = True
            break
        grad = dt * (2.0 * r * u + lam[1:])
        slope = float(np.sum(grad * direction))
        step = 1.0
        accepted = False
        while step > 1e-12:
            trial = u + step * direction
            trial_cost, _ = _openloop_forward(z0, trial, dt, cfg, keep_states=False)
            if trial_cost <= cost + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        u = u + step * direction
        cost, states = _openloop_forward(z0, u, dt, cfg, keep_states=True)
    if not converged:
        warnings.warn("open-loop sweep did not converge; returning best iterate",
                      RuntimeWarning)

    times = dt * np.arange(n + 1)
    xi = states[:, 0]
    xj = 2.0 * states[:, 1] - states[:, 0]
    # final node repeats the last control so all columns share a length
    u_full = np.vstack([u, u[-1]]) if n else np.zeros((1, 2))
    ui = u_full[:, 0]
    uj = 2.0 * u_full[:, 1] - u_full[:, 0]
    s = states[:, 0] - states[:, 1]
    cost_nodes = s * s + r * (u_full[:, 0] ** 2 + u_full[:, 1] ** 2)
    return TrajectoryRecord(
        times=times, xi=xi, xj=xj, ui=ui, uj=uj,
        cost=cost_nodes, gap=np.abs(xi - xj), converged=converged,
    )
