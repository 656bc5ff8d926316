"""Classical LQR baseline: linearized stick-mode model, DARE synthesis, and a
tracking control law mapped onto the shared velocity-command actuator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import WipParams, WipState
from .env import DECISION_DT


class BaselineError(Exception):
    pass


class NoConvergence(BaselineError):
    """Riccati iteration failed; the model is unstabilizable or Q/R are bad."""


@dataclass(frozen=True)
class LinearModel:
    """Discrete model over [p, p_dot, beta, beta_dot] with torque input."""

    A: np.ndarray          # 4x4
    B: np.ndarray          # 4x1
    dt: float
    A_cont: np.ndarray     # continuous-time counterparts, kept for inspection
    B_cont: np.ndarray


@dataclass(frozen=True)
class LqrGains:
    K: np.ndarray          # 1x4
    P: np.ndarray          # 4x4 symmetric PSD


def continuous_linearization(params: WipParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobian of the rolling-mode dynamics at the upright rest point."""
    m_tot = params.m_w + params.m_p
    ml = params.m_p * params.l
    I_pl = params.I_p + params.m_p * params.l ** 2
    a11 = m_tot + params.I_w / params.r ** 2
    det = a11 * I_pl - ml ** 2
    if abs(det) < 1e-12:
        from .dynamics import SingularMass
        raise SingularMass("linearized mass matrix is singular")

    dpdd_dbeta = -(ml ** 2) * params.g / det
    dpdd_dtau = (I_pl / params.r + ml) / det
    dbdd_dbeta = a11 * params.m_p * params.g * params.l / det
    dbdd_dtau = -(a11 + ml / params.r) / det

    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, dpdd_dbeta, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, dbdd_dbeta, 0.0],
    ])
    B = np.array([[0.0], [dpdd_dtau], [0.0], [dbdd_dtau]])
    return A, B


def linearize(params: WipParams, dt: float = DECISION_DT) -> LinearModel:
    """Zero-order-hold discretization of the upright linearization."""
    A, B = continuous_linearization(params)
    n = A.shape[0]
    block = np.zeros((n + 1, n + 1))
    block[:n, :n] = A * dt
    block[:n, n:] = B * dt
    expm = scipy.linalg.expm(block)
    return LinearModel(A=expm[:n, :n], B=expm[:n, n:], dt=dt, A_cont=A, B_cont=B)


def dare_solve(model: LinearModel, Q: np.ndarray, R: float,
               tol: float = 1e-12, max_iter: int = 100_000) -> LqrGains:
    """Fixed-point iteration of the discrete Riccati recursion."""
    A, B = model.A, model.B
    Q = np.asarray(Q, dtype=np.float64)
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    P = Q.copy()
    for _ in range(max_iter):
        BtPB = B.T @ P @ B
        gain = np.linalg.solve(R + BtPB, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e12:
            raise NoConvergence("Riccati iteration diverged")
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise NoConvergence(f"Riccati iteration did not converge in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return LqrGains(K=K, P=P)


def dare_residual(model: LinearModel, Q: np.ndarray, R: float, P: np.ndarray) -> float:
    A, B = model.A, model.B
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    inner = A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(P - (Q + A.T @ P @ A - inner))))


def closed_loop_radius(model: LinearModel, gains: LqrGains) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(model.A - model.B @ gains.K))))


# Default weights, tuned on the high-friction configuration (config values,
# not hardware-derived).
DEFAULT_Q = np.diag([10.0, 1.0, 50.0, 1.0])
DEFAULT_R = 0.1


def lqr_action(gains: LqrGains, state: WipState, cmd_sample: tuple[float, float],
               params: WipParams, v_max: float = 20.0) -> float:
    """Tracking law: torque u = -K e mapped through the inverse PD relation."""
    if not params.k_d > 0:
        raise BaselineError("the velocity interface needs k_d > 0")
    c_pos, c_vel = cmd_sample
    err = np.array([state.p - c_pos, state.p_dot - c_vel, state.beta, state.beta_dot])
    u = float(-(gains.K @ err)[0])
    return float(np.clip(state.phi_dot + u / params.k_d, -v_max, v_max))


class LqrController:
    """Batch-friendly controller sharing the simulator's velocity interface.

    Friction-blind by construction: the action depends only on the tracking
    error state, never on mu.
    """

    def __init__(self, params: WipParams, Q: np.ndarray | None = None,
                 R: float | None = None, v_max: float = 20.0):
        self.params = params
        self.model = linearize(params)
        self.gains = dare_solve(self.model,
                                DEFAULT_Q if Q is None else Q,
                                DEFAULT_R if R is None else R)
        self.v_max = v_max

    def act(self, snapshot: dict) -> np.ndarray:
        err = np.stack([
            snapshot["p"] - snapshot["c_pos"],
            snapshot["p_dot"] - snapshot["c_vel"],
            snapshot["beta"],
            snapshot["beta_dot"],
        ], axis=1)
        u = -(err @ self.gains.K.T)[:, 0]
        return np.clip(snapshot["phi_dot"] + u / self.params.k_d,
                       -self.v_max, self.v_max)
