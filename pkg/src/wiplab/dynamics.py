"""Planar wheeled-inverted-pendulum dynamics with a hybrid stick/slip contact.

Generalized coordinates are the axle translation p, the wheel angle phi and
the pole pitch beta (zero = upright).  The wheel is driven by a velocity-mode
PD actuator; traction between wheel and ground is resolved every physics step:
first the force required to maintain pure rolling is computed, and the contact
switches to kinetic Coulomb friction whenever that force leaves the friction
cone.

Integration is an explicit midpoint step at the physics rate (400 Hz) with the
contact mode and the kinetic traction force frozen over the step.  A plain
semi-implicit Euler step dissipates well over 1% of the mechanical energy on a
10 s torque-free swing at this rate; the midpoint step keeps the drift below
0.1% while preserving the per-step contact resolution.

All core routines are written against numpy ufuncs so the same code path
serves a single robot and a batch of independent robots (1-D arrays).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

PHYS_HZ = 400.0

# Slip speed below which the contact may re-enter stick (hysteresis guard
# against mode chattering).
STICK_REENTRY_TOL = 1e-6


class DynamicsError(Exception):
    """Base class for simulator failures."""


class SingularMass(DynamicsError):
    """Constrained mass matrix is singular; parameters are nonphysical."""


class NonFiniteState(DynamicsError):
    """Integration produced NaN/Inf; the episode must be terminated."""


class ContactMode(enum.Enum):
    STICK = "stick"
    SLIP = "slip"


@dataclass(frozen=True)
class WipParams:
    """Physical and actuator parameters of the planar WIP.

    Defaults are the canonical desk-scale plate: they are plausible for a
    small wheeled inverted pendulum and are owned by the run config, not by
    any hardware datasheet.
    """

    m_w: float = 1.0      # wheel mass [kg]
    m_p: float = 2.0      # pendulum mass [kg]
    r: float = 0.1        # wheel radius [m]
    l: float = 0.3        # axle -> pendulum COM distance [m]
    I_w: float = 0.005    # wheel inertia [kg m^2]
    I_p: float = 0.06     # pendulum inertia about COM [kg m^2]
    g: float = 9.81       # gravity [m/s^2]
    mu: float = 1.0       # contact coefficient of friction
    k_d: float = 3.0      # wheel velocity PD gain [N m s/rad]
    tau_max: float = 10.0  # actuator torque limit [N m]
    dt_phys: float = 1.0 / PHYS_HZ  # physics step [s]

    def __post_init__(self) -> None:
        for name in ("m_w", "m_p", "r", "l", "I_w", "I_p", "g", "dt_phys", "tau_max"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"WipParams.{name} must be strictly positive")
        if self.mu < 0.0:
            raise ValueError("WipParams.mu must be >= 0")
        if self.k_d < 0.0:
            raise ValueError("WipParams.k_d must be >= 0")

    @property
    def normal_force(self) -> float:
        """Quasi-static normal force: total weight (no lift-off modeled)."""
        return (self.m_w + self.m_p) * self.g


@dataclass(frozen=True)
class WipState:
    p: float = 0.0        # axle translation [m]
    p_dot: float = 0.0    # axle velocity [m/s]
    phi: float = 0.0      # wheel angle [rad]
    phi_dot: float = 0.0  # wheel angular velocity [rad/s]
    beta: float = 0.0     # pole pitch from upright [rad]
    beta_dot: float = 0.0  # pole pitch rate [rad/s]
    mode: ContactMode = ContactMode.STICK

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.p, self.p_dot, self.phi, self.phi_dot, self.beta, self.beta_dot)


def pd_torque(a, phi_dot, params: WipParams):
    """Velocity-mode PD wheel torque, clamped to the actuator limit."""
    return np.clip(params.k_d * (a - phi_dot), -params.tau_max, params.tau_max)


def _stick_system(beta, beta_dot, tau, params: WipParams):
    """Solve the rolling-constrained equations of motion.

    With p_ddot = r*phi_ddot substituted, the three Newton-Euler equations
    reduce to a 2x2 linear system in (phi_ddot, beta_ddot); the traction force
    follows from the wheel equation.  Returns (p_ddot, phi_ddot, beta_ddot,
    traction force).  Closed-form elimination keeps the solve branch-free and
    vectorizes over leading array dimensions.
    """
    m_tot = params.m_w + params.m_p
    ml = params.m_p * params.l
    I_pl = params.I_p + params.m_p * params.l ** 2
    r = params.r

    c = np.cos(beta)
    s = np.sin(beta)
    b1 = ml * s * beta_dot ** 2            # centrifugal term in the force balance
    b3 = -tau + params.m_p * params.g * params.l * s

    a11 = m_tot * r + params.I_w / r
    a12 = ml * c
    a21 = ml * c * r
    a22 = I_pl
    det = a11 * a22 - a12 * a21
    if np.any(np.abs(det) < 1e-12):
        raise SingularMass("rolling-constrained mass matrix is singular")

    rhs1 = b1 + tau / r
    phi_ddot = (rhs1 * a22 - a12 * b3) / det
    beta_ddot = (a11 * b3 - a21 * rhs1) / det
    force = (tau - params.I_w * phi_ddot) / r
    return r * phi_ddot, phi_ddot, beta_ddot, force


def _slip_system(beta, beta_dot, tau, force, params: WipParams):
    """Unconstrained accelerations given an applied traction force."""
    m_tot = params.m_w + params.m_p
    ml = params.m_p * params.l
    I_pl = params.I_p + params.m_p * params.l ** 2

    c = np.cos(beta)
    s = np.sin(beta)
    b1 = ml * s * beta_dot ** 2
    b3 = -tau + params.m_p * params.g * params.l * s

    det = m_tot * I_pl - (ml * c) ** 2     # > 0 for any physical parameters
    rhs1 = force + b1
    p_ddot = (rhs1 * I_pl - ml * c * b3) / det
    beta_ddot = (m_tot * b3 - ml * c * rhs1) / det
    phi_ddot = (tau - params.r * force) / params.I_w
    return p_ddot, phi_ddot, beta_ddot


def solve_stick_force(state: WipState, tau: float, params: WipParams) -> float:
    """Traction force required to keep p_ddot = r*phi_ddot this instant."""
    _, _, _, force = _stick_system(state.beta, state.beta_dot, float(tau), params)
    return float(force)


def stick_accelerations(beta, beta_dot, tau, params: WipParams):
    """(p_ddot, phi_ddot, beta_ddot, traction) of the rolling-mode dynamics."""
    return _stick_system(beta, beta_dot, tau, params)


def traction_force(state: WipState, a: float, params: WipParams) -> tuple[float, ContactMode]:
    """The traction force and contact mode `step` would apply from `state`."""
    tau = pd_torque(a, state.phi_dot, params)
    force, stick = _resolve_contact(
        state.p_dot, state.phi_dot, state.beta, state.beta_dot,
        state.mode is ContactMode.STICK, tau, params.mu, params,
    )
    mode = ContactMode.STICK if bool(stick) else ContactMode.SLIP
    return float(force), mode


def _resolve_contact(p_dot, phi_dot, beta, beta_dot, was_stick, tau, mu, params: WipParams):
    """Pick the contact mode and the traction force for this step.

    Stick applies whenever the force needed to maintain rolling fits in the
    friction cone; a slipping contact re-enters stick only once the slip speed
    has decayed below STICK_REENTRY_TOL (hysteresis).  Kinetic friction
    opposes the slip velocity, with sign(0) = 0.
    """
    n = (params.m_w + params.m_p) * params.g
    _, _, _, f_stick = _stick_system(beta, beta_dot, tau, params)
    slip_vel = p_dot - params.r * phi_dot
    stick_ok = np.abs(f_stick) <= mu * n
    stick = np.where(was_stick, stick_ok, (np.abs(slip_vel) < STICK_REENTRY_TOL) & stick_ok)
    f_slip = -mu * n * np.sign(slip_vel)
    force = np.where(stick, f_stick, f_slip)
    return force, stick


def _mode_accels(phi_dot, beta, beta_dot, stick, slip_force, a, params: WipParams):
    """Accelerations under the per-step contact mode and frozen slip force."""
    tau = pd_torque(a, phi_dot, params)
    pdd_st, phidd_st, betadd_st, _ = _stick_system(beta, beta_dot, tau, params)
    pdd_sl, phidd_sl, betadd_sl = _slip_system(beta, beta_dot, tau, slip_force, params)
    p_ddot = np.where(stick, pdd_st, pdd_sl)
    phi_ddot = np.where(stick, phidd_st, phidd_sl)
    beta_ddot = np.where(stick, betadd_st, betadd_sl)
    return p_ddot, phi_ddot, beta_ddot


def step_arrays(p, p_dot, phi, phi_dot, beta, beta_dot, was_stick, a, mu, params: WipParams):
    """One explicit midpoint step, vectorized over 1-D (or 0-D) arrays.

    `mu` may vary per element (per-episode friction randomization).  Returns
    the new state arrays plus the traction force applied at the start of the
    step; non-finite rows are the caller's responsibility (see `step` / the
    vectorized environment).
    """
    tau0 = pd_torque(a, phi_dot, params)
    force, stick = _resolve_contact(p_dot, phi_dot, beta, beta_dot, was_stick, tau0, mu, params)

    dt = params.dt_phys
    acc1 = _mode_accels(phi_dot, beta, beta_dot, stick, force, a, params)
    p_dot_m = p_dot + 0.5 * dt * acc1[0]
    phi_dot_m = phi_dot + 0.5 * dt * acc1[1]
    beta_m = beta + 0.5 * dt * beta_dot
    beta_dot_m = beta_dot + 0.5 * dt * acc1[2]
    acc2 = _mode_accels(phi_dot_m, beta_m, beta_dot_m, stick, force, a, params)

    phi_dot_n = phi_dot + acc2[1] * dt
    # Project stick rows exactly onto the rolling constraint so the residual
    # cannot accumulate across thousands of steps.
    p_dot_n = np.where(stick, params.r * phi_dot_n, p_dot + acc2[0] * dt)
    beta_dot_n = beta_dot + acc2[2] * dt

    phi_n = phi + phi_dot_m * dt
    p_n = np.where(stick, p + params.r * phi_dot_m * dt, p + p_dot_m * dt)
    beta_n = beta + beta_dot_m * dt
    return p_n, p_dot_n, phi_n, phi_dot_n, beta_n, beta_dot_n, stick, force


def step(state: WipState, a: float, params: WipParams) -> WipState:
    """Advance the simulator by one physics step under a held wheel command.

    The contact mode is resolved once at the start of the step: stick if the
    rolling-constraint force fits within mu*N (with hysteresis on re-entry
    from slip), kinetic Coulomb traction -mu*N*sign(p_dot - r*phi_dot)
    otherwise.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = step_arrays(
            np.float64(state.p), np.float64(state.p_dot), np.float64(state.phi),
            np.float64(state.phi_dot), np.float64(state.beta), np.float64(state.beta_dot),
            state.mode is ContactMode.STICK, np.float64(a), params.mu, params,
        )
    p, p_dot, phi, phi_dot, beta, beta_dot, stick, _ = out
    values = (float(p), float(p_dot), float(phi), float(phi_dot), float(beta), float(beta_dot))
    if not all(np.isfinite(v) for v in values):
        raise NonFiniteState("integration produced a non-finite state")
    return WipState(*values, mode=ContactMode.STICK if bool(stick) else ContactMode.SLIP)


def slip_ratio(state: WipState, params: WipParams) -> float:
    """Normalized slip: (r*phi_dot - p_dot) / (2*pi*r)."""
    if not params.r > 0:
        raise ValueError("wheel radius must be positive")
    return (params.r * state.phi_dot - state.p_dot) / (2.0 * np.pi * params.r)


def friction_sign_estimate(gamma, mu):
    """Signed friction estimate mu*sign(gamma), with sign(0) = 0."""
    return mu * np.sign(gamma)


def total_energy(state: WipState, params: WipParams) -> float:
    """Mechanical energy; pendulum potential referenced to the axle height."""
    p_dot, phi_dot, beta, beta_dot = state.p_dot, state.phi_dot, state.beta, state.beta_dot
    v_com_sq = p_dot ** 2 + 2.0 * params.l * np.cos(beta) * p_dot * beta_dot \
        + (params.l * beta_dot) ** 2
    kinetic = 0.5 * (params.m_w * p_dot ** 2 + params.I_w * phi_dot ** 2
                     + params.m_p * v_com_sq + params.I_p * beta_dot ** 2)
    potential = params.m_p * params.g * params.l * np.cos(beta)
    return float(kinetic + potential)


def with_mode(state: WipState, mode: ContactMode) -> WipState:
    return replace(state, mode=mode)
