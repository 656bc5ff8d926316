"""RL environment around the slip-capable simulator.

Builds the 10-entry policy observation (with a privileged-translation training
variant and a wheel-odometry deployment variant), evaluates the five-component
reward, the curriculum gate, and quintic position commands, and batches many
independent episodes at the 50 Hz decision rate (8 physics sub-steps per
decision).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics
from .dynamics import ContactMode, WipParams, WipState

OBS_FIELDS = (
    "x_w", "x_w_dot", "beta", "beta_dot", "x_tr", "x_tr_dot",
    "a_prev", "c_pos", "c_vel", "mu_hat",
)
OBS_DIM = len(OBS_FIELDS)
PROPRIO_DIM = OBS_DIM - 1          # everything except the friction slot
MU_HAT_SLOT = OBS_DIM - 1
XTR_SLOTS = (4, 5)

MU_MAX = 2.0                       # clamp for any friction estimate fed to a policy
COMMAND_RANGE = 0.3                # |target| bound [m]
DECIMATION = 8                     # physics steps per policy decision (400/50)
DECISION_DT = DECIMATION / dynamics.PHYS_HZ


class EnvError(Exception):
    """Base class for environment failures."""


class EpisodeFinished(EnvError):
    """step() was called on an episode that already terminated."""


class ObsMode(enum.Enum):
    TRAINING = "training"        # privileged translation-joint readings
    DEPLOYMENT = "deployment"    # translation slots filled from wheel odometry


@dataclass(frozen=True)
class Observation:
    x_w: float
    x_w_dot: float
    beta: float
    beta_dot: float
    x_tr: float
    x_tr_dot: float
    a_prev: float
    c_pos: float
    c_vel: float
    mu_hat: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in OBS_FIELDS], dtype=np.float64)


@dataclass(frozen=True)
class Command:
    """Quintic point-to-point position command with rest boundary conditions."""

    target: float
    duration: float

    def __post_init__(self) -> None:
        if abs(self.target) > COMMAND_RANGE + 1e-12:
            raise ValueError(f"command target {self.target} outside +-{COMMAND_RANGE} m")
        if not self.duration > 0:
            raise ValueError("command duration must be positive")

    @property
    def coeffs(self) -> tuple[float, float, float]:
        """(c3, c4, c5); c0..c2 vanish under the rest boundary conditions."""
        d, T = self.target, self.duration
        return (10.0 * d / T ** 3, -15.0 * d / T ** 4, 6.0 * d / T ** 5)


def quintic_sample(cmd: Command, t: float) -> tuple[float, float]:
    """Commanded (position, velocity) at time t; holds the target after T."""
    if t < 0:
        raise ValueError("t must be >= 0")
    pos, vel = _quintic_arrays(np.float64(cmd.target), np.float64(cmd.duration),
                               np.float64(t))
    return float(pos), float(vel)


def _quintic_arrays(target, duration, t):
    """Vectorized quintic evaluation with per-element hold past duration."""
    tau = np.minimum(t, duration)
    c3 = 10.0 * target / duration ** 3
    c4 = -15.0 * target / duration ** 4
    c5 = 6.0 * target / duration ** 5
    pos = ((c5 * tau + c4) * tau + c3) * tau ** 3
    vel = ((5.0 * c5 * tau + 4.0 * c4) * tau + 3.0 * c3) * tau ** 2
    vel = np.where(t > duration, 0.0, vel)
    return pos, vel


@dataclass
class CurriculumState:
    """Running mean episode length driving the balance-to-tracking schedule."""

    mean_ep_len: float
    T_max: int

    def __post_init__(self) -> None:
        if not self.T_max > 0:
            raise ValueError("T_max must be positive")
        if not 0.0 <= self.mean_ep_len <= self.T_max:
            raise ValueError("mean_ep_len must lie in [0, T_max]")


def curriculum_gate(cs: CurriculumState) -> float:
    """Gate zeta = (tanh(mean/T_max * 8 - 3) + 1) / 2, in (0, 1)."""
    return (math.tanh(cs.mean_ep_len / cs.T_max * 8.0 - 3.0) + 1.0) / 2.0


@dataclass(frozen=True)
class RewardConfig:
    a_low: float = 0.01              # output penalty at zeta = 0
    a_high: float = 0.1              # output penalty at zeta = 1
    slip_weight: float = 3.0
    velocity_penalty: float = 0.01
    pitch_rate_penalty: float = 0.005
    tracking_weight: float = 0.3
    tracking_offset: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.a_low <= self.a_high:
            raise ValueError("require 0 <= a_low <= a_high")


def reward_terms(p_dot, phi_dot, beta, beta_dot, action, zeta, e_t,
                 cfg: RewardConfig, params: WipParams):
    """Five-component reward, vectorized; see `reward` for the scalar API."""
    balance = 1.0 - beta ** 2
    oscillation = cfg.velocity_penalty * np.abs(p_dot) + cfg.pitch_rate_penalty * np.abs(beta_dot)
    slip = cfg.slip_weight * np.abs(p_dot - params.r * phi_dot)
    a_sq = action ** 2
    tracking = cfg.tracking_weight * zeta / (e_t + cfg.tracking_offset) * a_sq
    output = (cfg.a_low + (cfg.a_high - cfg.a_low) * zeta) * a_sq
    return balance - oscillation - slip + tracking - output


def reward(state: WipState, action: float, zeta: float, e_t: float,
           cfg: RewardConfig, params: WipParams) -> float:
    """Balance + anti-oscillation + anti-slip + gated tracking - output penalty."""
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must lie in [0, 1]")
    if e_t < 0.0:
        raise ValueError("tracking error must be >= 0")
    return float(reward_terms(state.p_dot, state.phi_dot, state.beta, state.beta_dot,
                              action, zeta, e_t, cfg, params))


def observe(state: WipState, a_prev: float, cmd_sample: tuple[float, float],
            mu_hat: float, mode: ObsMode, params: WipParams) -> Observation:
    """Assemble the policy observation.

    Training mode exposes the privileged translation joint; deployment mode
    substitutes wheel odometry (r * wheel angle, in meters) for it, which
    diverges from the truth exactly when slip has accumulated.
    """
    if mode is ObsMode.TRAINING:
        x_tr, x_tr_dot = state.p, state.p_dot
    else:
        x_tr, x_tr_dot = params.r * state.phi, params.r * state.phi_dot
    c_pos, c_vel = cmd_sample
    return Observation(
        x_w=state.phi,
        x_w_dot=state.phi_dot,
        beta=state.beta,
        beta_dot=state.beta_dot,
        x_tr=x_tr,
        x_tr_dot=x_tr_dot,
        a_prev=a_prev,
        c_pos=c_pos,
        c_vel=c_vel,
        mu_hat=float(np.clip(mu_hat, 0.0, MU_MAX)),
    )


def randomize_friction(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Per-episode uniform friction draw."""
    if not 0.0 <= lo <= hi:
        raise ValueError("require 0 <= lo <= hi")
    return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class EpisodeSettings:
    """Episode shape shared by training and evaluation.

    Episodes start mid-disturbance (random pitch and pitch rate): recovering
    from a tilt is where traction demand actually meets the friction cone, so
    the initial-state spread is what makes ground friction matter.
    """

    T_max: int = 1000                 # decision steps (20 s at 50 Hz)
    beta_fail: float = 0.6            # |beta| beyond which the episode fails [rad]
    command_duration: float = 4.0     # quintic duration [s]
    init_beta_range: float = 0.25     # initial pitch ~ U(-range, +range)
    init_beta_dot_range: float = 2.0  # initial pitch rate ~ U(-range, +range)


class WipEnv:
    """Single-episode environment at the 50 Hz decision rate.

    One quintic command per episode; the tracking error fed to the reward is
    the absolute gap between the true translation and the commanded position
    at the post-step time.  `zeta` is owned by the trainer (curriculum) and
    may be updated between decisions.
    """

    def __init__(self, params: WipParams, reward_cfg: RewardConfig, command: Command,
                 mu: float, mu_hat: float, settings: EpisodeSettings = EpisodeSettings(),
                 init_beta: float = 0.0, init_beta_dot: float = 0.0,
                 obs_mode: ObsMode = ObsMode.TRAINING,
                 zero_x_tr: bool = False, zeta: float = 0.0):
        self.params = replace(params, mu=float(mu))
        self.reward_cfg = reward_cfg
        self.command = command
        self.mu_hat = mu_hat
        self.settings = settings
        self.obs_mode = obs_mode
        self.zero_x_tr = zero_x_tr
        self.zeta = zeta
        self.init_beta = init_beta
        self.init_beta_dot = init_beta_dot
        self.reset()

    def reset(self) -> Observation:
        self.state = WipState(beta=self.init_beta, beta_dot=self.init_beta_dot)
        self.t_step = 0
        self.a_prev = 0.0
        self.done = False
        return self._observe()

    def _observe(self) -> Observation:
        t = self.t_step * DECISION_DT
        obs = observe(self.state, self.a_prev, quintic_sample(self.command, t),
                      self.mu_hat, self.obs_mode, self.params)
        if self.zero_x_tr:
            obs = replace(obs, x_tr=0.0, x_tr_dot=0.0)
        return obs

    def step(self, action: float) -> tuple[Observation, float, bool, dict]:
        if self.done:
            raise EpisodeFinished("episode already terminated")
        for _ in range(DECIMATION):
            self.state = dynamics.step(self.state, action, self.params)
        self.t_step += 1
        t = self.t_step * DECISION_DT
        c_pos, c_vel = quintic_sample(self.command, t)
        e_t = abs(self.state.p - c_pos)
        rew = reward(self.state, action, self.zeta, e_t, self.reward_cfg, self.params)
        fell = abs(self.state.beta) > self.settings.beta_fail
        timeout = self.t_step >= self.settings.T_max
        self.done = fell or timeout
        self.a_prev = action
        info = {
            "slip_ratio": dynamics.slip_ratio(self.state, self.params),
            "mode": self.state.mode,
            "e_t": e_t,
            "p": self.state.p,
            "fell": fell,
            "timeout": timeout,
        }
        return self._observe(), rew, self.done, info


class VecWipEnv:
    """Batch of independent episodes stepped in lockstep (vectorized numpy).

    Episode parameters (friction, command target, initial pitch, friction
    estimate) are drawn from dedicated rng streams at every reset, in
    environment-index order, so a fixed seed reproduces the whole batch
    bit-for-bit.  With `auto_reset` the batch runs forever (training); without
    it, finished rows freeze (evaluation).
    """

    def __init__(self, n_env: int, params: WipParams, reward_cfg: RewardConfig,
                 rngs: dict[str, np.random.Generator],
                 friction_fn, mu_hat_fn,
                 settings: EpisodeSettings = EpisodeSettings(),
                 command_range: float = COMMAND_RANGE,
                 obs_mode: ObsMode = ObsMode.TRAINING,
                 zero_x_tr: bool = False, auto_reset: bool = True):
        self.n = n_env
        self.params = params
        self.reward_cfg = reward_cfg
        self.rngs = rngs
        self.friction_fn = friction_fn   # (rng, size) -> mu array
        self.mu_hat_fn = mu_hat_fn       # (mu array, rng) -> mu_hat array
        self.settings = settings
        self.command_range = command_range
        self.obs_mode = obs_mode
        self.zero_x_tr = zero_x_tr
        self.auto_reset = auto_reset
        self.zeta = 0.0
        self.completed_lengths: list[int] = []

        z = np.zeros(n_env)
        self.p, self.p_dot = z.copy(), z.copy()
        self.phi, self.phi_dot = z.copy(), z.copy()
        self.beta, self.beta_dot = z.copy(), z.copy()
        self.stick = np.ones(n_env, dtype=bool)
        self.mu = np.ones(n_env)
        self.mu_hat = np.zeros(n_env)
        self.cmd_target = np.zeros(n_env)
        self.cmd_T = np.full(n_env, settings.command_duration)
        self.a_prev = np.zeros(n_env)
        self.t_step = np.zeros(n_env, dtype=np.int64)
        self.frozen = np.zeros(n_env, dtype=bool)

    def reset_all(self) -> np.ndarray:
        self._reset_rows(np.arange(self.n))
        self.frozen[:] = False
        return self.observations()

    def _reset_rows(self, idx: np.ndarray) -> None:
        if len(idx) == 0:
            return
        k = len(idx)
        self.mu[idx] = self.friction_fn(self.rngs["friction"], k)
        self.cmd_target[idx] = self.rngs["command"].uniform(
            -self.command_range, self.command_range, k)
        for arr in (self.p, self.p_dot, self.phi, self.phi_dot, self.a_prev):
            arr[idx] = 0.0
        self.beta[idx] = self.rngs["reset"].uniform(
            -self.settings.init_beta_range, self.settings.init_beta_range, k)
        self.beta_dot[idx] = self.rngs["reset"].uniform(
            -self.settings.init_beta_dot_range, self.settings.init_beta_dot_range, k)
        self.mu_hat[idx] = self.mu_hat_fn(self.mu[idx], self.rngs["noise"])
        self.stick[idx] = True
        self.t_step[idx] = 0

    def set_episode_conditions(self, mu, cmd_target, init_beta, init_beta_dot, mu_hat) -> None:
        """Pin per-row episode conditions (paired evaluation); overwrites the
        draws made by reset_all."""
        self.mu[:] = mu
        self.cmd_target[:] = cmd_target
        self.beta[:] = init_beta
        self.beta_dot[:] = init_beta_dot
        self.mu_hat[:] = mu_hat

    def command_sample(self, t_step=None):
        t = (self.t_step if t_step is None else t_step) * DECISION_DT
        return _quintic_arrays(self.cmd_target, self.cmd_T, t)

    def observations(self) -> np.ndarray:
        c_pos, c_vel = self.command_sample()
        obs = np.empty((self.n, OBS_DIM))
        obs[:, 0] = self.phi
        obs[:, 1] = self.phi_dot
        obs[:, 2] = self.beta
        obs[:, 3] = self.beta_dot
        if self.obs_mode is ObsMode.TRAINING:
            obs[:, 4] = self.p
            obs[:, 5] = self.p_dot
        else:
            obs[:, 4] = self.params.r * self.phi
            obs[:, 5] = self.params.r * self.phi_dot
        if self.zero_x_tr:
            obs[:, 4] = 0.0
            obs[:, 5] = 0.0
        obs[:, 6] = self.a_prev
        obs[:, 7] = c_pos
        obs[:, 8] = c_vel
        obs[:, 9] = np.clip(self.mu_hat, 0.0, MU_MAX)
        return obs

    def state_snapshot(self) -> dict[str, np.ndarray]:
        c_pos, c_vel = self.command_sample()
        return {
            "p": self.p.copy(), "p_dot": self.p_dot.copy(),
            "phi": self.phi.copy(), "phi_dot": self.phi_dot.copy(),
            "beta": self.beta.copy(), "beta_dot": self.beta_dot.copy(),
            "c_pos": c_pos, "c_vel": c_vel, "mu": self.mu.copy(),
            "t_step": self.t_step.copy(),
        }

    def step(self, actions: np.ndarray):
        """Advance every non-frozen row one decision (8 physics sub-steps)."""
        act = np.where(self.frozen, 0.0, actions)
        live = ~self.frozen
        p, p_dot = self.p, self.p_dot
        phi, phi_dot = self.phi, self.phi_dot
        beta, beta_dot = self.beta, self.beta_dot
        stick = self.stick
        slip_dist = np.zeros(self.n)
        for _ in range(DECIMATION):
            p, p_dot, phi, phi_dot, beta, beta_dot, stick, _f = dynamics.step_arrays(
                p, p_dot, phi, phi_dot, beta, beta_dot, stick, act, self.mu, self.params)
            slip_dist += np.abs(p_dot - self.params.r * phi_dot) * self.params.dt_phys
        keep = self.frozen
        for name, new in (("p", p), ("p_dot", p_dot), ("phi", phi), ("phi_dot", phi_dot),
                          ("beta", beta), ("beta_dot", beta_dot), ("stick", stick)):
            old = getattr(self, name)
            setattr(self, name, np.where(keep, old, new))
        self.t_step = np.where(keep, self.t_step, self.t_step + 1)

        nonfinite = ~(np.isfinite(self.p) & np.isfinite(self.p_dot) & np.isfinite(self.phi)
                      & np.isfinite(self.phi_dot) & np.isfinite(self.beta)
                      & np.isfinite(self.beta_dot))
        # A non-finite row counts as a fall; zero it so downstream math stays clean.
        if np.any(nonfinite):
            for arr in (self.p, self.p_dot, self.phi, self.phi_dot, self.beta_dot):
                arr[nonfinite] = 0.0
            self.beta[nonfinite] = np.pi  # unmistakably fallen

        c_pos, c_vel = self.command_sample()
        e_t = np.abs(self.p - c_pos)
        rew = reward_terms(self.p_dot, self.phi_dot, self.beta, self.beta_dot,
                           act, self.zeta, e_t, self.reward_cfg, self.params)
        fell = (np.abs(self.beta) > self.settings.beta_fail) | nonfinite
        timeout = self.t_step >= self.settings.T_max
        done = (fell | timeout) & live

        info = {
            "e_t": e_t,
            "p": self.p.copy(),
            "beta": self.beta.copy(),
            "slip_distance": slip_dist,
            "fell": fell & live,
            "timeout": timeout & live,
            "mu": self.mu.copy(),
            "live": live,
        }

        done_idx = np.flatnonzero(done)
        if done_idx.size:
            self.completed_lengths.extend(int(v) for v in self.t_step[done_idx])
        if self.auto_reset:
            self._reset_rows(done_idx)
        else:
            self.frozen |= done
        self.a_prev = np.where(self.frozen, self.a_prev, np.where(done, 0.0, act))
        return self.observations(), rew, done, info

