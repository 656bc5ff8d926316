"""Experiment harness: paired controller evaluation over randomized friction,
input-CoF sensitivity sweeps, comparison tables, and plot-data export.

All episode conditions (friction, command target, initial tilt/rate, estimate
noise) are drawn from named substreams of one root seed before any controller
acts, so every controller evaluated under the same config sees identical
episodes.  Deployment-mode observations are used throughout; rewards are never
computed here.  A fallen robot keeps its final position while the command
moves on, so its tracking error keeps accruing until the episode grid ends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn, ppo
from .baselines import LqrController
from .dynamics import WipParams
from .env import (
    DECISION_DT, MU_HAT_SLOT, EpisodeSettings, ObsMode, RewardConfig, VecWipEnv,
    _quintic_arrays,
)


class EvalError(Exception):
    pass


class NoSuccessfulEpisodes(EvalError):
    pass


@dataclass
class RunRecord:
    """Per-episode outcome plus the decision-rate trajectory."""

    variant: str
    seed: int
    episode: int
    mu_actual: float
    mu_input: float
    episode_len: int
    success: bool
    rms_error: float
    max_abs_beta: float
    slip_distance: float
    trajectory: dict | None = None     # {"t": [...], "p": [...], "c_pos": [...], ...}

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "variant", "seed", "episode", "mu_actual", "mu_input", "episode_len",
            "success", "rms_error", "max_abs_beta", "slip_distance")}
        d["trajectory"] = self.trajectory
        return d

    @staticmethod
    def from_json(d: dict) -> "RunRecord":
        return RunRecord(**d)


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    friction: tuple[float, float] | float = (0.5, 1.5)
    mu_input_mode: str | float = "true"      # "true" | "noisy" | pinned value
    seed: int = 0
    params: WipParams = WipParams()
    reward: RewardConfig = RewardConfig()
    settings: EpisodeSettings = EpisodeSettings()
    command_range: float = 0.3
    noise: ppo.NoiseModel = ppo.NoiseModel()
    record_trajectories: bool = True


@dataclass(frozen=True)
class SweepSpec:
    mu_inputs: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    mu_actual: tuple[float, float] | float = 1.0
    trials: int = 50

    def __post_init__(self) -> None:
        if not self.mu_inputs:
            raise ValueError("sweep grid must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


# ---------------------------------------------------------------------------
# Controllers


class PolicyController:
    """Evaluation adapter for a trained checkpoint of any variant."""

    def __init__(self, ckpt: nn.PolicyCheckpoint):
        self.variant = ckpt.variant
        self.ac = ppo.rebuild_actor_critic(ckpt)
        self.zero_x_tr = self.variant == "xtr-ablation"
        self.adaptation = None
        if self.variant == "student":
            self.adaptation = nn.Network(ckpt.specs["adaptation"], ckpt.params["adaptation"])
        self.history: ppo.HistoryBuffer | None = None

    @classmethod
    def from_file(cls, path) -> "PolicyController":
        return cls(nn.load_checkpoint(path))

    def reset(self, n_env: int) -> None:
        if self.adaptation is not None:
            self.history = ppo.HistoryBuffer(n_env)

    def act(self, obs: np.ndarray, snapshot: dict) -> np.ndarray:
        obs = obs.copy()
        if self.variant in ("ppo", "ppo+dr"):
            obs[:, MU_HAT_SLOT] = 0.0
        elif self.variant == "teacher":
            obs[:, MU_HAT_SLOT] = self.ac.encode(snapshot["mu"])
        elif self.variant == "student":
            self.history.push(obs[:, :MU_HAT_SLOT])
            obs[:, MU_HAT_SLOT] = self.adaptation.forward(
                self.history.data, cache=False)[:, 0]
        return self.ac.action_mean(obs)


class LqrEvalController:
    """Friction-blind classical baseline on the shared actuator interface."""

    variant = "lqr"
    zero_x_tr = False

    def __init__(self, params: WipParams, **kw):
        self._ctrl = LqrController(params, **kw)

    def reset(self, n_env: int) -> None:
        pass

    def act(self, obs: np.ndarray, snapshot: dict) -> np.ndarray:
        return self._ctrl.act(snapshot)


# ---------------------------------------------------------------------------
# Core evaluation loop


def _episode_draws(cfg: EvalConfig):
    n = cfg.episodes
    rng_frict = ppo.substream(cfg.seed, "episode", 0)
    rng_cmd = ppo.substream(cfg.seed, "episode", 1)
    rng_init = ppo.substream(cfg.seed, "episode", 2)
    rng_noise = ppo.substream(cfg.seed, "episode", 3)

    if isinstance(cfg.friction, tuple):
        mu_actual = rng_frict.uniform(cfg.friction[0], cfg.friction[1], n)
    else:
        mu_actual = np.full(n, float(cfg.friction))
    targets = rng_cmd.uniform(-cfg.command_range, cfg.command_range, n)
    beta0 = rng_init.uniform(-cfg.settings.init_beta_range, cfg.settings.init_beta_range, n)
    betad0 = rng_init.uniform(-cfg.settings.init_beta_dot_range,
                              cfg.settings.init_beta_dot_range, n)
    if cfg.mu_input_mode == "true":
        mu_input = mu_actual.copy()
    elif cfg.mu_input_mode == "noisy":
        mu_input = ppo.noisify_mu_batch(mu_actual, cfg.noise, rng_noise)
    else:
        mu_input = np.full(n, float(cfg.mu_input_mode))
    return mu_actual, targets, beta0, betad0, mu_input


def evaluate(controller, cfg: EvalConfig) -> list[RunRecord]:
    """Seeded batch evaluation; one RunRecord per episode, in episode order."""
    n = cfg.episodes
    if n == 0:
        return []
    mu_actual, targets, beta0, betad0, mu_input = _episode_draws(cfg)

    rngs = {k: np.random.default_rng(0) for k in ("friction", "command", "reset", "noise")}
    env = VecWipEnv(
        n, cfg.params, cfg.reward, rngs,
        friction_fn=lambda rng, k: np.ones(k), mu_hat_fn=lambda mu, rng: mu.copy(),
        settings=cfg.settings, command_range=cfg.command_range,
        obs_mode=ObsMode.DEPLOYMENT, zero_x_tr=controller.zero_x_tr, auto_reset=False,
    )
    env.reset_all()
    env.set_episode_conditions(mu_actual, targets, beta0, betad0, mu_input)
    controller.reset(n)

    T = cfg.settings.T_max
    traj_p = np.zeros((T + 1, n))
    traj_beta = np.zeros((T + 1, n))
    traj_act = np.zeros((T + 1, n))
    traj_p[0] = env.p
    traj_beta[0] = env.beta

    max_abs_beta = np.abs(env.beta).copy()
    slip_distance = np.zeros(n)

    obs = env.observations()
    for t in range(1, T + 1):
        actions = controller.act(obs, env.state_snapshot())
        obs, _rew, _done, info = env.step(actions)
        live = info["live"]
        traj_p[t] = env.p
        traj_beta[t] = env.beta
        traj_act[t] = np.where(live, actions, 0.0)
        max_abs_beta = np.maximum(max_abs_beta, np.where(live, np.abs(env.beta), 0.0))
        slip_distance += np.where(live, info["slip_distance"], 0.0)
        if env.frozen.all():
            # Freeze-fill the rest of the grid: position stays where it fell.
            traj_p[t + 1:] = env.p
            traj_beta[t + 1:] = env.beta
            break

    # Commands evolve with global time regardless of falls, so a fallen robot
    # keeps accruing tracking error until the grid ends.
    steps = np.arange(T + 1)[:, None]
    traj_c = _quintic_arrays(env.cmd_target[None, :], env.cmd_T[None, :],
                             steps * DECISION_DT)[0]
    err = traj_p - traj_c
    rms = np.sqrt(np.mean(err ** 2, axis=0))
    success = (env.t_step >= T) & (np.abs(env.beta) <= cfg.settings.beta_fail)
    t_grid = steps[:, 0] * DECISION_DT

    records = []
    for i in range(n):
        traj = None
        if cfg.record_trajectories:
            traj = {
                "t": [float(v) for v in t_grid],
                "p": [float(v) for v in traj_p[:, i]],
                "c_pos": [float(v) for v in traj_c[:, i]],
                "beta": [float(v) for v in traj_beta[:, i]],
                "action": [float(v) for v in traj_act[:, i]],
            }
        records.append(RunRecord(
            variant=controller.variant, seed=cfg.seed, episode=i,
            mu_actual=float(mu_actual[i]), mu_input=float(mu_input[i]),
            episode_len=int(env.t_step[i]), success=bool(success[i]),
            rms_error=float(rms[i]), max_abs_beta=float(max_abs_beta[i]),
            slip_distance=float(slip_distance[i]), trajectory=traj,
        ))
    return records


def summarize(records: list[RunRecord]) -> dict:
    """Aggregate statistics; flags the degenerate empty case."""
    if not records:
        return {"episodes": 0, "aggregate_defined": False}
    rms = np.array([r.rms_error for r in records])
    return {
        "episodes": len(records),
        "aggregate_defined": True,
        "variant": records[0].variant,
        "success_rate": float(np.mean([r.success for r in records])),
        "mean_rms_error": float(rms.mean()),
        "std_rms_error": float(rms.std()),
        "mean_episode_len": float(np.mean([r.episode_len for r in records])),
        "mean_slip_distance": float(np.mean([r.slip_distance for r in records])),
    }


def compare(controllers: dict[str, object], cfg: EvalConfig):
    """Paired evaluation: every controller sees identical episode conditions.

    Returns (records by name, summary rows in controller order).
    """
    all_records: dict[str, list[RunRecord]] = {}
    rows: list[dict] = []
    for name, controller in controllers.items():
        records = evaluate(controller, cfg)
        all_records[name] = records
        row = {"name": name, **summarize(records)}
        rows.append(row)
    return all_records, rows


def sweep_cof(controller, spec: SweepSpec, cfg: EvalConfig):
    """Pin the policy's input CoF per grid cell; same episodes in every cell."""
    rows = []
    for mu_in in spec.mu_inputs:
        cell_cfg = EvalConfig(
            episodes=spec.trials, friction=spec.mu_actual, mu_input_mode=float(mu_in),
            seed=cfg.seed, params=cfg.params, reward=cfg.reward, settings=cfg.settings,
            command_range=cfg.command_range, noise=cfg.noise,
            record_trajectories=False,
        )
        records = evaluate(controller, cell_cfg)
        s = summarize(records)
        rows.append({
            "mu_input": float(mu_in),
            "trials": spec.trials,
            "trials_succeeded": int(round(s["success_rate"] * spec.trials)),
            "success_rate": s["success_rate"],
            "mean_rms_error": s["mean_rms_error"],
        })
    return rows


# ---------------------------------------------------------------------------
# Persistence


def write_records(path, records: list[RunRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path) -> list[RunRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(RunRecord.from_json(json.loads(line)))
    return records


def export_plots(records: list[RunRecord], out_path) -> int:
    """Mean +- std trajectory over successful episodes on the common time grid.

    CSV columns: t, mean_p, std_p, c_pos (mean commanded position).  Returns
    the number of contributing episodes.
    """
    good = [r for r in records if r.success and r.trajectory is not None]
    if not good:
        raise NoSuccessfulEpisodes("no successful episodes with trajectories to export")
    t = np.array(good[0].trajectory["t"])
    P = np.stack([np.array(r.trajectory["p"]) for r in good])
    C = np.stack([np.array(r.trajectory["c_pos"]) for r in good])
    mean_p, std_p, mean_c = P.mean(axis=0), P.std(axis=0), C.mean(axis=0)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("t,mean_p,std_p,c_pos\n")
        for row in zip(t, mean_p, std_p, mean_c):
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    return len(good)
