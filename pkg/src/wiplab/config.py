"""Run configuration: layered YAML with embedded defaults, strict unknown-key
rejection, dotted-path overrides, and builders for the module-level settings
objects.  A normalized snapshot of every run's config is persisted next to its
artifacts so any run can be reproduced byte-for-byte."""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from . import ppo
from .dynamics import WipParams
from .env import EpisodeSettings, RewardConfig
from .evaluation import EvalConfig, SweepSpec


class ConfigInvalid(Exception):
    """Malformed config file, unknown key, or bad value (CLI exit code 2)."""


DEFAULTS: dict = {
    "seed": 0,
    "sim": {
        "m_w": 1.0, "m_p": 2.0, "r": 0.1, "l": 0.3,
        "I_w": 0.005, "I_p": 0.06, "g": 9.81, "mu": 1.0,
        "k_d": 3.0, "tau_max": 10.0, "dt_phys": 0.0025,
    },
    "reward": {
        "a_low": 0.01, "a_high": 0.1, "slip_weight": 3.0,
        "velocity_penalty": 0.01, "pitch_rate_penalty": 0.005,
        "tracking_weight": 0.3, "tracking_offset": 0.01,
    },
    "episode": {
        "t_max": 1000, "beta_fail": 0.6, "command_duration": 4.0,
        "init_beta_range": 0.25, "init_beta_dot_range": 2.0,
    },
    "ppo": {
        "lr": 3e-4, "gamma": 0.99, "lam": 0.95, "clip_eps": 0.2,
        "epochs": 4, "minibatches": 4, "entropy_coef": 0.003,
        "value_coef": 0.5, "horizon": 200, "n_env": 64,
        "iterations": 300, "v_max": 20.0,
    },
    "noise": {"sigma": 0.1, "p_outlier": 0.05, "outlier_halfwidth": 0.3},
    "train": {
        "variant": "ours", "friction_range": [0.25, 1.5], "fixed_mu": 1.0,
        "command_range": 0.3, "curriculum_window": 100,
    },
    "distill": {
        "collect_steps": 400, "warmup_steps": 0, "lr": 1e-3,
        "epochs": 10, "minibatch": 256, "holdout_envs": 8,
    },
    "lqr": {"q_diag": [10.0, 1.0, 50.0, 1.0], "r": 0.1},
    "eval": {
        "episodes": 100, "friction": [0.5, 1.5], "mu_input": "true",
        "record_trajectories": True,
    },
    "sweep": {"mu_inputs": [0.5, 0.75, 1.0, 1.25, 1.5], "mu_actual": 1.0, "trials": 50},
    "ffv": {
        "cache": None, "k": 5,
        "client": {
            "backend": "mock", "mock_fixture": None,
            "endpoint": "https://api.openai.com/v1/chat/completions",
            "model": "gpt-4o", "timeout_s": 20.0, "attempts": 3, "backoff_s": 0.5,
        },
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigInvalid(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{here!r} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _apply_override(data: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigInvalid(f"override {dotted!r} must look like section.key=value")
    key_path, raw = dotted.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"cannot parse override value {raw!r}") from e
    node = data
    keys = key_path.split(".")
    ref = DEFAULTS
    for k in keys[:-1]:
        if not isinstance(ref, dict) or k not in ref:
            raise ConfigInvalid(f"unknown config key {key_path!r}")
        ref = ref[k]
        node = node.setdefault(k, {})
    leaf = keys[-1]
    if not isinstance(ref, dict) or leaf not in ref:
        raise ConfigInvalid(f"unknown config key {key_path!r}")
    node[leaf] = value


class RunConfig:
    """Validated, fully-defaulted view of one run's configuration."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "RunConfig":
        user: dict = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigInvalid(f"config file not found: {p}")
            try:
                user = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as e:
                raise ConfigInvalid(f"malformed YAML in {p}: {e}") from e
            if not isinstance(user, dict):
                raise ConfigInvalid(f"config root in {p} must be a mapping")
        for dotted in overrides or []:
            _apply_override(user, dotted)
        try:
            return cls(_merge(DEFAULTS, user))
        except ConfigInvalid:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(str(e)) from e

    def snapshot_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=None)

    # ----- builders ------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def wip_params(self, mu: float | None = None) -> WipParams:
        sim = dict(self.data["sim"])
        if mu is not None:
            sim["mu"] = mu
        try:
            return WipParams(**sim)
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad sim parameters: {e}") from e

    def reward_config(self) -> RewardConfig:
        try:
            return RewardConfig(**self.data["reward"])
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad reward config: {e}") from e

    def episode_settings(self) -> EpisodeSettings:
        ep = self.data["episode"]
        try:
            return EpisodeSettings(
                T_max=int(ep["t_max"]), beta_fail=float(ep["beta_fail"]),
                command_duration=float(ep["command_duration"]),
                init_beta_range=float(ep["init_beta_range"]),
                init_beta_dot_range=float(ep["init_beta_dot_range"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad episode settings: {e}") from e

    def ppo_config(self) -> ppo.PpoConfig:
        try:
            return ppo.PpoConfig(**self.data["ppo"])
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad ppo config: {e}") from e

    def noise_model(self) -> ppo.NoiseModel:
        try:
            return ppo.NoiseModel(**self.data["noise"])
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad noise model: {e}") from e

    def train_settings(self, variant: str | None = None,
                       seed: int | None = None) -> ppo.TrainSettings:
        tr = self.data["train"]
        try:
            return ppo.TrainSettings(
                variant=variant or tr["variant"],
                seed=self.seed if seed is None else int(seed),
                params=self.wip_params(),
                reward=self.reward_config(),
                episode=self.episode_settings(),
                ppo=self.ppo_config(),
                noise=self.noise_model(),
                friction_range=tuple(tr["friction_range"]),
                fixed_mu=float(tr["fixed_mu"]),
                command_range=float(tr["command_range"]),
                curriculum_window=int(tr["curriculum_window"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad train settings: {e}") from e

    def distill_settings(self) -> ppo.DistillSettings:
        try:
            return ppo.DistillSettings(**self.data["distill"])
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad distill settings: {e}") from e

    def eval_config(self, seed: int | None = None, episodes: int | None = None,
                    friction=None, mu_input=None) -> EvalConfig:
        ev = self.data["eval"]
        fr = friction if friction is not None else ev["friction"]
        if isinstance(fr, list):
            fr = tuple(fr)
        mi = mu_input if mu_input is not None else ev["mu_input"]
        if isinstance(mi, str) and mi not in ("true", "noisy"):
            try:
                mi = float(mi)
            except ValueError:
                raise ConfigInvalid(f"eval.mu_input must be 'true', 'noisy' or a number; "
                                    f"got {mi!r}") from None
        try:
            return EvalConfig(
                episodes=int(episodes if episodes is not None else ev["episodes"]),
                friction=fr, mu_input_mode=mi,
                seed=self.seed if seed is None else int(seed),
                params=self.wip_params(), reward=self.reward_config(),
                settings=self.episode_settings(),
                command_range=float(self.data["train"]["command_range"]),
                noise=self.noise_model(),
                record_trajectories=bool(ev["record_trajectories"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad eval config: {e}") from e

    def sweep_spec(self, mu_inputs=None, mu_actual=None, trials=None) -> SweepSpec:
        sw = self.data["sweep"]
        mi = mu_inputs if mu_inputs is not None else sw["mu_inputs"]
        ma = mu_actual if mu_actual is not None else sw["mu_actual"]
        if isinstance(ma, list):
            ma = tuple(ma)
        try:
            return SweepSpec(mu_inputs=tuple(float(v) for v in mi),
                             mu_actual=ma,
                             trials=int(trials if trials is not None else sw["trials"]))
        except (TypeError, ValueError) as e:
            raise ConfigInvalid(f"bad sweep spec: {e}") from e

    def lqr_weights(self) -> tuple[np.ndarray, float]:
        lq = self.data["lqr"]
        return np.diag([float(v) for v in lq["q_diag"]]), float(lq["r"])
