"""PPO trainer for the slip-aware WIP task.

Implements generalized advantage estimation, the clipped surrogate update with
hand-derived gradients over the numpy network kernel, curriculum integration,
Gaussian/outlier noise on the friction estimate, and the two-phase
teacher/student pipeline (privileged encoder training, then regression of the
encoder output from a 40-step proprioception history).

Trained variants:
  ours         friction estimate (noisy during training) in the observation
  ppo          no friction input (slot fixed to 0), fixed training friction
  ppo+dr       no friction input, per-episode friction randomization
  teacher      privileged encoder output z in place of the friction estimate
  xtr-ablation like ours but with the translation slots zeroed
  student      frozen teacher actor driven by the history-regressed z
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .dynamics import WipParams
from .env import (
    MU_HAT_SLOT, MU_MAX, OBS_DIM, PROPRIO_DIM, EpisodeSettings, ObsMode,
    RewardConfig, VecWipEnv,
)

VARIANTS = ("ours", "ppo", "ppo+dr", "teacher", "xtr-ablation")
LOG2PI = math.log(2.0 * math.pi)

# Fixed substream ids so adding a consumer never perturbs the others.
STREAMS = {
    "init": 0, "friction": 1, "command": 2, "reset": 3, "noise": 4,
    "policy": 5, "minibatch": 6, "distill": 7, "episode": 8,
}


class PpoError(Exception):
    pass


class LengthMismatch(PpoError):
    pass


class NonFiniteLoss(PpoError):
    """A loss or ratio went NaN/Inf; the run is aborted after a checkpoint dump."""


class MissingTeacher(PpoError):
    pass


def substream(seed: int, name: str, index: int | None = None) -> np.random.Generator:
    """Named, reproducible rng substream derived from the root seed."""
    key = [int(seed), STREAMS[name]]
    if index is not None:
        key.append(int(index))
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    horizon: int = 200
    n_env: int = 64
    iterations: int = 300
    v_max: float = 20.0

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if not self.clip_eps > 0.0:
            raise ValueError("clip epsilon must be positive")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.1
    p_outlier: float = 0.05
    outlier_halfwidth: float = 0.3

    def __post_init__(self) -> None:
        if self.sigma < 0.0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.p_outlier <= 1.0:
            raise ValueError("p_outlier must lie in [0, 1]")


def noisify_mu(mu_true: float, nm: NoiseModel, rng: np.random.Generator,
               mu_max: float = MU_MAX) -> float:
    """Corrupt a friction value the way the vision estimate is corrupted."""
    if rng.random() < nm.p_outlier:
        err = rng.uniform(-nm.outlier_halfwidth, nm.outlier_halfwidth)
    else:
        err = rng.normal(0.0, nm.sigma)
    return float(np.clip(mu_true + err, 0.0, mu_max))


def noisify_mu_batch(mu: np.ndarray, nm: NoiseModel, rng: np.random.Generator,
                     mu_max: float = MU_MAX) -> np.ndarray:
    """Vector version with a fixed per-call draw count (reset determinism)."""
    k = len(mu)
    outlier = rng.random(k) < nm.p_outlier
    gross = rng.uniform(-nm.outlier_halfwidth, nm.outlier_halfwidth, k)
    fine = rng.normal(0.0, nm.sigma, k)
    return np.clip(mu + np.where(outlier, gross, fine), 0.0, mu_max)


# ---------------------------------------------------------------------------
# Generalized advantage estimation


def gae(rewards, values, dones, gamma: float, lam: float, bootstrap=None):
    """Reverse-recursion advantages and returns.

    Accepts (H,) or (H, B) arrays; `dones` marks the last step of an episode.
    `bootstrap` supplies V(s_H) for rollouts that end mid-episode (defaults to
    zero).  Returns (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise LengthMismatch(
            f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    H, B = rewards.shape
    if bootstrap is None:
        bootstrap = np.zeros(B)
    bootstrap = np.asarray(bootstrap, dtype=np.float64).reshape(B)

    adv = np.zeros((H, B))
    next_value = bootstrap
    carry = np.zeros(B)
    for t in range(H - 1, -1, -1):
        live = ~dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    returns = adv + values
    if squeeze:
        return adv[:, 0], returns[:, 0]
    return adv, returns


# ---------------------------------------------------------------------------
# Policy container


@dataclass
class ActorCritic:
    actor: nn.Network
    critic: nn.Network
    log_std: np.ndarray                  # shape (1,), state-independent
    v_max: float = 20.0
    encoder: nn.Network | None = None    # teacher variant only

    @classmethod
    def create(cls, rng: np.random.Generator, v_max: float = 20.0,
               with_encoder: bool = False) -> "ActorCritic":
        # Small actor output gain keeps early actions smooth; the critic head
        # starts at unit gain so value fitting is not needlessly slow.
        actor = nn.Network.create(nn.actor_spec(), rng)
        critic = nn.Network.create(nn.critic_spec(), rng, out_gain=1.0)
        encoder = nn.Network.create(nn.encoder_spec(), rng, out_gain=1.0) if with_encoder else None
        return cls(actor, critic, np.array([math.log(0.5)]), v_max, encoder)

    def action_mean(self, obs: np.ndarray, cache: bool = False) -> np.ndarray:
        u = self.actor.forward(obs, cache=cache)
        return self.v_max * np.tanh(u[:, 0])

    def values(self, obs: np.ndarray, cache: bool = False) -> np.ndarray:
        return self.critic.forward(obs, cache=cache)[:, 0]

    def encode(self, mu: np.ndarray, cache: bool = False) -> np.ndarray:
        if self.encoder is None:
            raise PpoError("this policy has no privileged encoder")
        return self.encoder.forward(mu.reshape(-1, 1), cache=cache)[:, 0]

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mean = self.action_mean(obs)
        std = float(np.exp(self.log_std[0]))
        actions = mean + std * rng.standard_normal(len(mean))
        logp = -0.5 * ((actions - mean) / std) ** 2 - self.log_std[0] - 0.5 * LOG2PI
        return actions, logp

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mean = self.action_mean(obs)
        std = float(np.exp(self.log_std[0]))
        return -0.5 * ((actions - mean) / std) ** 2 - self.log_std[0] - 0.5 * LOG2PI

    def entropy(self) -> float:
        return float(0.5 * (1.0 + LOG2PI) + self.log_std[0])


@dataclass
class RolloutBuffer:
    """Fixed (horizon, n_env) storage; every slot must be written per rollout."""

    horizon: int
    n_env: int
    obs: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    mu: np.ndarray = field(init=False)
    filled: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        H, B = self.horizon, self.n_env
        self.obs = np.zeros((H, B, OBS_DIM))
        self.actions = np.zeros((H, B))
        self.log_probs = np.zeros((H, B))
        self.rewards = np.zeros((H, B))
        self.values = np.zeros((H, B))
        self.dones = np.zeros((H, B), dtype=bool)
        self.mu = np.zeros((H, B))

    def add(self, t, obs, actions, log_probs, rewards, values, dones, mu) -> None:
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self.mu[t] = mu
        self.filled = t + 1

    def require_full(self) -> None:
        if self.filled != self.horizon:
            raise PpoError(f"buffer has {self.filled}/{self.horizon} steps")


@dataclass
class Optimizers:
    actor: nn.Adam
    critic: nn.Adam
    log_std: nn.Adam
    encoder: nn.Adam | None = None

    @classmethod
    def create(cls, ac: ActorCritic, lr: float) -> "Optimizers":
        return cls(
            actor=nn.Adam(ac.actor.parameter_arrays(), lr),
            critic=nn.Adam(ac.critic.parameter_arrays(), lr),
            log_std=nn.Adam([ac.log_std], lr),
            encoder=nn.Adam(ac.encoder.parameter_arrays(), lr) if ac.encoder else None,
        )


def ppo_update(buffer: RolloutBuffer, ac: ActorCritic, opt: Optimizers,
               cfg: PpoConfig, bootstrap: np.ndarray,
               mb_rng: np.random.Generator) -> dict:
    """Clipped-surrogate update over the full buffer; returns loss statistics."""
    buffer.require_full()
    adv, ret = gae(buffer.rewards, buffer.values, buffer.dones,
                   cfg.gamma, cfg.lam, bootstrap)
    N = cfg.horizon * cfg.n_env
    obs = buffer.obs.reshape(N, OBS_DIM)
    actions = buffer.actions.reshape(N)
    logp_old = buffer.log_probs.reshape(N)
    mu = buffer.mu.reshape(N)
    adv = adv.reshape(N)
    ret = ret.reshape(N)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "approx_kl": 0.0, "clip_frac": 0.0}
    n_updates = 0
    mb_size = N // cfg.minibatches
    for _ in range(cfg.epochs):
        perm = mb_rng.permutation(N)
        for k in range(cfg.minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size]
            n = len(idx)
            obs_mb = obs[idx].copy()
            if ac.encoder is not None:
                z = ac.encode(mu[idx], cache=True)
                obs_mb[:, MU_HAT_SLOT] = z
            a_mb, adv_mb, ret_mb, lp_old = actions[idx], adv[idx], ret[idx], logp_old[idx]

            u = ac.actor.forward(obs_mb, cache=True)
            th = np.tanh(u[:, 0])
            mean = ac.v_max * th
            std = float(np.exp(ac.log_std[0]))
            var = std * std
            logp = -0.5 * (a_mb - mean) ** 2 / var - ac.log_std[0] - 0.5 * LOG2PI
            ratio = np.exp(logp - lp_old)
            clipped = ((adv_mb > 0) & (ratio > 1.0 + cfg.clip_eps)) | \
                      ((adv_mb < 0) & (ratio < 1.0 - cfg.clip_eps))
            surr = np.minimum(ratio * adv_mb,
                              np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv_mb)
            pg_loss = -surr.mean()

            v = ac.critic.forward(obs_mb, cache=True)[:, 0]
            v_err = v - ret_mb
            v_loss = 0.5 * float((v_err ** 2).mean())
            entropy = ac.entropy()
            if not (np.isfinite(pg_loss) and np.isfinite(v_loss) and np.all(np.isfinite(ratio))):
                raise NonFiniteLoss("non-finite PPO loss; aborting run")

            # d(pg_loss)/d(logp), with zero flow through clipped samples
            g_logp = -(adv_mb * ratio * ~clipped) / n
            g_mean = g_logp * (a_mb - mean) / var
            g_u = (g_mean * ac.v_max * (1.0 - th ** 2))[:, None]
            ac.actor.zero_grads()
            g_obs_actor = ac.actor.backward(g_u)

            g_log_std = float(np.sum(g_logp * ((a_mb - mean) ** 2 / var - 1.0)))
            g_log_std -= cfg.entropy_coef          # d(-c_ent * H)/d(log_std)

            ac.critic.zero_grads()
            g_obs_critic = ac.critic.backward((cfg.value_coef * v_err / n)[:, None])

            if ac.encoder is not None:
                g_z = g_obs_actor[:, MU_HAT_SLOT] + g_obs_critic[:, MU_HAT_SLOT]
                ac.encoder.zero_grads()
                ac.encoder.backward(g_z[:, None])
                opt.encoder.step(ac.encoder.gradient_arrays())

            opt.actor.step(ac.actor.gradient_arrays())
            opt.critic.step(ac.critic.gradient_arrays())
            opt.log_std.step([np.array([g_log_std])])

            stats["policy_loss"] += float(pg_loss)
            stats["value_loss"] += v_loss
            stats["entropy"] += entropy
            stats["approx_kl"] += float(np.mean(lp_old - logp))
            stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
            n_updates += 1
    for k in stats:
        stats[k] /= max(n_updates, 1)
    return stats


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainSettings:
    """Everything a training run needs; owned by the run config file."""

    variant: str = "ours"
    seed: int = 0
    params: WipParams = WipParams()
    reward: RewardConfig = RewardConfig()
    episode: EpisodeSettings = EpisodeSettings()
    ppo: PpoConfig = PpoConfig()
    noise: NoiseModel = NoiseModel()
    friction_range: tuple[float, float] = (0.25, 1.5)
    fixed_mu: float = 1.0
    command_range: float = 0.3
    curriculum_window: int = 100
    # Fraction of randomized-friction episodes drawn from the slippery lower
    # third of the range; uniform draws leave low-friction recovery too rare
    # to learn well.
    low_friction_mix: float = 0.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.low_friction_mix <= 1.0:
            raise ValueError("low_friction_mix must lie in [0, 1]")


def _make_env(ts: TrainSettings, rngs: dict) -> VecWipEnv:
    randomized = ts.variant in ("ours", "ppo+dr", "teacher", "xtr-ablation")
    if randomized:
        lo, hi = ts.friction_range
        if ts.low_friction_mix > 0.0:
            split = lo + (hi - lo) / 3.0

            def friction_fn(rng, k):
                pick_low = rng.random(k) < ts.low_friction_mix
                low = rng.uniform(lo, split, k)
                high = rng.uniform(split, hi, k)
                return np.where(pick_low, low, high)
        else:
            friction_fn = lambda rng, k: rng.uniform(lo, hi, k)
    else:
        friction_fn = lambda rng, k: np.full(k, ts.fixed_mu)

    if ts.variant in ("ours", "xtr-ablation"):
        mu_hat_fn = lambda mu, rng: noisify_mu_batch(mu, ts.noise, rng)
    else:
        # ppo / ppo+dr observe nothing; the teacher's slot is overwritten with z.
        mu_hat_fn = lambda mu, rng: np.zeros(len(mu))

    return VecWipEnv(
        ts.ppo.n_env, ts.params, ts.reward, rngs, friction_fn, mu_hat_fn,
        settings=ts.episode, command_range=ts.command_range,
        obs_mode=ObsMode.TRAINING, zero_x_tr=(ts.variant == "xtr-ablation"),
        auto_reset=True,
    )


def train(ts: TrainSettings, metrics_path=None, log_every: int = 0,
          abort_checkpoint_path=None):
    """Full PPO loop: rollout, curriculum, GAE, clipped update.

    Returns (PolicyCheckpoint, metrics rows).  Bit-for-bit reproducible for a
    fixed TrainSettings (single worker).  On a non-finite loss the run aborts
    with NonFiniteLoss after dumping a checkpoint to `abort_checkpoint_path`
    (when given).
    """
    cfg = ts.ppo
    rng_init = substream(ts.seed, "init")
    rng_policy = substream(ts.seed, "policy")
    rng_mb = substream(ts.seed, "minibatch")
    env_rngs = {name: substream(ts.seed, name)
                for name in ("friction", "command", "reset", "noise")}

    ac = ActorCritic.create(rng_init, cfg.v_max, with_encoder=(ts.variant == "teacher"))
    opt = Optimizers.create(ac, cfg.lr)
    env = _make_env(ts, env_rngs)
    buffer = RolloutBuffer(cfg.horizon, cfg.n_env)

    lengths: deque[int] = deque(maxlen=ts.curriculum_window)
    metrics: list[dict] = []
    obs = env.reset_all()

    def make_checkpoint(iteration: int) -> nn.PolicyCheckpoint:
        specs = {"actor": ac.actor.spec, "critic": ac.critic.spec}
        params = {"actor": ac.actor.params, "critic": ac.critic.params}
        moments = {"actor": opt.actor.state(), "critic": opt.critic.state(),
                   "log_std": opt.log_std.state()}
        if ac.encoder is not None:
            specs["encoder"] = ac.encoder.spec
            params["encoder"] = ac.encoder.params
            moments["encoder"] = opt.encoder.state()
        return nn.PolicyCheckpoint(
            variant=ts.variant, seed=ts.seed, iteration=iteration,
            curriculum={"mean_ep_len": float(np.mean(lengths)) if lengths else 0.0,
                        "T_max": ts.episode.T_max},
            specs=specs, params=params, extras={"log_std": ac.log_std.copy()},
            moments=moments,
            meta={"v_max": cfg.v_max, "variant": ts.variant},
        )

    for it in range(cfg.iterations):
        mean_len = float(np.mean(lengths)) if lengths else 0.0
        zeta = (math.tanh(mean_len / ts.episode.T_max * 8.0 - 3.0) + 1.0) / 2.0
        env.zeta = zeta

        if ac.encoder is not None:
            obs[:, MU_HAT_SLOT] = ac.encode(env.mu)
        reward_sum = 0.0
        for t in range(cfg.horizon):
            actions, logp = ac.sample(obs, rng_policy)
            values = ac.values(obs)
            mu_now = env.mu.copy()
            next_obs, rew, done, info = env.step(actions)
            if ac.encoder is not None:
                next_obs[:, MU_HAT_SLOT] = ac.encode(env.mu)
            buffer.add(t, obs, actions, logp, rew, values, done, mu_now)
            obs = next_obs
            reward_sum += float(rew.mean())
        bootstrap = ac.values(obs)
        try:
            stats = ppo_update(buffer, ac, opt, cfg, bootstrap, rng_mb)
        except NonFiniteLoss:
            if abort_checkpoint_path is not None:
                nn.save_checkpoint(abort_checkpoint_path, make_checkpoint(it))
            raise

        if env.completed_lengths:
            lengths.extend(env.completed_lengths)
            env.completed_lengths.clear()
        row = {
            "iteration": it,
            "mean_reward": reward_sum / cfg.horizon,
            "mean_ep_len": mean_len,
            "zeta": zeta,
            **stats,
        }
        metrics.append(row)
        if log_every and it % log_every == 0:
            print(f"[{ts.variant}] it={it} reward={row['mean_reward']:.3f} "
                  f"len={mean_len:.0f} zeta={zeta:.3f}")

    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return make_checkpoint(cfg.iterations), metrics


def write_metrics(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# RMA phase 2: distill the encoder output from proprioception history


HISTORY_LEN = 40


@dataclass(frozen=True)
class DistillSettings:
    collect_steps: int = 400      # decision steps of teacher rollout to record
    warmup_steps: int = 0         # steps to skip at the start of collection
    lr: float = 1e-3
    epochs: int = 10
    minibatch: int = 256
    holdout_envs: int = 8         # trailing env columns held out of training


def deployment_proprio(snapshot: dict, a_prev: np.ndarray, r: float) -> np.ndarray:
    """The 9 deployment-observable entries (translation from wheel odometry)."""
    out = np.empty((len(a_prev), PROPRIO_DIM))
    out[:, 0] = snapshot["phi"]
    out[:, 1] = snapshot["phi_dot"]
    out[:, 2] = snapshot["beta"]
    out[:, 3] = snapshot["beta_dot"]
    out[:, 4] = r * snapshot["phi"]
    out[:, 5] = r * snapshot["phi_dot"]
    out[:, 6] = a_prev
    out[:, 7] = snapshot["c_pos"]
    out[:, 8] = snapshot["c_vel"]
    return out


class HistoryBuffer:
    """Rolling (B, channels, length) window, zero-filled at episode starts."""

    def __init__(self, n_env: int, channels: int = PROPRIO_DIM, length: int = HISTORY_LEN):
        self.data = np.zeros((n_env, channels, length))

    def push(self, proprio: np.ndarray) -> None:
        self.data[:, :, :-1] = self.data[:, :, 1:]
        self.data[:, :, -1] = proprio

    def reset_rows(self, mask: np.ndarray) -> None:
        self.data[mask] = 0.0


def rebuild_actor_critic(ckpt: nn.PolicyCheckpoint) -> ActorCritic:
    actor = nn.Network(ckpt.specs["actor"], ckpt.params["actor"])
    critic = nn.Network(ckpt.specs["critic"], ckpt.params["critic"])
    encoder = None
    if "encoder" in ckpt.specs:
        encoder = nn.Network(ckpt.specs["encoder"], ckpt.params["encoder"])
    return ActorCritic(actor, critic, ckpt.extras["log_std"].copy(),
                       float(ckpt.meta.get("v_max", 20.0)), encoder)


def distill_student(teacher_ckpt: nn.PolicyCheckpoint, ts: TrainSettings,
                    ds: DistillSettings = DistillSettings()):
    """Train the adaptation module to regress the teacher's z from history.

    The teacher acts on its privileged observations; the recorded history uses
    deployment-observable proprioception only.  Held-out environments (whole
    rollouts) measure the regression MSE.  Returns (student checkpoint, report).
    """
    if teacher_ckpt.variant != "teacher" or "encoder" not in teacher_ckpt.specs:
        raise MissingTeacher("distillation requires a trained teacher checkpoint")
    ac = rebuild_actor_critic(teacher_ckpt)
    rng_init = substream(ts.seed, "distill", 0)
    rng_mb = substream(ts.seed, "distill", 1)
    env_rngs = {name: substream(ts.seed, "distill", 10 + i)
                for i, name in enumerate(("friction", "command", "reset", "noise"))}

    teacher_ts = replace(ts, variant="teacher")
    env = _make_env(teacher_ts, env_rngs)
    B = ts.ppo.n_env
    hist = HistoryBuffer(B)
    adaptation = nn.Network.create(nn.adaptation_spec(PROPRIO_DIM, HISTORY_LEN),
                                   rng_init, out_gain=1.0)
    opt = nn.Adam(adaptation.parameter_arrays(), ds.lr)

    obs = env.reset_all()
    hist.push(deployment_proprio(env.state_snapshot(), env.a_prev, ts.params.r))
    xs, zs = [], []
    for t in range(ds.warmup_steps + ds.collect_steps):
        z = ac.encode(env.mu)
        obs[:, MU_HAT_SLOT] = z
        if t >= ds.warmup_steps:
            xs.append(hist.data.copy())
            zs.append(z.copy())
        actions = ac.action_mean(obs)
        obs, _rew, done, _info = env.step(actions)
        hist.reset_rows(done)
        hist.push(deployment_proprio(env.state_snapshot(), env.a_prev, ts.params.r))

    X = np.concatenate(xs)                     # (T*B, 9, 40)
    Z = np.concatenate(zs)[:, None]            # (T*B, 1)
    n_steps = len(xs)
    holdout_mask = np.zeros((n_steps, B), dtype=bool)
    holdout_mask[:, B - ds.holdout_envs:] = True
    holdout_mask = holdout_mask.reshape(-1)
    X_tr, Z_tr = X[~holdout_mask], Z[~holdout_mask]
    X_ho, Z_ho = X[holdout_mask], Z[holdout_mask]

    n = len(X_tr)
    history = []
    for epoch in range(ds.epochs):
        perm = rng_mb.permutation(n)
        for k in range(0, n, ds.minibatch):
            idx = perm[k:k + ds.minibatch]
            pred = adaptation.forward(X_tr[idx], cache=True)
            err = pred - Z_tr[idx]
            adaptation.zero_grads()
            adaptation.backward(err / len(idx))      # grad of 0.5*mean(err^2)
            opt.step(adaptation.gradient_arrays())
        pred_ho = adaptation.forward(X_ho, cache=False)
        mse = float(((pred_ho - Z_ho) ** 2).mean())
        history.append(mse)

    specs = {"actor": ac.actor.spec, "critic": ac.critic.spec,
             "encoder": ac.encoder.spec, "adaptation": adaptation.spec}
    params = {"actor": ac.actor.params, "critic": ac.critic.params,
              "encoder": ac.encoder.params, "adaptation": adaptation.params}
    ckpt = nn.PolicyCheckpoint(
        variant="student", seed=ts.seed, iteration=teacher_ckpt.iteration,
        curriculum=teacher_ckpt.curriculum, specs=specs, params=params,
        extras={"log_std": ac.log_std.copy()},
        meta={"v_max": ac.v_max, "variant": "student",
              "teacher_spec_hash": nn.spec_hash(teacher_ckpt.specs),
              "holdout_mse": history[-1]},
    )
    report = {"holdout_mse": history[-1], "mse_history": history,
              "train_samples": int(n), "holdout_samples": int(len(X_ho))}
    return ckpt, report
