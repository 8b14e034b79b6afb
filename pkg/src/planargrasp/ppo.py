"""On-policy training engine: vectorized rollout collection, GAE, clipped
surrogate updates. The same engine trains base policies and the hyper-policy;
policies plug in through a small agent interface (act / value / evaluate /
backward over flat observations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, adam_step, rng_stream
from .policies import (GaussianActorCritic, HyperPolicy, ObservationMask,
                       combine_actions, mask_observation)


class TrainError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.96
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    rollout_steps: int = 8
    epochs: int = 5
    minibatches: int = 4
    num_envs: int = 256
    entropy_coeff: float = 0.0
    value_coeff: float = 0.5
    max_grad_norm: float = 1.0
    iterations: int = 500

    def __post_init__(self):
        assert 0.0 < self.gamma <= 1.0
        assert 0.0 <= self.gae_lambda <= 1.0
        assert self.clip > 0.0


@dataclass
class RolloutBuffer:
    obs: np.ndarray        # (T, N, D) flat observations
    raw: np.ndarray        # (T, N, R) pre-transform action samples
    logprob: np.ndarray    # (T, N)
    reward: np.ndarray     # (T, N), bootstrap-adjusted at truncations
    raw_reward_mean: float
    value: np.ndarray      # (T, N)
    done: np.ndarray       # (T, N)
    last_value: np.ndarray  # (N,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


class ActorCriticAgent:
    """PPO adapter for a Gaussian actor-critic on a masked observation; the
    environment action is the clipped raw sample."""

    def __init__(self, net: GaussianActorCritic, mask: ObservationMask):
        self.net = net
        self.mask = mask

    @property
    def params(self):
        return self.net.params

    def flat(self, obs):
        return mask_observation(obs, self.mask)

    def act(self, obs, rng):
        x = self.flat(obs)
        raw, lp, value = self.net.sample(x, rng)
        return np.clip(raw, -1.0, 1.0), raw, lp, value

    def deterministic_action(self, obs):
        mean, _ = self.net.forward(self.flat(obs))
        return np.clip(mean, -1.0, 1.0)

    def value(self, obs):
        _, v = self.net.forward(self.flat(obs))
        return v

    def evaluate(self, obs_flat, raw):
        return self.net.evaluate(obs_flat, raw)

    def backward(self, cache, dlp, dvalue, dentropy):
        return self.net.backward(cache, dlp, dvalue, dentropy)

    def entropy(self):
        return self.net.entropy()


class HyperAgent:
    """PPO adapter for the hyper-policy: frozen base experts act on their own
    mask, the hyper-policy supplies residual and weights, and the env sees
    the combined action."""

    def __init__(self, hyper: HyperPolicy, bases: list, mask: ObservationMask):
        self.hyper = hyper
        self.bases = bases
        self.mask = mask

    @property
    def params(self):
        return self.hyper.params

    def flat(self, obs):
        return mask_observation(obs, self.mask)

    def _base_actions(self, obs):
        return np.stack([b.act(obs) for b in self.bases])

    def act(self, obs, rng):
        out = self.hyper.act(self.flat(obs), rng)
        action = combine_actions(self._base_actions(obs), out.residual, out.weights)
        return action, out.raw, out.logprob, out.value

    def deterministic_action(self, obs):
        out = self.hyper.act(self.flat(obs), None, deterministic=True)
        return combine_actions(self._base_actions(obs), out.residual, out.weights)

    def value(self, obs):
        _, v = self.hyper.net.forward(self.flat(obs))
        return v

    def evaluate(self, obs_flat, raw):
        return self.hyper.evaluate(obs_flat, raw)

    def backward(self, cache, dlp, dvalue, dentropy):
        return self.hyper.backward(cache, dlp, dvalue, dentropy)

    def entropy(self):
        return self.hyper.entropy()


class EnvRunner:
    """Persistent vectorized envs plus reward function and object sampling.

    Episodes never reset between iterations; finished envs rebind to an
    object drawn uniformly from `object_pool` (multi-task) and restart.
    Tracks a rolling window of episode successes for metrics.
    """

    def __init__(self, env, reward_fn, object_pool, seed: int,
                 success_window: int = 512):
        self.env = env
        self.reward_fn = reward_fn
        self.object_pool = np.asarray(object_pool, dtype=np.intp)
        self._sample_rng = rng_stream(seed, 5)
        self.success_window = success_window
        self.recent_success: list = []
        self.obs = env.reset_all(self.sample_objects(env.num_envs))

    def sample_objects(self, n: int) -> np.ndarray:
        return self.object_pool[self._sample_rng.integers(len(self.object_pool), size=n)]

    def step(self, actions):
        obs, done = self.env.step(actions)
        reward = self.reward_fn(self.env, actions)
        return obs, reward, done

    def finish_episodes(self, done: np.ndarray):
        idx = np.flatnonzero(done)
        if len(idx) == 0:
            return
        for ok in self.env.is_success()[idx]:
            self.recent_success.append(bool(ok))
        del self.recent_success[:-self.success_window]
        self.env.reset_indices(idx, self.sample_objects(len(idx)))
        self.obs = self.env.observe()

    def success_rate(self) -> float:
        if not self.recent_success:
            return 0.0
        return float(np.mean(self.recent_success))


def collect_rollout(agent, runner: EnvRunner, steps: int, rng,
                    gamma: float) -> RolloutBuffer:
    """steps x num_envs transitions; time-limit truncations bootstrap the
    critic's value of the terminal state into that step's reward."""
    obs_rows, raw_rows, lp_rows, rew_rows, val_rows, done_rows = [], [], [], [], [], []
    raw_reward_sum = 0.0
    for _ in range(steps):
        obs = runner.obs
        flat = agent.flat(obs)
        action, raw, lp, value = agent.act(obs, rng)
        next_obs, reward, done = runner.step(action)
        raw_reward_sum += float(reward.mean())
        runner.obs = next_obs
        if np.any(done):
            v_term = agent.value(next_obs)
            reward = reward + gamma * v_term * done
            runner.finish_episodes(done)
        obs_rows.append(flat)
        raw_rows.append(raw)
        lp_rows.append(lp)
        rew_rows.append(reward)
        val_rows.append(value)
        done_rows.append(done.astype(np.float64))
    last_value = agent.value(runner.obs)
    return RolloutBuffer(
        obs=np.stack(obs_rows), raw=np.stack(raw_rows), logprob=np.stack(lp_rows),
        reward=np.stack(rew_rows), raw_reward_mean=raw_reward_sum / steps,
        value=np.stack(val_rows), done=np.stack(done_rows), last_value=last_value)


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """delta_t = r_t + gamma*v_{t+1}*(1-done_t) - v_t;
    A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1}; returns = A + v."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = len(rewards)
    adv = np.zeros_like(rewards)
    acc = np.zeros_like(np.atleast_1d(last_value), dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        v_next = last_value if t == t_len - 1 else values[t + 1]
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * v_next * nonterm - values[t]
        acc = delta + gamma * lam * nonterm * acc
        adv[t] = acc
    return adv, adv + values


def ppo_update(agent, buffer: RolloutBuffer, cfg: PpoConfig, rng,
               adam_state: AdamState) -> dict:
    """Clipped-surrogate update over epochs x minibatches; advantages are
    normalized per update batch."""
    t_len, n, d = buffer.obs.shape
    m = t_len * n
    obs = buffer.obs.reshape(m, d)
    raw = buffer.raw.reshape(m, -1)
    old_lp = buffer.logprob.reshape(m)
    adv = buffer.advantages.reshape(m)
    ret = buffer.returns.reshape(m)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"ratio": [], "clip_fraction": [], "value_loss": [], "policy_loss": []}
    for _ in range(cfg.epochs):
        perm = rng.permutation(m)
        for chunk in np.array_split(perm, cfg.minibatches):
            mb = len(chunk)
            lp, v, cache = agent.evaluate(obs[chunk], raw[chunk])
            if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(v))):
                raise TrainError("non-finite logprob/value in PPO update")
            ratio = np.exp(lp - old_lp[chunk])
            a = adv[chunk]
            surr1 = ratio * a
            surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * a
            use = surr1 <= surr2
            verr = v - ret[chunk]
            dlp = -(a * ratio * use) / mb
            dv = cfg.value_coeff * 2.0 * verr / mb
            grads = agent.backward(cache, dlp, dv, -cfg.entropy_coeff)
            adam_step(agent.params, grads, adam_state, cfg.lr, cfg.max_grad_norm)
            stats["ratio"].append(float(ratio.mean()))
            stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
            stats["value_loss"].append(float(np.mean(verr * verr)))
            stats["policy_loss"].append(float(-np.minimum(surr1, surr2).mean()))
    return {key: float(np.mean(vals)) for key, vals in stats.items()}


METRIC_COLUMNS = ("iteration", "mean_reward", "success_rate", "clip_fraction",
                  "value_loss", "entropy")


def train_loop(agent, runner: EnvRunner, cfg: PpoConfig, seed: int,
               callback=None) -> list:
    """iterations x (collect, GAE, update). Returns one metrics row per
    iteration; fully deterministic in (seed, config).

    Late PPO updates can walk away from a good policy, so the parameters
    with the best rolling success seen during training are kept and
    restored at the end.
    """
    collect_rng = rng_stream(seed, 10)
    update_rng = rng_stream(seed, 11)
    adam_state = AdamState()
    history = []
    best_success = -1.0
    best_params = None
    for it in range(cfg.iterations):
        buf = collect_rollout(agent, runner, cfg.rollout_steps, collect_rng, cfg.gamma)
        buf.advantages, buf.returns = compute_gae(
            buf.reward, buf.value, buf.done, buf.last_value, cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(agent, buf, cfg, update_rng, adam_state)
        success = runner.success_rate()
        if success > best_success:
            best_success = success
            best_params = {k: v.copy() for k, v in agent.params.items()}
        row = {"iteration": it, "mean_reward": buf.raw_reward_mean,
               "success_rate": success,
               "clip_fraction": stats["clip_fraction"],
               "value_loss": stats["value_loss"], "entropy": agent.entropy()}
        history.append(row)
        if callback is not None:
            callback(it, agent, row)
    if best_params is not None and best_success > runner.success_rate():
        for k in agent.params:
            agent.params[k][...] = best_params[k]
    return history
