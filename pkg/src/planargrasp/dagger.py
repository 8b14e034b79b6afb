"""Online distillation of the state-based MoE teacher into the point-cloud
student: the student drives the envs, the frozen teacher labels the visited
states, and the student regresses the labels by MSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, adam_step, rng_stream


@dataclass
class DaggerConfig:
    lr: float = 3e-4
    rollout_steps: int = 1
    epochs: int = 5
    minibatches: int = 4
    num_envs: int = 256
    iterations: int = 500
    max_grad_norm: float = 1.0
    aggregate: bool = False     # classic dataset aggregation across iterations
    aggregate_cap: int = 50_000
    rollout_noise: float = 0.0  # exploration noise on the student's rollout
                                # actions; labels stay clean, so the student
                                # learns recoveries from off-policy states

    def __post_init__(self):
        assert min(self.rollout_steps, self.epochs, self.minibatches,
                   self.num_envs, self.lr > 0) > 0


def distill(teacher, student, runner, cfg: DaggerConfig, seed: int,
            callback=None) -> list:
    """Each iteration: roll the envs with the student's deterministic action,
    label every visited state with the teacher's combined deterministic
    action, regress student -> label over epochs x minibatches.

    Returns one metrics row per iteration: iteration, label_mse, success_rate.
    """
    update_rng = rng_stream(seed, 21)
    noise_rng = rng_stream(seed, 22)
    adam_state = AdamState()
    history = []
    bank_obs: list = []
    bank_labels: list = []
    for it in range(cfg.iterations):
        step_obs = []
        step_labels = []
        for _ in range(cfg.rollout_steps):
            obs = runner.obs
            action = student.act(obs)
            label, _ = teacher.act(obs, deterministic=True)
            step_obs.append(obs)
            step_labels.append(label)
            if cfg.rollout_noise > 0.0:
                action = np.clip(
                    action + cfg.rollout_noise
                    * noise_rng.standard_normal(action.shape), -1.0, 1.0)
            next_obs, done = runner.env.step(action)
            runner.obs = next_obs
            if np.any(done):
                runner.finish_episodes(done)

        if cfg.aggregate:
            bank_obs.extend(step_obs)
            bank_labels.extend(step_labels)
            overflow = sum(len(l) for l in bank_labels) - cfg.aggregate_cap
            while overflow > 0 and len(bank_labels) > 1:
                overflow -= len(bank_labels.pop(0))
                bank_obs.pop(0)
            train_obs, train_labels = bank_obs, bank_labels
        else:
            train_obs, train_labels = step_obs, step_labels

        mse = _regress(student, train_obs, train_labels, cfg, update_rng, adam_state)
        row = {"iteration": it, "label_mse": mse,
               "success_rate": runner.success_rate()}
        history.append(row)
        if callback is not None:
            callback(it, student, row)
    return history


def _regress(student, obs_list, label_list, cfg: DaggerConfig, rng,
             adam_state: AdamState) -> float:
    total_mse = 0.0
    count = 0
    batches = list(range(len(obs_list)))
    for _ in range(cfg.epochs):
        for bi in rng.permutation(len(batches)):
            obs = obs_list[bi]
            labels = label_list[bi]
            n = len(labels)
            perm = rng.permutation(n)
            for chunk in np.array_split(perm, cfg.minibatches):
                sub = _index_obs(obs, chunk)
                action, cache = student.forward_cached(sub)
                err = action - labels[chunk]
                mse = float(np.mean(err * err))
                grads = student.backward(cache, 2.0 * err / err.size)
                adam_step(student.params, grads, adam_state, cfg.lr,
                          cfg.max_grad_norm)
                total_mse += mse
                count += 1
    return total_mse / max(count, 1)


def _index_obs(obs, idx):
    from .env import Observation
    return Observation(**{name: getattr(obs, name)[idx]
                          for name in ("proprio", "object_pos", "object_rot",
                                       "object_code", "point_cloud",
                                       "prev_action", "target_pos")})
