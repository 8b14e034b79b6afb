"""Scripted proposal-execution policy: approach the proposal pose, close the
fingers, lift to the target. Used as an environment sanity oracle and as the
pinned evaluation baseline.
"""

from __future__ import annotations

import numpy as np

from .env import ACTION_DIM, NUM_JOINTS, PlanarVecEnv, rot2, wrap_angle

APPROACH, CLOSE, LIFT = 0, 1, 2


class ScriptedGrasper:
    """Deterministic three-phase controller over a vectorized env."""

    def __init__(self, env: PlanarVecEnv, open_amount: float = 0.35,
                 squeeze: float = 0.3, kp: float = 300.0, kd: float = 120.0,
                 ka: float = 30.0, close_steps: int = 12):
        self.env = env
        self.open_amount = open_amount
        self.squeeze = squeeze
        self.kp, self.kd, self.ka = kp, kd, ka
        self.close_steps = close_steps
        self.phase = np.zeros(env.num_envs, dtype=np.int64)
        self.close_timer = np.zeros(env.num_envs, dtype=np.int64)

    def reset(self, idx=None):
        if idx is None:
            self.phase[:] = APPROACH
            self.close_timer[:] = 0
        else:
            self.phase[idx] = APPROACH
            self.close_timer[idx] = 0

    def _joint_action(self, q):
        cfg = self.env.cfg
        q = np.clip(q, cfg.joint_low, cfg.joint_high)
        return 2.0 * (q - cfg.joint_low) / (cfg.joint_high - cfg.joint_low) - 1.0

    def act(self) -> np.ndarray:
        env = self.env
        cfg = env.cfg
        prop = env.proposal_vectors()
        c, s = np.cos(env.object_angle), np.sin(env.object_angle)
        off = prop[:, 1:3]
        grasp_base = np.stack([
            env.object_pos[:, 0] + c * off[:, 0] - s * off[:, 1],
            env.object_pos[:, 1] + s * off[:, 0] + c * off[:, 1]], axis=1)
        grasp_angle = wrap_angle(env.object_angle + prop[:, 0])
        q_grasp = prop[:, 3:3 + NUM_JOINTS]

        near = np.linalg.norm(env.base_pos - grasp_base, axis=1) < 0.01
        self.phase = np.where((self.phase == APPROACH) & near, CLOSE, self.phase)
        closing = self.phase == CLOSE
        self.close_timer[closing] += 1
        ready = env.attached | (self.close_timer >= self.close_steps)
        self.phase = np.where(closing & ready, LIFT, self.phase)

        target_base = np.where(
            (self.phase == LIFT)[:, None],
            cfg.target_pos + (env.base_pos - env.object_pos), grasp_base)
        squeeze = np.array([self.squeeze, 0.0, self.squeeze, 0.0])
        q_target = np.where((self.phase == APPROACH)[:, None],
                            q_grasp - self.open_amount, q_grasp + squeeze)

        action = np.zeros((env.num_envs, ACTION_DIM))
        action[:, :NUM_JOINTS] = self._joint_action(q_target)
        force = self.kp * (target_base - env.base_pos) - self.kd * env.base_vel / cfg.base_accel * 0.01
        action[:, 4:6] = np.clip(force, -1.0, 1.0)
        dang = wrap_angle(grasp_angle - env.base_angle)
        action[:, 6] = np.clip(self.ka * dang, -1.0, 1.0)
        return action

    def run_episode(self):
        """Steps the current episodes to completion; returns success mask."""
        self.reset()
        done = np.zeros(self.env.num_envs, dtype=bool)
        while not np.all(done):
            _, done = self.env.step(self.act())
        return self.env.is_success()
