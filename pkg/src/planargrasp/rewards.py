"""Reward functions: proposal / pose rewards, the four-term task reward with
its indicator gates, the two hyper-policy reward stages, and the cumulative
grasp-pose distance metric.

All functions are pure and batched: scalar fields are (N,) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import NUM_JOINTS, wrap_angle


@dataclass
class RewardConfig:
    alpha: float = 1.0              # proposal-reward weight in stage 1
    pose_coeff: float = 0.05
    reach_hand_coeff: float = 1.0
    reach_finger_coeff: float = 0.5
    lift_base: float = 0.1
    lift_az_coeff: float = 0.1
    move_coeff: float = 2.0
    move_offset: float = 0.9
    bonus_scale: float = 10.0
    bonus_threshold: float = 0.05
    # indicator thresholds; desk-scale defaults, paper preset below
    finger_dist_sum_max: float = 0.3
    hand_dist_max: float = 0.08
    joint_l1_max: float = 3.0

    @classmethod
    def paper_preset(cls) -> "RewardConfig":
        return cls(finger_dist_sum_max=0.6, hand_dist_max=0.12, joint_l1_max=6.0)

    def to_record(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_record(cls, rec: dict) -> "RewardConfig":
        return cls(**rec)


@dataclass
class RewardInputs:
    """Geometry extracted from the environment for one batch step."""

    hand_pos: np.ndarray        # (N, 2)
    finger_pos: np.ndarray      # (N, 2, 2)
    object_pos: np.ndarray      # (N, 2)
    joints: np.ndarray          # (N, 4)
    proposal_joints: np.ndarray  # (N, 4)
    target_pos: np.ndarray      # (2,)
    a_z: np.ndarray             # (N,) upward wrist force component
    grasp_pose: np.ndarray      # (N, 7) current [R_t, t_t, q_t]
    proposal_vec: np.ndarray    # (N, 7) proposal [R, t, q]


def reward_inputs(env, actions: np.ndarray) -> RewardInputs:
    actions = np.asarray(actions, dtype=np.float64)
    prop = env.proposal_vectors()
    return RewardInputs(
        hand_pos=env.base_pos.copy(),
        finger_pos=env.tips.copy(),
        object_pos=env.object_pos.copy(),
        joints=env.joints.copy(),
        proposal_joints=prop[:, 3:3 + NUM_JOINTS],
        target_pos=env.cfg.target_pos,
        a_z=actions[:, 5],
        grasp_pose=env.current_grasp_pose(),
        proposal_vec=prop)


@dataclass
class RewardBreakdown:
    task: np.ndarray
    proposal: np.ndarray
    pose: np.ndarray
    reach: np.ndarray
    lift: np.ndarray
    move: np.ndarray
    bonus: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    d_obj: np.ndarray


def grasp_pose_distance(g: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    """Norm over concatenated wrapped rotation, offset, and joint differences."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    g_t = np.atleast_2d(np.asarray(g_t, dtype=np.float64))
    diff = g - g_t
    rot = wrap_angle(diff[..., 0])
    return np.sqrt(rot * rot + np.sum(diff[..., 1:] ** 2, axis=-1))


def proposal_reward(g: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    return -grasp_pose_distance(g, g_t)


def pose_reward(q: np.ndarray, q_t: np.ndarray,
                cfg: RewardConfig | None = None) -> np.ndarray:
    """Negative scaled L1 distance between joint targets; no object inputs."""
    coeff = (cfg or RewardConfig()).pose_coeff
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    q_t = np.atleast_2d(np.asarray(q_t, dtype=np.float64))
    return -coeff * np.sum(np.abs(q - q_t), axis=-1)


def base_task_reward(inp: RewardInputs, cfg: RewardConfig) -> RewardBreakdown:
    """reach + lift + move + bonus with the f1/f2 indicator gates."""
    hand_dist = np.linalg.norm(inp.object_pos - inp.hand_pos, axis=-1)
    finger_dist = np.linalg.norm(inp.object_pos[:, None, :] - inp.finger_pos, axis=-1)
    finger_sum = finger_dist.sum(axis=1)
    reach = -cfg.reach_hand_coeff * hand_dist - cfg.reach_finger_coeff * finger_sum

    f1 = (finger_sum <= cfg.finger_dist_sum_max).astype(np.int64) \
        + (hand_dist <= cfg.hand_dist_max).astype(np.int64)
    joint_l1 = np.sum(np.abs(inp.proposal_joints - inp.joints), axis=-1)
    f2 = f1 + (joint_l1 <= cfg.joint_l1_max).astype(np.int64)

    lift = np.where(f1 == 2, cfg.lift_base + cfg.lift_az_coeff * inp.a_z, 0.0)
    d_obj = np.linalg.norm(inp.object_pos - inp.target_pos, axis=-1)
    move = np.where(f2 == 3, cfg.move_offset - cfg.move_coeff * d_obj, 0.0)
    bonus = np.where(d_obj <= cfg.bonus_threshold,
                     1.0 / (1.0 + cfg.bonus_scale * d_obj), 0.0)

    prop = proposal_reward(inp.proposal_vec, inp.grasp_pose)
    pose = pose_reward(inp.proposal_joints, inp.joints, cfg)
    return RewardBreakdown(task=reach + lift + move + bonus, proposal=prop,
                           pose=pose, reach=reach, lift=lift, move=move,
                           bonus=bonus, f1=f1, f2=f2, d_obj=d_obj)


def base_policy_reward(inp: RewardInputs, cfg: RewardConfig) -> np.ndarray:
    """Pose reward against the proposal's joint targets plus the task reward;
    no wrist-pose term, so the object's geometry never leaks in."""
    b = base_task_reward(inp, cfg)
    return b.pose + b.task


def stage1_reward(inp: RewardInputs, cfg: RewardConfig) -> np.ndarray:
    """Task reward plus the weighted grasp-proposal reward."""
    b = base_task_reward(inp, cfg)
    return b.task + cfg.alpha * b.proposal


def stage2_reward(inp: RewardInputs, cfg: RewardConfig) -> np.ndarray:
    """Lift/move/bonus only; move is gated on f1 == 2 instead of f2 == 3."""
    b = base_task_reward(inp, cfg)
    move = np.where(b.f1 == 2, cfg.move_offset - cfg.move_coeff * b.d_obj, 0.0)
    return b.lift + move + b.bonus


def d_metric(grasp_pose_traj: np.ndarray, proposal_vec: np.ndarray) -> float:
    """Cumulative grasp-pose distance over an episode; lower means the
    trajectory tracked the proposal more closely."""
    traj = np.atleast_2d(np.asarray(grasp_pose_traj, dtype=np.float64))
    return float(np.sum(grasp_pose_distance(proposal_vec, traj)))
