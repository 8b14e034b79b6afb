"""Deterministic planar grasping environment.

A floating two-finger gripper (4 finger joints, planar wrench at the base)
must grasp a polygon resting on a table and lift its centroid to a target
height. Dynamics are quasi-static: joints rate-limit toward targets, the
base integrates the wrench as a damped velocity, and a latched attach rule
replaces contact-rich physics. All envs in a batch step together on numpy
arrays; identical seeds give bitwise-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import rng_stream

ACTION_DIM = 7          # 4 joint targets + planar wrench (fx, fy, torque)
NUM_JOINTS = 4
POS_SCALE = 5.0         # position normalization for observations
OBS_CLIP = 5.0

OBS_LAYERS = ("proprio", "object_pos", "object_rot", "object_code",
              "point_cloud", "prev_action", "target_pos")


class EnvError(ValueError):
    pass


class ProposalError(ValueError):
    """No valid grasp proposal could be synthesized for an object."""


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def rot2(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


@dataclass
class EnvConfig:
    episode_length: int = 100
    # gripper geometry
    mount_span: float = 0.18
    link1: float = 0.08
    link2: float = 0.08
    joint_low: float = -1.2
    joint_high: float = 2.4
    max_joint_delta: float = 0.15
    # base dynamics: v' = damping*v + accel*wrench, |v'| <= vmax
    base_damping: float = 0.8
    base_accel: float = 0.004
    base_vmax: float = 0.02
    ang_damping: float = 0.8
    ang_accel: float = 0.002
    ang_vmax: float = 0.01
    base_angle_limit: float = 0.5
    base_x_limit: float = 0.4
    base_y_min: float = 0.02
    base_y_max: float = 0.45
    # contacts and attachment
    contact_eps: float = 0.012
    release_margin: float = 0.012
    # task
    target_height: float = 0.20
    success_radius: float = 0.05
    hand_init_height: float = 0.20
    drop_height: float = 0.10
    reset_x_jitter: float = 0.02
    # proposal synthesis
    grasp_hover: float = 0.06
    proposal_chord_max_tilt: float = 0.35
    proposal_normal_tol: float = np.deg2rad(20.0)
    proposal_max_aspect: float = 6.0

    @property
    def target_pos(self) -> np.ndarray:
        return np.array([0.0, self.target_height])

    def scale_joint_targets(self, a):
        return self.joint_low + (a + 1.0) * 0.5 * (self.joint_high - self.joint_low)


@dataclass
class GraspProposal:
    """Target grasp: wrist rotation and offset relative to the object, plus
    finger joint targets."""

    wrist_rot: float
    wrist_offset: np.ndarray
    joint_targets: np.ndarray

    def to_record(self) -> dict:
        return {"wrist_rot": float(self.wrist_rot),
                "wrist_offset": self.wrist_offset.tolist(),
                "joint_targets": self.joint_targets.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "GraspProposal":
        return cls(wrist_rot=rec["wrist_rot"],
                   wrist_offset=np.array(rec["wrist_offset"]),
                   joint_targets=np.array(rec["joint_targets"]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.wrist_rot], self.wrist_offset,
                               self.joint_targets])


# finger side signs: positive joint angles curl finger 0 (left) rightward and
# finger 1 (right) leftward, i.e. inward
FINGER_SIGNS = np.array([1.0, -1.0])


def fingertips(cfg: EnvConfig, base_pos, base_angle, joints):
    """Fingertip world positions; batched over leading axes.

    base_pos (..., 2), base_angle (...), joints (..., 4) ->
    tips (..., 2, 2) and mounts (..., 2, 2), finger-major.
    """
    base_pos = np.asarray(base_pos, dtype=np.float64)
    base_angle = np.asarray(base_angle, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    c, s = np.cos(base_angle), np.sin(base_angle)
    half = 0.5 * cfg.mount_span
    offx = np.stack([-half * c, -half * s], axis=-1)
    mounts = np.stack([base_pos + offx, base_pos - offx], axis=-2)
    q = joints.reshape(joints.shape[:-1] + (2, 2))
    a1 = base_angle[..., None] - 0.5 * np.pi + FINGER_SIGNS * q[..., 0]
    a2 = a1 + FINGER_SIGNS * q[..., 1]
    tips = mounts + cfg.link1 * np.stack([np.cos(a1), np.sin(a1)], axis=-1) \
        + cfg.link2 * np.stack([np.cos(a2), np.sin(a2)], axis=-1)
    return tips, mounts


def _ik_finger(cfg: EnvConfig, dx: float, dy: float, sign: float):
    """2-link IK in the gripper frame, target relative to the mount.

    Returns candidate (q1, q2) pairs within joint limits (may be empty).
    """
    d2 = dx * dx + dy * dy
    d = np.sqrt(d2)
    l1, l2 = cfg.link1, cfg.link2
    if d < abs(l1 - l2) + 1e-9 or d > l1 + l2 - 1e-9:
        return []
    phi = np.arctan2(dy, dx)
    psi = np.arccos(np.clip((d2 + l1 * l1 - l2 * l2) / (2.0 * l1 * d), -1.0, 1.0))
    out = []
    for elbow in (1.0, -1.0):
        g1 = phi + elbow * psi
        g2 = np.arctan2(dy - l1 * np.sin(g1), dx - l1 * np.cos(g1))
        q1 = wrap_angle(sign * (g1 + 0.5 * np.pi))
        q2 = wrap_angle(sign * (g2 - g1))
        if cfg.joint_low <= q1 <= cfg.joint_high and cfg.joint_low <= q2 <= cfg.joint_high:
            out.append((float(q1), float(q2)))
    return out


def _cloud_normals(cloud: np.ndarray) -> np.ndarray:
    """Outward normals at boundary-cloud points of a CCW polygon."""
    tang = np.roll(cloud, -1, axis=0) - np.roll(cloud, 1, axis=0)
    normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)


def synthesize_proposal(shape, rng: np.random.Generator,
                        cfg: EnvConfig | None = None) -> GraspProposal:
    """Pick an antipodal boundary pair, place the wrist over its midpoint and
    solve finger IK. Raises ProposalError when no valid grasp exists."""
    cfg = cfg or EnvConfig()
    cloud = shape.point_cloud
    if shape.code[2] > cfg.proposal_max_aspect:
        raise ProposalError(f"object {shape.id}: aspect ratio too high")
    normals = _cloud_normals(cloud)
    cos_tol = np.cos(cfg.proposal_normal_tol)
    candidates = []
    n = len(cloud)
    for i in range(n):
        for j in range(i + 1, n):
            v = cloud[j] - cloud[i]
            gap = np.linalg.norm(v)
            if gap < 0.02:
                continue
            vhat = v / gap
            # normals opposite each other and aligned with the chord
            if normals[i] @ normals[j] > -cos_tol:
                continue
            if normals[i] @ (-vhat) < 0.5 or normals[j] @ vhat < 0.5:
                continue
            alpha = np.arctan2(v[1], v[0])
            alpha = wrap_angle(alpha + np.pi) if abs(wrap_angle(alpha)) > 0.5 * np.pi \
                else wrap_angle(alpha)
            if abs(alpha) > cfg.proposal_chord_max_tilt:
                continue
            sol = _solve_candidate(cfg, shape, cloud[i], cloud[j], alpha)
            if sol is not None:
                candidates.append(sol)
    if not candidates:
        raise ProposalError(f"object {shape.id}: no antipodal grasp found")
    return candidates[int(rng.integers(len(candidates)))]


def _solve_candidate(cfg: EnvConfig, shape, p_a, p_b, alpha):
    if abs(alpha) > cfg.base_angle_limit:
        return None
    mid = 0.5 * (p_a + p_b)
    base = mid + rot2(alpha) @ np.array([0.0, cfg.grasp_hover])
    rel = rot2(-alpha)
    pa_g, pb_g = rel @ (p_a - base), rel @ (p_b - base)
    left, right = (pa_g, pb_g) if pa_g[0] <= pb_g[0] else (pb_g, pa_g)
    half = 0.5 * cfg.mount_span
    joints = []
    for target, mount_x, sign in ((left, -half, 1.0), (right, half, -1.0)):
        sols = _ik_finger(cfg, target[0] - mount_x, target[1], sign)
        if not sols:
            return None
        # prefer the elbow-out solution: smallest |q1|
        joints.extend(min(sols, key=lambda q: abs(q[0])))
    prop = GraspProposal(wrist_rot=float(alpha), wrist_offset=base.copy(),
                         joint_targets=np.array(joints))
    # validate by forward kinematics against the chosen boundary points
    tips, _ = fingertips(cfg, base[None, :], np.array([alpha]),
                         prop.joint_targets[None, :])
    targets = np.stack([left, right]) @ rel + base  # back to object frame
    err = np.linalg.norm(tips[0] - targets, axis=1)
    if np.max(err) > 1.5 * cfg.contact_eps:
        return None
    # base must stay inside the workspace when the object rests on the table
    base_y_world = base[1] + shape.rest_height
    if not (cfg.base_y_min <= base_y_world <= cfg.base_y_max):
        return None
    return prop


def _point_polygon_distance(points, verts):
    """Distance from points (N, 2) to polygons (N, V, 2), with the outward
    normal of the nearest edge and an inside flag. Inside distance is 0."""
    a = verts
    b = np.roll(verts, -1, axis=1)
    e = b - a                                       # (N, V, 2)
    w = points[:, None, :] - a                      # (N, V, 2)
    ee = np.sum(e * e, axis=2)
    t = np.clip(np.sum(w * e, axis=2) / np.maximum(ee, 1e-300), 0.0, 1.0)
    closest = a + t[..., None] * e
    diff = points[:, None, :] - closest
    dist = np.sqrt(np.sum(diff * diff, axis=2))     # (N, V)
    idx = np.argmin(dist, axis=1)
    rows = np.arange(len(points))
    min_dist = dist[rows, idx]
    edge = e[rows, idx]
    normal = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-300)
    # crossing-number inside test
    ay, by = a[..., 1], b[..., 1]
    px, py = points[:, 0, None], points[:, 1, None]
    crosses = (ay <= py) != (by <= py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[..., 0] + (py - ay) / np.where(by - ay == 0.0, np.inf, by - ay) * e[..., 0]
    inside = np.sum(crosses & (xint > px), axis=1) % 2 == 1
    return np.where(inside, 0.0, min_dist), normal, inside


@dataclass
class EnvState:
    """Per-env snapshot used by rewards and tests."""

    base_pos: np.ndarray
    base_angle: float
    joints: np.ndarray
    object_pos: np.ndarray      # 3-d, z = 0
    object_angle: float
    attached: bool
    contacts: np.ndarray        # per-fingertip bool
    forces: np.ndarray          # per-fingertip normal-force scalar
    t: int
    prev_action: np.ndarray


@dataclass
class Observation:
    """Layered observation; every layer is already normalized and clipped."""

    proprio: np.ndarray
    object_pos: np.ndarray
    object_rot: np.ndarray
    object_code: np.ndarray
    point_cloud: np.ndarray
    prev_action: np.ndarray
    target_pos: np.ndarray

    def layer(self, name: str) -> np.ndarray:
        return getattr(self, name)


def layer_dims(cfg: EnvConfig) -> dict:
    return {"proprio": 13, "object_pos": 3, "object_rot": 2, "object_code": 8,
            "point_cloud": 64, "prev_action": ACTION_DIM, "target_pos": 2}


class PlanarVecEnv:
    """Batch of independent planar grasping envs sharing an object list.

    Each env is bound to one object (index into `objects`) per episode;
    rebinding happens at reset. Per-env RNG streams are keyed by
    (seed, env_index) and used only for reset jitter.
    """

    def __init__(self, objects, proposals, num_envs: int, seed: int,
                 cfg: EnvConfig | None = None):
        if not objects:
            raise EnvError("need at least one object")
        self.cfg = cfg or EnvConfig()
        self.objects = list(objects)
        self.proposals = list(proposals)
        if len(self.proposals) != len(self.objects):
            raise EnvError("objects and proposals must align")
        self.num_envs = num_envs
        self.seed = seed
        self._rngs = [rng_stream(seed, 1000 + i) for i in range(num_envs)]
        vmax = max(len(o.vertices) for o in self.objects)
        self._verts = np.stack([
            np.concatenate([o.vertices, np.repeat(o.vertices[-1:], vmax - len(o.vertices), axis=0)])
            for o in self.objects])
        self._codes = np.stack([o.code for o in self.objects])
        self._clouds = np.stack([o.point_cloud for o in self.objects])
        self._rest = np.array([o.rest_height for o in self.objects])
        self._prop_vecs = np.stack([p.as_vector() for p in self.proposals])

        n = num_envs
        self.obj_index = np.zeros(n, dtype=np.intp)
        self.base_pos = np.zeros((n, 2))
        self.base_vel = np.zeros((n, 2))
        self.base_angle = np.zeros(n)
        self.base_avel = np.zeros(n)
        self.joints = np.zeros((n, NUM_JOINTS))
        self.object_pos = np.zeros((n, 2))
        self.object_angle = np.zeros(n)
        self.attached = np.zeros(n, dtype=bool)
        self.attach_off = np.zeros((n, 2))
        self.attach_dangle = np.zeros(n)
        self.attach_gap = np.zeros(n)
        self.contacts = np.zeros((n, 2), dtype=bool)
        self.forces = np.zeros((n, 2))
        self.tips = np.zeros((n, 2, 2))
        self.t = np.zeros(n, dtype=np.int64)
        self.prev_action = np.zeros((n, ACTION_DIM))
        self.success_latch = np.zeros(n, dtype=bool)

    # -- resets ------------------------------------------------------------

    def reset_indices(self, idx: np.ndarray, object_indices: np.ndarray) -> None:
        cfg = self.cfg
        idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))
        object_indices = np.atleast_1d(np.asarray(object_indices, dtype=np.intp))
        self.obj_index[idx] = object_indices
        jitter = np.array([self._rngs[i].uniform(-cfg.reset_x_jitter, cfg.reset_x_jitter)
                           for i in idx])
        # the object drops from cfg.drop_height and settles immediately
        self.object_pos[idx, 0] = jitter
        self.object_pos[idx, 1] = self._rest[object_indices]
        self.object_angle[idx] = 0.0
        self.base_pos[idx, 0] = jitter
        self.base_pos[idx, 1] = cfg.hand_init_height
        self.base_vel[idx] = 0.0
        self.base_angle[idx] = 0.0
        self.base_avel[idx] = 0.0
        self.joints[idx] = 0.0
        self.attached[idx] = False
        self.contacts[idx] = False
        self.forces[idx] = 0.0
        self.t[idx] = 0
        self.prev_action[idx] = 0.0
        self.success_latch[idx] = False
        self._refresh_tips(idx)

    def reset_all(self, object_indices) -> Observation:
        self.reset_indices(np.arange(self.num_envs), object_indices)
        return self.observe()

    def reset(self, env_index: int, object_index: int) -> Observation:
        self.reset_indices(np.array([env_index]), np.array([object_index]))
        return self.observe()

    def _refresh_tips(self, idx=None):
        if idx is None:
            self.tips, _ = fingertips(self.cfg, self.base_pos, self.base_angle, self.joints)
        else:
            t, _ = fingertips(self.cfg, self.base_pos[idx], self.base_angle[idx],
                              self.joints[idx])
            self.tips[idx] = t

    # -- stepping ----------------------------------------------------------

    def step(self, actions: np.ndarray) -> tuple:
        """Advance every env one timestep. Returns (obs, done mask)."""
        cfg = self.cfg
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, ACTION_DIM):
            raise EnvError(f"bad action shape {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise EnvError("non-finite action")
        if np.any(self.t >= cfg.episode_length):
            raise EnvError("step called on a finished episode")
        actions = np.clip(actions, -1.0, 1.0)

        targets = cfg.scale_joint_targets(actions[:, :NUM_JOINTS])
        delta = np.clip(targets - self.joints, -cfg.max_joint_delta, cfg.max_joint_delta)
        self.joints = np.clip(self.joints + delta, cfg.joint_low, cfg.joint_high)

        wrench = actions[:, NUM_JOINTS:]
        self.base_vel = np.clip(cfg.base_damping * self.base_vel
                                + cfg.base_accel * wrench[:, :2],
                                -cfg.base_vmax, cfg.base_vmax)
        self.base_avel = np.clip(cfg.ang_damping * self.base_avel
                                 + cfg.ang_accel * wrench[:, 2],
                                 -cfg.ang_vmax, cfg.ang_vmax)
        self.base_pos = self.base_pos + self.base_vel
        self.base_pos[:, 0] = np.clip(self.base_pos[:, 0], -cfg.base_x_limit, cfg.base_x_limit)
        self.base_pos[:, 1] = np.clip(self.base_pos[:, 1], cfg.base_y_min, cfg.base_y_max)
        self.base_angle = np.clip(self.base_angle + self.base_avel,
                                  -cfg.base_angle_limit, cfg.base_angle_limit)

        # attached objects follow the gripper frame rigidly
        att = self.attached
        if np.any(att):
            c, s = np.cos(self.base_angle[att]), np.sin(self.base_angle[att])
            ox, oy = self.attach_off[att, 0], self.attach_off[att, 1]
            self.object_pos[att, 0] = self.base_pos[att, 0] + c * ox - s * oy
            self.object_pos[att, 1] = self.base_pos[att, 1] + s * ox + c * oy
            self.object_angle[att] = self.base_angle[att] + self.attach_dangle[att]

        world_verts, rest = self._world_vertices()
        free = ~att
        self.object_pos[free, 1] = rest[free]
        if np.any(free):
            world_verts, rest = self._world_vertices()

        self._refresh_tips()
        self._update_contacts(world_verts)
        self.success_latch |= self._at_target()
        self.t += 1
        done = self.t >= cfg.episode_length
        self.prev_action = actions.copy()
        return self.observe(), done

    def _world_vertices(self):
        local = self._verts[self.obj_index]
        c, s = np.cos(self.object_angle), np.sin(self.object_angle)
        x = c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
        y = s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
        rest = -np.min(y, axis=1)
        world = np.stack([x + self.object_pos[:, 0, None],
                          y + self.object_pos[:, 1, None]], axis=-1)
        return world, rest

    def _update_contacts(self, world_verts):
        cfg = self.cfg
        d0, n0, _ = _point_polygon_distance(self.tips[:, 0], world_verts)
        d1, n1, _ = _point_polygon_distance(self.tips[:, 1], world_verts)
        dist = np.stack([d0, d1], axis=1)
        self.contacts = dist <= cfg.contact_eps
        self.forces = np.clip((cfg.contact_eps - dist) / cfg.contact_eps, 0.0, 1.0)

        gap_vec = self.tips[:, 1] - self.tips[:, 0]
        gap = np.linalg.norm(gap_vec, axis=1)
        axis = gap_vec / np.maximum(gap, 1e-300)[:, None]
        proj = np.einsum("nvk,nk->nv", world_verts, axis)
        width = proj.max(axis=1) - proj.min(axis=1)

        # the object center must sit between the tips along the gap axis,
        # ruling out both tips touching the same side
        s0 = np.einsum("nk,nk->n", self.tips[:, 0] - self.object_pos, axis)
        s1 = np.einsum("nk,nk->n", self.tips[:, 1] - self.object_pos, axis)
        straddle = (s0 < 0.0) & (s1 > 0.0)
        grab = (~self.attached) & self.contacts.all(axis=1) & (gap < width) & straddle
        if np.any(grab):
            c, s = np.cos(-self.base_angle[grab]), np.sin(-self.base_angle[grab])
            dx = self.object_pos[grab, 0] - self.base_pos[grab, 0]
            dy = self.object_pos[grab, 1] - self.base_pos[grab, 1]
            self.attach_off[grab, 0] = c * dx - s * dy
            self.attach_off[grab, 1] = s * dx + c * dy
            self.attach_dangle[grab] = self.object_angle[grab] - self.base_angle[grab]
            self.attach_gap[grab] = gap[grab]
            self.attached |= grab
        release = self.attached & (gap > self.attach_gap + cfg.release_margin)
        self.attached &= ~release

    def _at_target(self):
        d = self.object_pos - self.cfg.target_pos
        return np.hypot(d[:, 0], d[:, 1]) <= self.cfg.success_radius

    # -- views -------------------------------------------------------------

    def observe(self) -> Observation:
        cfg = self.cfg
        proprio = np.concatenate([
            self.base_pos * POS_SCALE,
            self.base_angle[:, None],
            self.joints,
            self.tips.reshape(self.num_envs, 4) * POS_SCALE,
            self.forces,
        ], axis=1)
        obj3 = np.concatenate([self.object_pos * POS_SCALE,
                               np.zeros((self.num_envs, 1))], axis=1)
        rot = np.stack([np.cos(self.object_angle), np.sin(self.object_angle)], axis=1)
        local = self._clouds[self.obj_index]
        c, s = np.cos(self.object_angle), np.sin(self.object_angle)
        wx = c[:, None] * local[..., 0] - s[:, None] * local[..., 1] + self.object_pos[:, 0, None]
        wy = s[:, None] * local[..., 0] + c[:, None] * local[..., 1] + self.object_pos[:, 1, None]
        cloud = np.stack([wx, wy], axis=-1).reshape(self.num_envs, -1) * POS_SCALE
        target = np.tile(cfg.target_pos * POS_SCALE, (self.num_envs, 1))
        clip = lambda a: np.clip(a, -OBS_CLIP, OBS_CLIP)
        return Observation(
            proprio=clip(proprio), object_pos=clip(obj3), object_rot=clip(rot),
            object_code=clip(self._codes[self.obj_index]), point_cloud=clip(cloud),
            prev_action=clip(self.prev_action), target_pos=clip(target))

    def state(self, env_index: int) -> EnvState:
        return EnvState(
            base_pos=self.base_pos[env_index].copy(),
            base_angle=float(self.base_angle[env_index]),
            joints=self.joints[env_index].copy(),
            object_pos=np.array([self.object_pos[env_index, 0],
                                 self.object_pos[env_index, 1], 0.0]),
            object_angle=float(self.object_angle[env_index]),
            attached=bool(self.attached[env_index]),
            contacts=self.contacts[env_index].copy(),
            forces=self.forces[env_index].copy(),
            t=int(self.t[env_index]),
            prev_action=self.prev_action[env_index].copy())

    def current_grasp_pose(self) -> np.ndarray:
        """(N, 7) vectors [R_t, t_t (2), q_t (4)] relative to the object."""
        rot = wrap_angle(self.base_angle - self.object_angle)
        c, s = np.cos(-self.object_angle), np.sin(-self.object_angle)
        dx = self.base_pos[:, 0] - self.object_pos[:, 0]
        dy = self.base_pos[:, 1] - self.object_pos[:, 1]
        off = np.stack([c * dx - s * dy, s * dx + c * dy], axis=1)
        return np.concatenate([rot[:, None], off, self.joints], axis=1)

    def proposal_vectors(self) -> np.ndarray:
        """(N, 7) proposal [R, t, q] for each env's bound object."""
        return self._prop_vecs[self.obj_index]

    def is_success(self) -> np.ndarray:
        """Latched: object center reached the target at some step."""
        return self.success_latch.copy()
