import numpy as np
import pytest

from planargrasp.env import (ACTION_DIM, EnvConfig, EnvError, GraspProposal,
                             PlanarVecEnv, ProposalError,
                             _ik_finger, _point_polygon_distance, fingertips,
                             layer_dims, rot2, synthesize_proposal, wrap_angle)
from planargrasp.numerics import rng_stream
from planargrasp.shapes import (BOX, ObjectShape, boundary_cloud,
                                generate_objects, make_shape, shape_code)

CFG = EnvConfig()


def small_dataset(seed=0):
    ds = generate_objects(seed, {"train": 3, "test_seen": 1, "test_unseen": 1})
    props = {}
    for obj in ds.all_objects():
        props[obj.id] = synthesize_proposal(obj, rng_stream(seed, 40 + obj.id))
    return ds, props


def make_env(num_envs=4, seed=0):
    ds, props = small_dataset()
    objs = ds.train
    env = PlanarVecEnv(objs, [props[o.id] for o in objs], num_envs, seed)
    env.reset_all(np.zeros(num_envs, dtype=int))
    return env


class TestAngles:
    def test_wrap_identity_in_range(self):
        for a in (-3.0, -0.5, 0.0, 1.0, 3.0):
            assert wrap_angle(a) == pytest.approx(a, abs=1e-12)

    def test_wrap_periodicity(self):
        xs = np.linspace(-10, 10, 101)
        assert np.allclose(wrap_angle(xs + 2 * np.pi), wrap_angle(xs), atol=1e-9)
        assert np.all(np.abs(wrap_angle(xs)) <= np.pi)

    def test_rot2_orthonormal(self):
        r = rot2(0.7)
        assert np.allclose(r @ r.T, np.eye(2), atol=1e-15)
        assert np.allclose(rot2(0.0), np.eye(2))


class TestFingertips:
    def test_straight_down_at_zero_joints(self):
        tips, mounts = fingertips(CFG, np.array([[0.0, 0.2]]), np.zeros(1),
                                  np.zeros((1, 4)))
        half = 0.5 * CFG.mount_span
        reach = CFG.link1 + CFG.link2
        assert np.allclose(mounts[0], [[-half, 0.2], [half, 0.2]], atol=1e-12)
        assert np.allclose(tips[0], [[-half, 0.2 - reach], [half, 0.2 - reach]],
                           atol=1e-12)

    def test_positive_joints_curl_inward(self):
        q = np.zeros((1, 4))
        q[0, 0] = 0.5   # left finger proximal
        q[0, 2] = 0.5   # right finger proximal
        tips, _ = fingertips(CFG, np.array([[0.0, 0.2]]), np.zeros(1), q)
        assert tips[0, 0, 0] > -0.5 * CFG.mount_span  # left tip moved right
        assert tips[0, 1, 0] < 0.5 * CFG.mount_span   # right tip moved left

    def test_translation_equivariance(self):
        rng = rng_stream(3)
        q = rng.uniform(-1.0, 2.0, size=(5, 4))
        base = rng.normal(size=(5, 2))
        ang = rng.uniform(-0.5, 0.5, size=5)
        tips, _ = fingertips(CFG, base, ang, q)
        tips2, _ = fingertips(CFG, base + [0.1, -0.2], ang, q)
        assert np.allclose(tips2 - tips, [0.1, -0.2], atol=1e-12)

    def test_rotation_equivariance(self):
        q = np.array([[0.4, 0.3, 0.8, 0.1]])
        tips0, _ = fingertips(CFG, np.zeros((1, 2)), np.zeros(1), q)
        phi = 0.3
        tips1, _ = fingertips(CFG, np.zeros((1, 2)), np.array([phi]), q)
        assert np.allclose(tips1[0], tips0[0] @ rot2(phi).T, atol=1e-12)

    def test_ik_fk_roundtrip(self):
        rng = rng_stream(8)
        half = 0.5 * CFG.mount_span
        hits = 0
        for _ in range(50):
            target = rng.uniform([-0.08, -0.15], [0.08, -0.01])
            for mount_x, sign, finger in ((-half, 1.0, 0), (half, -1.0, 1)):
                for q1, q2 in _ik_finger(CFG, target[0] - mount_x, target[1], sign):
                    q = np.zeros((1, 4))
                    q[0, 2 * finger:2 * finger + 2] = [q1, q2]
                    tips, _ = fingertips(CFG, np.zeros((1, 2)), np.zeros(1), q)
                    assert np.allclose(tips[0, finger], target, atol=1e-9)
                    hits += 1
        assert hits > 20  # the sampled box is mostly reachable

    def test_ik_unreachable_empty(self):
        assert _ik_finger(CFG, 0.5, 0.5, 1.0) == []
        assert _ik_finger(CFG, 0.0, 0.0, 1.0) == []


class TestPointPolygonDistance:
    SQ = np.array([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]])

    def test_outside_point(self):
        d, n, inside = _point_polygon_distance(np.array([[2.0, 0.5]]), self.SQ)
        assert d[0] == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(n[0], [1.0, 0.0], atol=1e-12)
        assert not inside[0]

    def test_corner_distance(self):
        d, _, inside = _point_polygon_distance(np.array([[2.0, 2.0]]), self.SQ)
        assert d[0] == pytest.approx(np.sqrt(2.0), abs=1e-12)
        assert not inside[0]

    def test_inside_point_zero(self):
        d, _, inside = _point_polygon_distance(np.array([[0.5, 0.5]]), self.SQ)
        assert d[0] == 0.0
        assert inside[0]

    def test_brute_force_oracle(self):
        shape = make_shape(0, BOX, rng_stream(5))
        verts = shape.vertices[None].repeat(30, axis=0)
        pts = rng_stream(6).uniform(-0.15, 0.15, size=(30, 2))
        d, _, inside = _point_polygon_distance(pts, verts)
        for i, p in enumerate(pts):
            v = shape.vertices
            seg = np.roll(v, -1, axis=0) - v
            rel = p - v
            t = np.clip(np.einsum("ij,ij->i", rel, seg)
                        / np.einsum("ij,ij->i", seg, seg), 0.0, 1.0)
            dmin = np.min(np.linalg.norm(rel - t[:, None] * seg, axis=1))
            if inside[i]:
                assert d[i] == 0.0
            else:
                assert d[i] == pytest.approx(dmin, abs=1e-12)


class TestProposals:
    def test_roundtrip_record(self):
        prop = GraspProposal(wrist_rot=0.2, wrist_offset=np.array([0.01, 0.06]),
                             joint_targets=np.array([0.5, 0.4, 0.6, 0.3]))
        again = GraspProposal.from_record(prop.to_record())
        assert again.wrist_rot == prop.wrist_rot
        assert np.array_equal(again.wrist_offset, prop.wrist_offset)
        assert np.array_equal(again.as_vector(), prop.as_vector())
        assert prop.as_vector().shape == (7,)

    def test_synthesized_proposal_is_kinematically_valid(self):
        ds, props = small_dataset()
        for obj in ds.all_objects():
            prop = props[obj.id]
            assert np.all(prop.joint_targets >= CFG.joint_low)
            assert np.all(prop.joint_targets <= CFG.joint_high)
            assert abs(prop.wrist_rot) <= CFG.base_angle_limit
            tips, _ = fingertips(CFG, prop.wrist_offset[None],
                                 np.array([prop.wrist_rot]),
                                 prop.joint_targets[None])
            d, _, _ = _point_polygon_distance(
                tips[0], obj.vertices[None].repeat(2, axis=0))
            assert np.all(d <= 1.5 * CFG.contact_eps + 1e-9)

    def test_deterministic(self):
        shape = make_shape(0, BOX, rng_stream(1))
        a = synthesize_proposal(shape, rng_stream(2))
        b = synthesize_proposal(shape, rng_stream(2))
        assert np.array_equal(a.as_vector(), b.as_vector())

    def test_high_aspect_rejected(self):
        verts = np.array([[-0.2, -0.005], [0.2, -0.005],
                          [0.2, 0.005], [-0.2, 0.005]])
        cloud = boundary_cloud(verts)
        thin = ObjectShape(id=9, category=BOX, vertices=verts,
                           code=shape_code(verts, cloud), point_cloud=cloud)
        with pytest.raises(ProposalError):
            synthesize_proposal(thin, rng_stream(0))


class TestEnvBasics:
    def test_reset_geometry(self):
        env = make_env(num_envs=3, seed=1)
        # object rests on the table: lowest world vertex at y = 0
        world, _ = env._world_vertices()
        assert np.allclose(world[..., 1].min(axis=1), 0.0, atol=1e-12)
        assert np.allclose(env.base_pos[:, 1], CFG.hand_init_height)
        assert np.all(np.abs(env.object_pos[:, 0]) <= CFG.reset_x_jitter)
        assert np.all(env.t == 0)
        assert not env.attached.any()
        assert not env.is_success().any()

    def test_observation_layers(self):
        env = make_env()
        obs = env.observe()
        dims = layer_dims(env.cfg)
        for name, d in dims.items():
            layer = obs.layer(name)
            assert layer.shape == (env.num_envs, d)
            assert np.all(np.abs(layer) <= 5.0)
        assert obs.object_pos[0, 2] == 0.0

    def test_bad_action_shape(self):
        env = make_env()
        with pytest.raises(EnvError):
            env.step(np.zeros((env.num_envs, 3)))

    def test_nonfinite_action(self):
        env = make_env()
        a = np.zeros((env.num_envs, ACTION_DIM))
        a[0, 0] = np.nan
        with pytest.raises(EnvError):
            env.step(a)

    def test_episode_ends_and_refuses_extra_steps(self):
        env = make_env(num_envs=2)
        a = np.zeros((2, ACTION_DIM))
        for t in range(CFG.episode_length):
            _, done = env.step(a)
            assert done.all() == (t == CFG.episode_length - 1)
        with pytest.raises(EnvError):
            env.step(a)

    def test_joint_rate_limit(self):
        env = make_env(num_envs=1)
        a = np.zeros((1, ACTION_DIM))
        a[0, :4] = 1.0  # full-scale target
        env.step(a)
        assert np.allclose(env.joints[0], CFG.max_joint_delta, atol=1e-12)

    def test_action_values_clipped(self):
        env1 = make_env(num_envs=1, seed=3)
        env2 = make_env(num_envs=1, seed=3)
        a = np.zeros((1, ACTION_DIM))
        a[0, :] = 10.0
        env1.step(a)
        env2.step(np.ones((1, ACTION_DIM)))
        assert np.array_equal(env1.joints, env2.joints)
        assert np.array_equal(env1.base_pos, env2.base_pos)

    def test_wrench_moves_base(self):
        env = make_env(num_envs=1)
        y0 = env.base_pos[0, 1]
        a = np.zeros((1, ACTION_DIM))
        a[0, 5] = 1.0  # upward force
        env.step(a)
        assert env.base_pos[0, 1] > y0
        assert env.base_pos[0, 1] - y0 <= CFG.base_vmax + 1e-12


class TestDeterminism:
    def test_identical_seeds_bitwise(self):
        rng = rng_stream(77)
        acts = rng.uniform(-1, 1, size=(30, 4, ACTION_DIM))
        trajs = []
        for _ in range(2):
            env = make_env(num_envs=4, seed=9)
            rows = []
            for a in acts:
                obs, done = env.step(a)
                rows.append(np.concatenate([env.object_pos.ravel(),
                                            env.base_pos.ravel(),
                                            env.joints.ravel(),
                                            obs.proprio.ravel()]))
            trajs.append(np.stack(rows))
        assert np.array_equal(trajs[0], trajs[1])

    def test_reset_jitter_differs_per_env(self):
        env = make_env(num_envs=8, seed=0)
        assert len(np.unique(env.object_pos[:, 0])) == 8

    def test_reset_jitter_repeats_across_instances(self):
        a = make_env(num_envs=4, seed=5)
        b = make_env(num_envs=4, seed=5)
        assert np.array_equal(a.object_pos, b.object_pos)


class TestGraspPoseFrames:
    def test_pose_at_reset(self):
        env = make_env(num_envs=1)
        g = env.current_grasp_pose()
        assert g.shape == (1, 7)
        assert g[0, 0] == 0.0                       # no relative rotation
        assert np.allclose(g[0, 3:], 0.0)           # joints at zero
        assert g[0, 2] == pytest.approx(
            CFG.hand_init_height - env.object_pos[0, 1], abs=1e-12)

    def test_pose_follows_object_rotation(self):
        env = make_env(num_envs=1)
        g0 = env.current_grasp_pose()[0]
        # spin the object in place: the relative rotation must compensate
        env.object_angle[:] = 0.3
        g1 = env.current_grasp_pose()[0]
        assert g1[0] == pytest.approx(-0.3, abs=1e-12)
        # the offset rotates into the new object frame
        assert np.allclose(g1[1:3], rot2(-0.3) @ g0[1:3], atol=1e-12)

    def test_proposal_vectors_follow_binding(self):
        ds, props = small_dataset()
        objs = ds.train
        env = PlanarVecEnv(objs, [props[o.id] for o in objs], 3, 0)
        env.reset_all(np.array([0, 1, 2]))
        vecs = env.proposal_vectors()
        for i, o in enumerate(objs):
            assert np.array_equal(vecs[i], props[o.id].as_vector())


class TestAttachment:
    def test_settle_after_rotation(self):
        env = make_env(num_envs=1)
        env.object_angle[:] = 0.7
        env.step(np.zeros((1, ACTION_DIM)))
        world, _ = env._world_vertices()
        assert world[..., 1].min() == pytest.approx(0.0, abs=1e-12)

    def test_attached_object_follows_base(self):
        env = make_env(num_envs=1)
        env.attached[:] = True
        env.attach_off[0] = [0.0, -0.1]
        env.attach_dangle[0] = 0.0
        env.attach_gap[0] = 1.0  # never released
        a = np.zeros((1, ACTION_DIM))
        a[0, 5] = 1.0
        for _ in range(3):
            env.step(a)
        assert env.object_pos[0, 1] == pytest.approx(env.base_pos[0, 1] - 0.1,
                                                     abs=1e-12)

    def test_release_on_opening(self):
        env = make_env(num_envs=1)
        env.attached[:] = True
        env.attach_off[0] = [0.0, -0.1]
        env.attach_gap[0] = 0.0  # any measurable gap forces a release
        env.step(np.zeros((1, ACTION_DIM)))
        assert not env.attached[0]

    def test_success_latches(self):
        env = make_env(num_envs=1)
        env.attached[:] = True
        env.attach_off[0] = [0.0, 0.0]
        env.attach_gap[0] = 1.0
        env.base_pos[0] = [0.0, CFG.target_height]
        env.step(np.zeros((1, ACTION_DIM)))
        assert env.is_success()[0]
        # stays latched even after moving away
        env.base_pos[0] = [0.3, 0.4]
        env.step(np.zeros((1, ACTION_DIM)))
        assert env.is_success()[0]
