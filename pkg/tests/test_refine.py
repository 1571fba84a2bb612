import numpy as np
import pytest

from capgrasp.geometry import ConeConstraint, approach_vector, cone_contains, quat_multiply, random_quaternions
from capgrasp.refine import ProposalConfig, mh_refine, propose_perturbation


def _grasps(rng, n):
    return np.concatenate([random_quaternions(rng, n), rng.normal(0, 0.05, (n, 3))], axis=1)


def _in_cone_grasps(cone, rng, n):
    out = []
    while sum(len(o) for o in out) < n:
        g = _grasps(rng, 4 * n)
        out.append(g[cone_contains(cone, approach_vector(g))])
    return np.concatenate(out)[:n]


def constant(points, g):
    return np.full(len(g), 0.7)


class TestProposal:
    def test_invalid(self):
        with pytest.raises(ValueError):
            ProposalConfig(sigma_translation=-1.0)
        with pytest.raises(ValueError):
            ProposalConfig(iterations=0)

    def test_zero_width_is_identity(self, rng):
        g = _grasps(rng, 50)
        out = propose_perturbation(g, ProposalConfig(0.0, 0.0), rng)
        sign = np.sign(np.einsum("ij,ij->i", out[:, :4], g[:, :4]))
        np.testing.assert_allclose(out[:, :4] * sign[:, None], g[:, :4], atol=1e-15)
        np.testing.assert_array_equal(out[:, 4:], g[:, 4:])

    def test_translation_std(self, rng):
        g = np.tile(_grasps(rng, 1), (100_000, 1))
        out = propose_perturbation(g, ProposalConfig(0.02, 0.1), rng)
        std = (out[:, 4:] - g[:, 4:]).std(axis=0)
        assert np.all(np.abs(std / 0.02 - 1) < 0.02)

    def test_rotation_angle_law(self, rng):
        g = np.tile(_grasps(rng, 1), (100_000, 1))
        out = propose_perturbation(g, ProposalConfig(0.0, 0.1), rng)
        rel = quat_multiply(out[:, :4], g[:, :4] * [1, -1, -1, -1])
        angle = 2 * np.arccos(np.clip(np.abs(rel[:, 0]), 0, 1))
        # |N(0, s)| has mean s*sqrt(2/pi)
        assert abs(angle.mean() / (0.1 * np.sqrt(2 / np.pi)) - 1) < 0.02
        np.testing.assert_allclose(np.linalg.norm(out[:, :4], axis=1), 1.0, atol=1e-12)

    def test_symmetric_displacement(self, rng):
        g = np.tile(_grasps(rng, 1), (100_000, 1))
        d = propose_perturbation(g, ProposalConfig(0.02, 0.1), rng)[:, 4:] - g[:, 4:]
        assert np.all(np.abs(d.mean(axis=0)) < 5 * 0.02 / np.sqrt(100_000))


class TestMH:
    def test_constant_score_in_cone(self, rng):
        cone = ConeConstraint(np.array([0.0, 0.0, 1.0]), np.radians(30))
        g0 = _in_cone_grasps(cone, rng, 200)
        final, tr = mh_refine(g0, None, constant, cone, ProposalConfig(0.02, 0.3, 20), rng)
        # ratio is 1 inside, 0 outside: accepted exactly when the proposal lands inside
        props_inside = tr.in_cone[tr.accepted]
        assert props_inside.all()
        assert cone_contains(cone, approach_vector(final)).all()
        assert 0 < tr.accepted.mean() < 1

    def test_accept_iff_inside(self, rng):
        cone = ConeConstraint(np.array([0.0, 0.0, 1.0]), np.radians(20))
        g0 = _in_cone_grasps(cone, rng, 1)
        for seed in range(300):
            _, tr = mh_refine(g0, None, constant, cone, ProposalConfig(0.01, 0.3, 1), np.random.default_rng(seed))
            # replay the proposal draw
            prop = propose_perturbation(g0, ProposalConfig(0.01, 0.3), np.random.default_rng(seed))
            assert tr.accepted[0, 0] == cone_contains(cone, approach_vector(prop))[0]

    def test_closure_100k_steps(self, rng):
        cone = ConeConstraint(np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8]), np.radians(30))
        g0 = _in_cone_grasps(cone, rng, 1000)

        def score(points, g):
            return 1.0 / (1.0 + np.linalg.norm(g[:, 4:], axis=1) ** 2)

        _, tr = mh_refine(g0, None, score, cone, ProposalConfig(0.02, 0.2, 100), rng)
        assert tr.scores.size == 100_000
        assert tr.in_cone.all()
        dirs = approach_vector(tr.poses.reshape(-1, 7))
        assert cone_contains(cone, dirs).all()

    def test_outside_start_pulled_in(self, rng):
        cone = ConeConstraint(np.array([0.0, 0.0, 1.0]), np.radians(60))
        g = _grasps(rng, 4000)
        outside = g[~cone_contains(cone, approach_vector(g))][:300]
        final, tr = mh_refine(outside, None, constant, cone, ProposalConfig(0.02, 0.5, 30), rng)
        moved_in = tr.in_cone[-1]
        assert moved_in.any()
        # once inside, a chain never leaves
        first_in = np.argmax(tr.in_cone, axis=0)
        for c in np.flatnonzero(tr.in_cone.any(axis=0)):
            assert tr.in_cone[first_in[c]:, c].all()
        # chains still outside never accepted anything
        assert not tr.accepted[:, ~tr.in_cone.any(axis=0)].any()

    def test_unconstrained_is_standard_mh(self, rng):
        def score(points, g):
            return np.exp(-np.linalg.norm(g[:, 4:], axis=1) / 0.05)

        g0 = _grasps(rng, 50)
        cfg = ProposalConfig(0.02, 0.1, 5)
        _, tr = mh_refine(g0, None, score, None, cfg, np.random.default_rng(3))
        # replay the standard rule with the same draws
        r = np.random.default_rng(3)
        g = g0.copy()
        s = score(None, g)
        for it in range(5):
            prop = propose_perturbation(g, cfg, r)
            sp = score(None, prop)
            acc = r.random(len(g)) < np.minimum(1.0, sp / s)
            g[acc] = prop[acc]
            s = np.where(acc, sp, s)
            np.testing.assert_array_equal(tr.accepted[it], acc)
            np.testing.assert_array_equal(tr.poses[it], g)
        assert tr.in_cone.all()

    def test_mean_score_increases(self, rng):
        target = np.array([0.01, -0.02, 0.03])

        def score(points, g):
            return np.exp(-np.linalg.norm(g[:, 4:] - target, axis=1) / 0.02)

        g0 = _grasps(rng, 1000)
        g0[:, 4:] = target + rng.normal(0, 0.05, (1000, 3))
        _, tr = mh_refine(g0, None, score, None, ProposalConfig(0.01, 0.1, 40), rng)
        means = tr.scores.mean(axis=1)
        assert means[-1] > score(None, g0).mean()
        # chain average over blocks of 10 iterations rises
        blocks = means.reshape(4, 10).mean(axis=1)
        assert np.all(np.diff(blocks) > 0)

    def test_model_discriminator(self, rng):
        from capgrasp.model import DiscriminatorModel

        d = DiscriminatorModel(rng)
        pts = rng.normal(0, 0.03, (32, 3))
        final, tr = mh_refine(_grasps(rng, 8), pts, d, None, ProposalConfig(iterations=3), rng)
        assert final.shape == (8, 7) and len(tr) == 3
        np.testing.assert_allclose(tr.scores[-1], d.score(pts, final), rtol=1e-12)
        assert np.all((tr.scores > 0) & (tr.scores < 1))

    def test_deterministic(self, rng):
        g0 = _grasps(rng, 20)
        cone = ConeConstraint(np.array([0.0, 1.0, 0.0]), 1.0)
        a = mh_refine(g0, None, constant, cone, ProposalConfig(), np.random.default_rng(1))[0]
        b = mh_refine(g0, None, constant, cone, ProposalConfig(), np.random.default_rng(1))[0]
        np.testing.assert_array_equal(a, b)

    def test_trace_csv(self, rng, tmp_path):
        _, tr = mh_refine(_grasps(rng, 3), None, constant, None, ProposalConfig(iterations=4), rng)
        tr.write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "chain,iteration,score,accepted,in_cone"
        assert len(lines) == 1 + 12
        assert lines[1].startswith("0,1,0.7,")


def test_binary_discriminator_never_loses_successes(rng):
    # with a 0/1 score a successful state only moves to another success
    from capgrasp.oracle import GripperSpec, evaluate_grasps, generate_ground_truth, perturb_grasps
    from capgrasp.scene import PrimitiveShape

    shape = PrimitiveShape("box", (0.02, 0.03, 0.05))
    gripper = GripperSpec()
    pos = generate_ground_truth(shape, 50, gripper, rng)
    g0 = perturb_grasps(pos[rng.integers(50, size=300)], 0.01, 0.2, rng)

    def oracle(points, g):
        return evaluate_grasps(shape, g, gripper).astype(float)

    _, tr = mh_refine(g0, None, oracle, None, ProposalConfig(), rng)
    ok = np.vstack([oracle(None, g0)[None], tr.scores]) == 1.0
    assert not np.any(ok[:-1] & ~ok[1:])
    assert tr.scores[-1].mean() > oracle(None, g0).mean()
