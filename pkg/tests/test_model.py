import numpy as np
import pytest

from capgrasp.geometry import NEG_Y, ConeConstraint, random_quaternions
from capgrasp.model import (
    DiscriminatorModel,
    SamplerModel,
    bce_loss,
    bce_with_logits,
    discriminator_score,
    elbo_loss,
    grad_check,
    load_checkpoint,
    raw_to_grasps,
    reparameterize,
    sample_constrained_grasps,
    save_checkpoint,
)
from capgrasp.nn import Adam, PointSetNet


def _batch(rng, B=4, N=16):
    pts = rng.normal(0.0, 0.03, (B, N, 3))
    g = np.concatenate([random_quaternions(rng, B), rng.normal(0.0, 0.05, (B, 3))], axis=1)
    return pts, g


class TestPointSetNet:
    def test_permutation_invariance(self, rng):
        net = PointSetNet(5, 3, rng=rng)
        X = rng.normal(size=(2, 30, 5))
        perm = rng.permutation(30)
        a, _ = net.forward(X)
        b, _ = net.forward(X[:, perm])
        # mean pooling sums in a different order
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_zero_weights_give_bias(self, rng):
        net = PointSetNet(5, 3, rng=rng)
        for k in net.params:
            net.params[k][...] = 0.0
        net.params["head1.b"][...] = [0.1, -0.2, 0.3]
        out, _ = net.forward(rng.normal(size=(4, 10, 5)))
        np.testing.assert_array_equal(out, np.tile([0.1, -0.2, 0.3], (4, 1)))

    def test_broadcast_column_gradient(self, rng):
        net = PointSetNet(4, 2, rng=rng)
        X = rng.normal(size=(3, 7, 4))
        X[:, :, 2:] = rng.normal(size=(3, 1, 2))
        out, cache = net.forward(X)
        w = rng.normal(size=out.shape)
        _, dcols = net.backward(cache, w, input_cols=slice(2, 4))
        h = 1e-6
        for b in range(3):
            for c in range(2):
                Xp, Xm = X.copy(), X.copy()
                Xp[b, :, 2 + c] += h
                Xm[b, :, 2 + c] -= h
                num = ((net.forward(Xp)[0] - net.forward(Xm)[0]) * w).sum() / (2 * h)
                assert abs(num - dcols[b, c]) < 1e-7

    def test_linear_quadratic_gradcheck(self, rng):
        # single linear layer, quadratic loss: central differences are exact
        W = rng.normal(size=(3, 2))
        x = rng.normal(size=(5, 3))
        params = {"W": W}

        def f():
            r = x @ params["W"]
            return 0.5 * float((r * r).sum()), {"W": x.T @ r}

        assert grad_check(params, f, per_tensor=6, rng=rng) < 1e-9


class TestAdam:
    def test_zero_lr_is_noop(self, rng):
        params = {"a": rng.normal(size=(3, 3))}
        before = params["a"].copy()
        opt = Adam(params)
        opt.step({"a": rng.normal(size=(3, 3))}, 0.0)
        np.testing.assert_array_equal(params["a"], before)

    def test_minimizes_quadratic(self):
        params = {"x": np.array([3.0, -2.0])}
        opt = Adam(params)
        for _ in range(2000):
            opt.step({"x": 2 * params["x"]}, 1e-2)
        assert np.abs(params["x"]).max() < 1e-2


class TestSampler:
    def test_encode_permutation_invariant(self, rng):
        m = SamplerModel(rng=rng)
        pts, g = _batch(rng)
        alpha = np.full(4, 0.5)
        mu, lv, _ = m.encode(pts, g, alpha)
        perm = rng.permutation(16)
        mu2, lv2, _ = m.encode(pts[:, perm], g, alpha)
        np.testing.assert_allclose(mu, mu2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(lv, lv2, rtol=1e-12, atol=1e-14)

    def test_zero_weight_encoder(self, rng):
        m = SamplerModel(rng=rng)
        for v in m.encoder.params.values():
            v[...] = 0.0
        m.encoder.params["head1.b"][...] = np.arange(8.0)
        pts, g = _batch(rng)
        mu, lv, _ = m.encode(pts, g, np.ones(4))
        np.testing.assert_array_equal(mu, np.tile(np.arange(4.0), (4, 1)))
        np.testing.assert_array_equal(lv, np.tile(np.arange(4.0, 8.0), (4, 1)))

    def test_fuzz_finite(self, rng):
        m = SamplerModel(rng=rng)
        for v in m.parameters().values():
            v[...] = rng.uniform(-1, 1, v.shape)
        pts = rng.uniform(-0.2, 0.2, (10_000, 8, 3))
        g = np.concatenate([random_quaternions(rng, 10_000), rng.uniform(-0.2, 0.2, (10_000, 3))], axis=1)
        mu, lv, _ = m.encode(pts, g, rng.uniform(0, np.pi, 10_000))
        assert np.isfinite(mu).all() and np.isfinite(lv).all()

    def test_decode_unit_quaternion_and_invariance(self, rng):
        m = SamplerModel(rng=rng)
        pts, _ = _batch(rng)
        z = rng.normal(size=(4, 4))
        g = m.decode(pts, z, np.full(4, 0.3))
        np.testing.assert_allclose(np.linalg.norm(g[:, :4], axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(g, m.decode(pts[:, ::-1], z, np.full(4, 0.3)), rtol=1e-12, atol=1e-14)

    def test_quaternion_floor(self):
        out = raw_to_grasps(np.array([[1e-9, 0, 0, 0, 0.1, 0.2, 0.3]]))
        np.testing.assert_array_equal(out, [[1, 0, 0, 0, 0.1, 0.2, 0.3]])

    def test_reparameterize(self, rng):
        mu = rng.normal(size=4)
        np.testing.assert_array_equal(reparameterize(mu, rng.normal(size=4), np.zeros(4)), mu)
        eps = rng.normal(size=4)
        np.testing.assert_array_equal(reparameterize(np.zeros(4), np.zeros(4), eps), eps)
        mu = np.array([0.5, -1.0, 2.0, 0.0])
        lv = np.array([0.0, -1.0, 1.0, 0.5])
        z = reparameterize(mu, lv, rng.standard_normal((100_000, 4)))
        sigma = np.exp(lv / 2)
        assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * sigma / np.sqrt(100_000) * 1.5)

    def test_gradcheck(self, rng):
        m = SamplerModel(rng=rng)
        pts, g = _batch(rng)
        alpha = rng.uniform(0, np.pi / 2, 4)
        eps = rng.normal(size=(4, 4))

        def f():
            loss, _, _, grads = m.loss_and_grads(pts, g, alpha, eps, 1e-2)
            return loss, grads

        assert grad_check(m.parameters(), f, per_tensor=4, rng=rng) < 1e-4


class TestElbo:
    def test_perfect_reconstruction_zero(self, rng):
        _, g = _batch(rng)
        loss, rec, kl, _ = elbo_loss(g, g, np.zeros((4, 4)), np.zeros((4, 4)), 1e-2)
        # the prediction is renormalised inside the loss, so allow rounding
        assert kl == 0.0 and 0.0 <= rec < 1e-15 and loss < 1e-15

    def test_kl_value(self, rng):
        _, g = _batch(rng, B=1)
        loss, _, kl, _ = elbo_loss(g, g, np.ones((1, 4)), np.zeros((1, 4)), 1e-2)
        assert kl == 2.0
        assert abs(loss - 0.02) < 1e-15

    def test_sign_flip_invariant(self, rng):
        _, g = _batch(rng)
        flipped = g.copy()
        flipped[:, :4] *= -1
        z = np.zeros((4, 4))
        assert elbo_loss(g, flipped, z, z, 1e-2)[0] < 1e-15

    def test_kl_nonnegative(self, rng):
        _, g = _batch(rng)
        for _ in range(100):
            mu, lv = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
            assert elbo_loss(g, g, mu, lv, 1.0)[2] > 0

    def test_gradient_wrt_unnormalized_quaternion(self, rng):
        _, g = _batch(rng, B=3)
        g_hat = g + rng.normal(0, 0.1, g.shape)
        g_hat[:, :4] *= 1.7
        z = np.zeros((3, 4))
        _, _, _, (d, _, _) = elbo_loss(g, g_hat, z, z, 1e-2)
        h = 1e-6
        for i in range(3):
            for j in range(7):
                gp, gm = g_hat.copy(), g_hat.copy()
                gp[i, j] += h
                gm[i, j] -= h
                num = (elbo_loss(g, gp, z, z, 1e-2)[0] - elbo_loss(g, gm, z, z, 1e-2)[0]) / (2 * h)
                assert abs(num - d[i, j]) < 1e-6


class TestBCE:
    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_half(self, y):
        assert abs(bce_loss(0.5, y)[0] - np.log(2)) < 1e-15

    def test_limit(self):
        assert bce_loss(1 - 1e-12, 1.0)[0] < 1e-11
        assert bce_loss(1e-12, 0.0)[0] < 1e-11

    def test_gradient(self, rng):
        p = rng.uniform(0.05, 0.95, 10)
        y = (rng.random(10) < 0.5).astype(float)
        _, grad = bce_loss(p, y)
        h = 1e-6
        for i in range(10):
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            num = (bce_loss(pp, y)[0] - bce_loss(pm, y)[0]) / (2 * h)
            assert abs(num - grad[i]) / max(1e-8, abs(num) + abs(grad[i])) < 1e-4

    def test_logits_agree(self, rng):
        logit = rng.normal(size=20)
        y = (rng.random(20) < 0.5).astype(float)
        p = 1 / (1 + np.exp(-logit))
        assert abs(bce_with_logits(logit, y)[0] - bce_loss(p, y)[0]) < 1e-12


class TestDiscriminator:
    def test_open_interval(self, rng):
        d = DiscriminatorModel(rng=rng)
        pts, g = _batch(rng, B=50)
        p = d.forward(pts, g)
        assert np.all((p > 0) & (p < 1))

    def test_object_permutation(self, rng):
        d = DiscriminatorModel(rng=rng)
        pts, g = _batch(rng, B=1)
        a = discriminator_score(d, pts[0], g[0])
        b = discriminator_score(d, pts[0][::-1], g[0])
        assert a == b

    def test_fast_score_matches_forward(self, rng):
        d = DiscriminatorModel(rng=rng)
        pts, g = _batch(rng, B=20, N=32)
        fast = d.score(pts[0], g)
        slow = d.forward(np.broadcast_to(pts[0], pts.shape), g)
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-15)

    def test_gradcheck(self, rng):
        d = DiscriminatorModel(rng=rng)
        pts, g = _batch(rng)
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        assert grad_check(d.parameters(), lambda: d.loss_and_grads(pts, g, labels), per_tensor=4, rng=rng) < 1e-4


class TestSampling:
    def test_count_and_determinism(self, rng):
        m = SamplerModel(rng=rng)
        pts = rng.normal(0, 0.03, (32, 3))
        cone = ConeConstraint(np.array([0.0, 0.0, 1.0]), 0.5)
        a = sample_constrained_grasps(m, pts, cone, 1, np.random.default_rng(4))
        b = sample_constrained_grasps(m, pts, cone, 1, np.random.default_rng(4))
        assert a.shape == (1, 7)
        np.testing.assert_array_equal(a, b)
        assert sample_constrained_grasps(m, pts, cone, 300, rng).shape == (300, 7)

    def test_aligned_axis_is_identity(self, rng):
        m = SamplerModel(rng=rng)
        pts = rng.normal(0, 0.03, (32, 3))
        cone = ConeConstraint(NEG_Y, 0.4)
        z_rng = np.random.default_rng(8)
        got = sample_constrained_grasps(m, pts, cone, 5, z_rng)
        z = np.random.default_rng(8).standard_normal((5, 4))
        direct = m.decode(np.broadcast_to(pts, (5, 32, 3)), z, np.full(5, 0.4))
        np.testing.assert_allclose(got, direct, atol=1e-15)

    def test_rejects_nonpositive_count(self, rng):
        with pytest.raises(ValueError):
            sample_constrained_grasps(SamplerModel(rng=rng), np.zeros((4, 3)), ConeConstraint(NEG_Y, 0.4), 0, rng)


class TestCheckpoint:
    @pytest.mark.parametrize("factory", [lambda r: SamplerModel(rng=r), lambda r: SamplerModel(rng=r, unconstrained=True),
                                         lambda r: DiscriminatorModel(rng=r)])
    def test_exact_round_trip(self, factory, rng, tmp_path):
        m = factory(rng)
        for v in m.parameters().values():
            v[...] = rng.normal(size=v.shape) * 10.0 ** rng.integers(-8, 3, v.shape)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert type(back) is type(m)
        for k, v in m.parameters().items():
            np.testing.assert_array_equal(back.parameters()[k], v)
        if isinstance(m, SamplerModel):
            assert back.unconstrained == m.unconstrained and back.latent_dim == m.latent_dim

    def test_header_is_self_describing(self, rng, tmp_path):
        import json

        path = tmp_path / "m.ckpt"
        save_checkpoint(SamplerModel(rng=rng), path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["version"] == 1 and header["latent_dim"] == 4
        acts = [layer["activation"] for layer in header["nets"]["decoder"]["layers"]]
        assert acts == ["tanh", "tanh", "tanh", "linear"]

    def test_truncated_file_rejected(self, rng, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DiscriminatorModel(rng=rng), path)
        lines = path.read_text().splitlines()
        lines[2] = " ".join(lines[2].split()[:-1])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)
