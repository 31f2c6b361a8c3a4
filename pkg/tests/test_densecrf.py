import math

import numpy as np
import pytest

from ndcrf import oracle
from ndcrf.densecrf import (CrfParams, build_lattices, compatibility_transform, init_q, local_update,
                            mean_field_inference, message_passing, potts, run_unrolled,
                            unary_from_probs)
from ndcrf.permutohedral import Lattice, build_features
from ndcrf.tensor import ShapeError, argmax_channels, dice_coefficient, softmax_channels
from ndcrf.training import distort_labels, two_region_fixture


def random_case(rng, shape=(8, 8), k=3, ref_channels=1, sharp=4.0):
    reference = rng.random(shape + (ref_channels,)).astype(np.float32)
    probs = softmax_channels(sharp * rng.normal(size=shape + (k,))).astype(np.float32)
    return reference, probs


class TestCrfParams:
    def test_diagonal_pinned_to_zero(self):
        p = CrfParams(1, 1, 1, mu=np.full((3, 3), 2.0))
        assert np.all(np.diag(p.mu) == 0)
        assert p.mu[0, 1] == 2.0

    @pytest.mark.parametrize("kw", [
        dict(mu=np.ones((2, 3))), dict(mu=np.ones((1, 1))), dict(iterations=0),
        dict(w=(1.0,)), dict(w=(np.nan, 1.0)), dict(theta_beta=-1.0),
    ])
    def test_validation(self, kw):
        base = dict(theta_alpha=1.0, theta_beta=1.0, theta_gamma=1.0, mu=potts(2))
        base.update(kw)
        with pytest.raises(ValueError):
            CrfParams(**base)

    def test_defaults(self):
        p = CrfParams.default(4, 1.0, 2.0, 3.0)
        assert p.w == (1.0, 1.0) and p.iterations == 5
        np.testing.assert_array_equal(p.mu, potts(4))


class TestUnary:
    def test_clamp(self):
        u = unary_from_probs(np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(u, [[0.0, -math.log(1e-8)]], rtol=1e-6)

    def test_uniform(self):
        np.testing.assert_allclose(unary_from_probs(np.full((2, 2, 5), 0.2)), math.log(5), rtol=1e-6)

    def test_inverse_of_softmax(self, rng):
        p = softmax_channels(rng.normal(size=(4, 4, 3)))
        p = np.maximum(p, 1e-6)
        p /= p.sum(-1, keepdims=True)
        np.testing.assert_allclose(softmax_channels(-unary_from_probs(p)), p, atol=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            unary_from_probs(np.array([[np.nan, 1.0]]))
        with pytest.raises(ShapeError):
            unary_from_probs(np.ones((3, 1)))

    def test_init_q(self, rng):
        np.testing.assert_allclose(init_q(np.zeros((1, 2))), [[0.5, 0.5]])
        p = softmax_channels(rng.normal(size=(3, 3, 4)))
        np.testing.assert_allclose(init_q(unary_from_probs(p)), p, atol=1e-6)
        np.testing.assert_allclose(init_q(rng.normal(size=(10, 3))).sum(-1), 1, atol=1e-6)


class TestMessagePassing:
    def test_two_voxels(self):
        ref = np.zeros((2, 1, 1))
        params = CrfParams(1.0, 1.0, 1.0, mu=potts(2))
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, smooth = message_passing(*build_lattices(ref, params), q)
        exact = oracle.brute_filter(ref, q, params.smoothness, exclude_self=True, normalize=True)
        g = math.exp(-0.5)
        np.testing.assert_allclose(exact, [[0, g / (1 + g)], [g / (1 + g), 0]])
        # two points on a coarse grid: the lattice kernel is within 20% of the Gaussian
        assert smooth[0, 0] == 0 or abs(smooth[0, 0]) < 1e-12
        np.testing.assert_allclose(smooth[[0, 1], [1, 0]], exact[[0, 1], [1, 0]], rtol=0.2)

    def test_constant_field(self, rng):
        ref = np.zeros((12, 12, 1))
        params = CrfParams(2.0, 1.0, 2.0, mu=potts(2))
        q = np.full((144, 2), 0.5)
        app, smooth = message_passing(*build_lattices(ref, params), q)
        for msg, cfg in ((app, params.appearance), (smooth, params.smoothness)):
            exact = oracle.brute_filter(ref, q, cfg, exclude_self=True, normalize=True)
            np.testing.assert_allclose(msg, exact, atol=0.02)
            interior = msg.reshape(12, 12, 2)[5:7, 5:7]
            np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=0.02)

    def test_zero_field(self, rng):
        ref, _ = random_case(rng)
        params = CrfParams.default(3, 2.0, 0.3, 1.0)
        app, smooth = message_passing(*build_lattices(ref, params), np.zeros((64, 3)))
        assert not app.any() and not smooth.any()

    def test_oracle_agreement(self, rng):
        ref, probs = random_case(rng, shape=(10, 10), ref_channels=3)
        params = CrfParams.default(3, 3.0, 0.5, 2.0)
        q = probs.reshape(-1, 3)
        app, smooth = message_passing(*build_lattices(ref, params), q)
        for msg, cfg in ((app, params.appearance), (smooth, params.smoothness)):
            exact = oracle.brute_filter(ref, q, cfg, exclude_self=True, normalize=True)
            assert np.abs(msg - exact).max() <= 0.1

    def test_point_mismatch(self, rng):
        ref, _ = random_case(rng)
        lats = build_lattices(ref, CrfParams.default(3, 1, 1, 1))
        with pytest.raises(ShapeError):
            message_passing(*lats, np.zeros((63, 3)))


class TestCompatibility:
    def test_potts_appearance_only(self, rng):
        app, smooth = rng.random((2, 5, 3))
        params = CrfParams(1, 1, 1, mu=potts(3), w=(1, 0))
        out = compatibility_transform(app, smooth, params)
        np.testing.assert_allclose(out, app.sum(1, keepdims=True) - app)

    def test_zero_weights(self, rng):
        app, smooth = rng.random((2, 5, 3))
        out = compatibility_transform(app, smooth, CrfParams(1, 1, 1, mu=potts(3), w=(0, 0)))
        assert not out.any()

    def test_double_loop(self, rng):
        app, smooth = rng.random((2, 7, 4))
        mu = rng.random((4, 4))
        params = CrfParams(1, 1, 1, mu=mu, w=(0.3, 1.7))
        expected = np.zeros((7, 4))
        for i in range(7):
            for l in range(4):
                for lp in range(4):
                    if l != lp:
                        expected[i, l] += mu[l, lp] * (0.3 * app[i, lp] + 1.7 * smooth[i, lp])
        np.testing.assert_allclose(compatibility_transform(app, smooth, params), expected, atol=1e-6)

    def test_shape_errors(self, rng):
        params = CrfParams(1, 1, 1, mu=potts(3))
        with pytest.raises(ShapeError):
            compatibility_transform(np.zeros((4, 3)), np.zeros((5, 3)), params)
        with pytest.raises(ShapeError):
            compatibility_transform(np.zeros((4, 2)), np.zeros((4, 2)), params)


class TestLocalUpdate:
    def test_zero_message(self, rng):
        u = rng.random((6, 3)).astype(np.float32)
        assert local_update(u, np.zeros((6, 3))).tobytes() == init_q(u).tobytes()

    def test_per_voxel_offset(self, rng):
        u = rng.random((6, 3))
        q_hat = rng.random((6, 3))
        shifted = q_hat + rng.random((6, 1)) * 5
        np.testing.assert_allclose(local_update(u, q_hat), local_update(u, shifted), atol=1e-12)

    def test_simplex(self, rng):
        q = local_update(rng.normal(size=(20, 4)), rng.normal(size=(20, 4)) * 3)
        np.testing.assert_allclose(q.sum(-1), 1, atol=1e-5)
        assert np.all(q >= 0)


class TestInference:
    def test_zero_weights_identity(self, rng):
        ref, probs = random_case(rng)
        params = CrfParams(2, 0.5, 1, mu=potts(3), w=(0, 0), iterations=7)
        q = mean_field_inference(ref, probs, params).q
        assert q.tobytes() == init_q(unary_from_probs(probs)).tobytes()

    def test_oracle_8x8(self, rng):
        ref, probs = random_case(rng, sharp=2.0)
        params = CrfParams.default(3, 3.0, 0.3, 2.0)
        q = mean_field_inference(ref, probs, params).q
        exact = oracle.exact_mean_field(ref, probs, params)
        assert np.abs(q - exact).max() <= 0.05
        assert np.mean(argmax_channels(q) == argmax_channels(exact)) >= 0.95

    def test_two_region_denoising(self, rng):
        labels = np.zeros((20, 20), int)
        labels[:, 10:] = 1
        ref = np.where(labels == 1, 0.8, 0.2)[..., None] + rng.normal(0, 0.02, (20, 20, 1))
        logits = 2.0 * (2 * np.eye(2)[labels] - 1) + rng.normal(0, 2.5, (20, 20, 2))
        probs = softmax_channels(logits)
        before = np.sum(argmax_channels(probs) != labels)
        params = CrfParams(w=(5.0, 2.0), mu=potts(2), theta_alpha=5.0, theta_beta=0.1, theta_gamma=2.0)
        after = np.sum(argmax_channels(mean_field_inference(ref, probs, params).q) != labels)
        assert before > 0
        assert after < before

    def test_simplex_rows(self, rng):
        ref, probs = random_case(rng, shape=(5, 6, 4), k=4)
        params = CrfParams.default(4, 2.0, 0.5, 1.5)
        q = mean_field_inference(ref, probs, params).q
        assert q.shape == probs.shape and q.dtype == np.float32
        np.testing.assert_allclose(q.sum(-1), 1, atol=1e-5)
        assert np.all(q >= 0)

    def test_label_permutation_equivariance(self, rng):
        ref, probs = random_case(rng, k=4)
        mu = potts(4) * rng.uniform(0.5, 2.0, (4, 4))
        params = CrfParams(2.0, 0.5, 1.5, mu=mu, w=(1.5, 0.7))
        perm = np.array([2, 0, 3, 1])
        q = mean_field_inference(ref, probs, params).q
        q_perm = mean_field_inference(ref, probs[..., perm], params.replace(mu=mu[np.ix_(perm, perm)])).q
        np.testing.assert_allclose(q_perm, q[..., perm], atol=1e-5)

    def test_exact_symmetry_preserved(self, rng):
        # negating every feature coordinate maps the lattice onto itself, so
        # inference must treat a point and its negated twin identically
        half_app = rng.normal(size=(15, 3)) * 2
        half_smooth = rng.normal(size=(15, 2)) * 2
        lat_app = Lattice(np.concatenate([half_app, -half_app]))
        lat_smooth = Lattice(np.concatenate([half_smooth, -half_smooth]))
        half_u = unary_from_probs(softmax_channels(rng.normal(size=(15, 3))))
        unary = np.concatenate([half_u, half_u])
        params = CrfParams.default(3, 1.0, 1.0, 1.0).replace(w=(2.0, 1.5))
        q, _ = run_unrolled(lat_app, lat_smooth, unary, params)
        np.testing.assert_allclose(q[:15], q[15:], atol=1e-4)

    def test_mirror_symmetry_oracle(self, rng):
        ref, probs = self._mirrored(rng)
        exact = oracle.exact_mean_field(ref, probs, CrfParams.default(2, 2.0, 0.3, 1.5))
        np.testing.assert_allclose(exact, exact[:, ::-1], atol=1e-4)

    def test_mirror_symmetry_lattice_accuracy(self, rng):
        ref, probs = self._mirrored(rng)
        q = mean_field_inference(ref, probs, CrfParams.default(2, 2.0, 0.3, 1.5)).q
        np.testing.assert_allclose(q, q[:, ::-1], atol=0.05)

    @pytest.mark.xfail(strict=True, reason="the permutohedral embedding is not mirror symmetric; "
                                           "mirrored voxels differ at lattice accuracy (~0.02)")
    def test_mirror_symmetry_lattice_1e4(self, rng):
        ref, probs = self._mirrored(rng)
        q = mean_field_inference(ref, probs, CrfParams.default(2, 2.0, 0.3, 1.5)).q
        np.testing.assert_allclose(q, q[:, ::-1], atol=1e-4)

    @staticmethod
    def _mirrored(rng):
        half = rng.random((6, 3, 1))
        ref = np.concatenate([half, half[:, ::-1]], axis=1)
        half_p = softmax_channels(rng.normal(size=(6, 3, 2)))
        probs = np.concatenate([half_p, half_p[:, ::-1]], axis=1)
        return ref, probs

    def test_deterministic(self, rng):
        ref, probs = random_case(rng, shape=(9, 7))
        params = CrfParams.default(3, 2.0, 0.3, 1.0)
        a = mean_field_inference(ref, probs, params)
        b = mean_field_inference(ref, probs, params)
        assert a.q.tobytes() == b.q.tobytes()
        assert a.max_deltas == b.max_deltas and len(a.max_deltas) == 5

    def test_3d_multichannel(self, rng):
        ref, probs = random_case(rng, shape=(4, 5, 6), k=3, ref_channels=4)
        params = CrfParams.default(3, 2.0, 0.5, 1.0, iterations=2)
        lat_app, _ = build_lattices(ref, params)
        assert lat_app.dim == 7
        q = mean_field_inference(ref, probs, params).q
        assert q.shape == (4, 5, 6, 3)

    def test_shape_mismatch(self, rng):
        ref, probs = random_case(rng)
        with pytest.raises(ShapeError):
            mean_field_inference(ref[:7], probs, CrfParams.default(3, 1, 1, 1))
        with pytest.raises(ShapeError):
            mean_field_inference(ref, probs, CrfParams.default(2, 1, 1, 1))


def test_refinement_improves_noisy_unary():
    # pins the sign of the pairwise term: smoothing must help, not hurt
    image, labels = two_region_fixture(32, seed=1)
    probs = distort_labels(labels, 2, seed=4, strength=0.3)
    params = CrfParams.default(2, 5.0, 0.1, 3.0)
    before = dice_coefficient(argmax_channels(probs), labels, 1)
    after = dice_coefficient(argmax_channels(mean_field_inference(image, probs, params).q), labels, 1)
    flipped = params.replace(mu=-potts(2))
    worse = dice_coefficient(argmax_channels(mean_field_inference(image, probs, flipped).q), labels, 1)
    assert after > before > worse
