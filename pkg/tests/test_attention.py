import math

import numpy as np
import pytest

from evroad.core.errors import ConfigError, PreconditionError
from evroad.services import tensor as T
from evroad.services.attention import (
    AttentionPriors,
    ProjectionWeights,
    attention_output,
    gmm_denominator,
    key_posterior_term,
    multi_head,
    multi_head_tensor,
    prob_attention_scores,
    project_qkv,
    scores_from_similarity,
    softmax_attention,
    softplus_inverse,
    spatial_posterior_term,
)
from evroad.services.tensor import Tensor, grad_check


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_deltas(rng, n):
    d = rng.uniform(0.0, 1.0, size=(n, n))
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return d


def random_priors(rng, n, tied=False):
    """Random priors; ``tied`` shares one scale between the key and denominator terms."""
    sigma_k = float(rng.uniform(-0.5, 1.5))
    return AttentionPriors(
        pi_logits=rng.normal(size=n),
        gamma_logits=rng.normal(size=n),
        beta_raw=rng.normal(size=n),
        sigma_k_raw=sigma_k,
        sigma_q_raw=sigma_k if tied else float(rng.uniform(-0.5, 1.5)),
        sigma_delta_raw=float(rng.uniform(-0.5, 1.5)),
    )


def brute_force_scores(Q, K, deltas, priors):
    """Term-by-term evaluation in direct arithmetic."""
    n = K.shape[0]
    pi, gamma, beta = priors.pi, priors.gamma, priors.beta
    sk, sq, sd = priors.sigma_k, priors.sigma_q, priors.sigma_delta
    W = np.zeros((Q.shape[0], n))
    for i in range(Q.shape[0]):
        denom = 0.0
        for k in range(n):
            s = float(Q[i] @ K[k])
            denom += gamma[k] / sq * math.exp(-1.0 / sq ** 2) * math.exp(s / sq ** 2)
        for j in range(n):
            s = float(Q[i] @ K[j])
            key = pi[j] / sk * math.exp(-1.0 / sk ** 2) * math.exp(s / sk ** 2)
            space = beta[j] / sd * math.exp(-(1.0 - deltas[i, j]) ** 2 / (2.0 * sd ** 2))
            W[i, j] = (key + space) / denom
    return W


class TestProjection:
    def test_identity_projection(self):
        rng = np.random.default_rng(0)
        tokens = unit_rows(rng, 5, 3)
        eye = np.eye(3)
        q, k, v = project_qkv(tokens, ProjectionWeights(eye, eye, eye))
        np.testing.assert_allclose(q, tokens, atol=1e-12)
        np.testing.assert_allclose(v, tokens, atol=1e-12)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(1)
        w = ProjectionWeights(*(rng.normal(size=(4, 12)) for _ in range(3)))
        q, k, _ = project_qkv(rng.normal(size=(10, 12)), w)
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(k, axis=1), 1.0, atol=1e-9)

    def test_zero_row_left_unchanged(self):
        eye = np.eye(2)
        q, _, _ = project_qkv(np.array([[0.0, 0.0], [1.0, 1.0]]), ProjectionWeights(eye, eye, eye))
        np.testing.assert_array_equal(q[0], 0.0)


class TestSoftmaxAttention:
    def test_identical_keys_uniform(self):
        K = np.tile([[0.6, 0.8]], (4, 1))
        Q = unit_rows(np.random.default_rng(2), 4, 2)
        np.testing.assert_allclose(softmax_attention(Q, K), 0.25, atol=1e-15)

    def test_single_token(self):
        np.testing.assert_array_equal(softmax_attention(np.array([[1.0]]), np.array([[1.0]])), [[1.0]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        w = softmax_attention(rng.normal(size=(9, 4)), rng.normal(size=(9, 4)))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


class TestGmmDenominator:
    def test_terms_cancel(self):
        priors = AttentionPriors(np.zeros(1), np.zeros(1), np.zeros(1), 0.0,
                                 softplus_inverse(1.0 - 1e-3), 0.0)
        q = np.array([0.6, 0.8])
        assert gmm_denominator(q, q[None, :], priors) == pytest.approx(1.0, abs=1e-12)

    def test_positive_and_shift_invariant(self):
        rng = np.random.default_rng(4)
        K = unit_rows(rng, 6, 3)
        q = unit_rows(rng, 1, 3)[0]
        priors = random_priors(rng, 6)
        base = gmm_denominator(q, K, priors)
        assert base > 0.0
        shifted = AttentionPriors(priors.pi_logits, priors.gamma_logits + 2.0, priors.beta_raw,
                                  priors.sigma_k_raw, priors.sigma_q_raw, priors.sigma_delta_raw)
        assert gmm_denominator(q, K, shifted) == pytest.approx(base, rel=1e-12)


class TestKeyPosterior:
    def test_matched_priors_reduce_to_softmax(self):
        rng = np.random.default_rng(5)
        Q, K = unit_rows(rng, 8, 3), unit_rows(rng, 8, 3)
        priors = AttentionPriors.matched(8, 3)
        reference = softmax_attention(Q, K)
        for i in range(8):
            row = key_posterior_term(Q[i], K, priors)
            np.testing.assert_allclose(row, reference[i], atol=1e-9)
            assert row.sum() == pytest.approx(1.0, abs=1e-9)

    def test_increasing_in_similarity(self):
        rng = np.random.default_rng(6)
        priors = random_priors(rng, 5, tied=True)
        deltas = np.zeros((1, 5))
        S = rng.uniform(-1.0, 1.0, size=(1, 5))
        previous = None
        for s in np.linspace(-1.0, 1.0, 21):
            S[0, 2] = s
            value = scores_from_similarity(S, deltas, priors.with_beta_zero())[0, 2]
            if previous is not None:
                assert value > previous
            previous = value


class TestSpatialPosterior:
    def test_zero_beta_gives_zero(self):
        rng = np.random.default_rng(7)
        K = unit_rows(rng, 6, 3)
        priors = random_priors(rng, 6).with_beta_zero()
        np.testing.assert_array_equal(spatial_posterior_term(K[0], rng.uniform(size=6), K, priors), 0.0)

    def test_increasing_in_distance_and_peak_at_one(self):
        rng = np.random.default_rng(8)
        K = unit_rows(rng, 4, 3)
        priors = random_priors(rng, 4)
        values = []
        for delta in np.linspace(0.0, 1.0, 11):
            deltas = np.array([delta, 0.3, 0.3, 0.3])
            values.append(spatial_posterior_term(K[0], deltas, K, priors)[0])
        assert all(b > a for a, b in zip(values, values[1:]))
        D = gmm_denominator(K[0], K, priors)
        assert values[-1] * D == pytest.approx(priors.beta[0] / priors.sigma_delta, rel=1e-10)

    def test_rejects_unnormalised_distances(self):
        rng = np.random.default_rng(9)
        K = unit_rows(rng, 3, 2)
        with pytest.raises(PreconditionError):
            spatial_posterior_term(K[0], np.array([0.0, 1.5, 0.2]), K, random_priors(rng, 3))


class TestProbAttentionScores:
    @pytest.mark.parametrize("n", [2, 8, 16])
    def test_reduction_to_softmax(self, n):
        rng = np.random.default_rng(n)
        priors = AttentionPriors.matched(n, 3, beta=0.0)
        for _ in range(100):
            Q, K = unit_rows(rng, n, 3), unit_rows(rng, n, 3)
            got = prob_attention_scores(Q, K, random_deltas(rng, n), priors)
            np.testing.assert_allclose(got, softmax_attention(Q, K), atol=1e-9, rtol=0)

    def test_single_token_reduction(self):
        priors = AttentionPriors.matched(1, 3, beta=0.0)
        q = np.array([[0.0, 0.6, 0.8]])
        np.testing.assert_allclose(prob_attention_scores(q, q, np.zeros((1, 1)), priors), [[1.0]], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        Q, K = unit_rows(rng, 8, 3), unit_rows(rng, 8, 3)
        deltas = random_deltas(rng, 8)
        priors = random_priors(rng, 8)
        got = prob_attention_scores(Q, K, deltas, priors)
        np.testing.assert_allclose(got, brute_force_scores(Q, K, deltas, priors), atol=1e-9, rtol=0)

    def test_non_negative_and_finite(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            Q, K = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
            w = prob_attention_scores(Q, K, random_deltas(rng, 6), random_priors(rng, 6))
            assert np.all(np.isfinite(w)) and np.all(w >= 0.0)

    def test_monotone_at_random_points(self):
        rng = np.random.default_rng(12)
        h = 1e-5
        for _ in range(100):
            n = 4
            priors = random_priors(rng, n, tied=True)
            S = rng.uniform(-1.0, 1.0, size=(n, n))
            deltas = random_deltas(rng, n)
            i, j = rng.integers(n), rng.integers(n)
            up, down = S.copy(), S.copy()
            up[i, j] += h
            down[i, j] -= h
            d_sim = scores_from_similarity(up, deltas, priors)[i, j] - scores_from_similarity(down, deltas, priors)[i, j]
            assert d_sim > 0.0
            if i != j and 2 * h < deltas[i, j] < 1.0 - 2 * h:
                up_d, down_d = deltas.copy(), deltas.copy()
                up_d[i, j] += h
                down_d[i, j] -= h
                d_space = (scores_from_similarity(S, up_d, priors)[i, j]
                           - scores_from_similarity(S, down_d, priors)[i, j])
                assert d_space >= 0.0

    def test_gradients_wrt_priors_and_projections(self):
        rng = np.random.default_rng(13)
        n, d_e, heads = 5, 4, 2
        deltas = random_deltas(rng, n)
        tokens = rng.normal(size=(n, d_e))
        params = {
            "w_q": rng.normal(size=(d_e, d_e)), "w_k": rng.normal(size=(d_e, d_e)),
            "w_v": rng.normal(size=(d_e, d_e)), "w_o": rng.normal(size=(d_e, d_e)),
            "b_o": rng.normal(size=d_e),
            "pi_logits": rng.normal(size=(heads, n)), "gamma_logits": rng.normal(size=(heads, n)),
            "beta_raw": rng.normal(size=(heads, n)),
            "sigma_k_raw": rng.uniform(0.0, 1.0, size=heads), "sigma_q_raw": rng.uniform(0.0, 1.0, size=heads),
            "sigma_delta_raw": rng.uniform(0.0, 1.0, size=heads),
        }
        f = lambda p: T.sum(T.square(multi_head_tensor(Tensor(tokens), p, deltas, heads)))
        report = grad_check(f, params, max_elements=None)
        assert report.passed, report


class TestAttentionOutput:
    def test_identity_scores(self):
        V = np.random.default_rng(14).normal(size=(4, 3))
        np.testing.assert_allclose(attention_output(np.eye(4), V), V)

    def test_uniform_scores_give_mean(self):
        V = np.random.default_rng(15).normal(size=(4, 3))
        out = attention_output(np.full((4, 4), 0.25), V)
        np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (4, 1)), atol=1e-12)

    def test_zero_scores(self):
        V = np.random.default_rng(16).normal(size=(4, 3))
        np.testing.assert_array_equal(attention_output(np.zeros((4, 4)), V), 0.0)


class TestMultiHead:
    def _heads(self, rng, n, d_e, n_heads):
        d = d_e // n_heads
        return [(ProjectionWeights(*(rng.normal(size=(d, d_e)) for _ in range(3))), random_priors(rng, n))
                for _ in range(n_heads)]

    def test_default_output_shape(self):
        rng = np.random.default_rng(17)
        heads = self._heads(rng, 10, 12, 4)
        out = multi_head(rng.normal(size=(10, 12)), heads, rng.normal(size=(12, 12)), np.zeros(12),
                         random_deltas(rng, 10))
        assert out.shape == (10, 12)

    def test_single_head_matches_direct_path(self):
        rng = np.random.default_rng(18)
        tokens = rng.normal(size=(6, 4))
        (weights, priors), = self._heads(rng, 6, 4, 1)
        w_o, b_o = rng.normal(size=(4, 4)), rng.normal(size=4)
        deltas = random_deltas(rng, 6)
        q, k, v = project_qkv(tokens, weights)
        expected = attention_output(prob_attention_scores(q, k, deltas, priors), v) @ w_o.T + b_o
        got = multi_head(tokens, [(weights, priors)], w_o, b_o, deltas, n_heads=1)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_head_permutation(self):
        rng = np.random.default_rng(19)
        n, d_e, n_heads = 6, 12, 4
        d = d_e // n_heads
        tokens = rng.normal(size=(n, d_e))
        heads = self._heads(rng, n, d_e, n_heads)
        deltas = random_deltas(rng, n)
        eye = np.eye(d_e)
        plain = multi_head(tokens, heads, eye, np.zeros(d_e), deltas)
        order = [2, 0, 3, 1]
        permuted = multi_head(tokens, [heads[h] for h in order], eye, np.zeros(d_e), deltas)
        restored = np.empty_like(permuted)
        for slot, h in enumerate(order):
            restored[:, h * d:(h + 1) * d] = permuted[:, slot * d:(slot + 1) * d]
        np.testing.assert_allclose(restored, plain, atol=1e-12)

    def test_indivisible_width(self):
        rng = np.random.default_rng(20)
        with pytest.raises(ConfigError):
            multi_head(rng.normal(size=(3, 10)), [], np.eye(10), np.zeros(10), np.zeros((3, 3)), n_heads=4)

    def test_beta_zero_reduces_to_softmax_heads(self):
        rng = np.random.default_rng(21)
        n, d_e, n_heads = 6, 12, 4
        d = d_e // n_heads
        tokens = rng.normal(size=(n, d_e))
        priors = AttentionPriors.matched(n, d, beta=0.0)
        weights = [ProjectionWeights(*(rng.normal(size=(d, d_e)) for _ in range(3))) for _ in range(n_heads)]
        w_o, b_o = rng.normal(size=(d_e, d_e)), rng.normal(size=d_e)
        got = multi_head(tokens, [(w, priors) for w in weights], w_o, b_o, random_deltas(rng, n))
        outputs = []
        for w in weights:
            q, k, v = project_qkv(tokens, w)
            outputs.append(softmax_attention(q, k) @ v)
        expected = np.concatenate(outputs, axis=1) @ w_o.T + b_o
        np.testing.assert_allclose(got, expected, atol=1e-9)
