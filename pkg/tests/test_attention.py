"""Exact attention oracle and Nystrom approximation tests."""

import numpy as np
import pytest

from detectbert import numerics as nm
from detectbert.attention import (
    AttentionParams,
    exact_attention,
    multi_head_nystrom,
    nystrom_attention,
)
from detectbert.numerics import ShapeError, Tensor
from detectbert.verify import gradcheck


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestExactAttention:
    def test_single_query_single_key(self):
        q = Tensor([[1.0, -2.0]])
        k = Tensor([[0.3, 0.4]])
        v = Tensor([[5.0, 6.0]])
        np.testing.assert_allclose(exact_attention(q, k, v).value, [[5.0, 6.0]], atol=1e-15)

    def test_zero_queries_give_column_means(self):
        rng = np.random.default_rng(0)
        k = rng.standard_normal((7, 4))
        v = rng.standard_normal((7, 4))
        out = exact_attention(Tensor(np.zeros((3, 4))), Tensor(k), Tensor(v)).value
        expected = np.broadcast_to(v.mean(axis=0), (3, 4))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_hand_composed_pipeline(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.standard_normal((6, 8)) for _ in range(3))
        composed = nm.matmul(
            nm.softmax_rows(nm.scale(nm.matmul(Tensor(q), nm.transpose(Tensor(k))), 8 ** -0.5)),
            Tensor(v),
        ).value
        got = exact_attention(Tensor(q), Tensor(k), Tensor(v)).value
        assert np.abs(got - composed).max() < 1e-12

    def test_permutation_equivariance_in_q(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((6, 5)) for _ in range(3))
        perm = rng.permutation(6)
        base = exact_attention(Tensor(q), Tensor(k), Tensor(v)).value
        permuted = exact_attention(Tensor(q[perm]), Tensor(k), Tensor(v)).value
        assert np.abs(permuted - base[perm]).max() < 1e-12

    def test_joint_kv_permutation_invariance(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal((6, 5)) for _ in range(3))
        perm = rng.permutation(6)
        base = exact_attention(Tensor(q), Tensor(k), Tensor(v)).value
        permuted = exact_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm])).value
        assert np.abs(permuted - base).max() < 1e-12

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            exact_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
        with pytest.raises(ShapeError):
            exact_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


class TestNystromAttention:
    def test_single_token(self):
        q = Tensor([[2.0, 1.0]])
        v = Tensor([[4.0, -1.0]])
        out = nystrom_attention(q, q, v, m=1).value
        np.testing.assert_allclose(out, [[4.0, -1.0]], atol=1e-12)

    def test_full_landmarks_match_exact(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.standard_normal((12, 8)) for _ in range(3))
        exact = exact_attention(Tensor(q), Tensor(k), Tensor(v)).value
        approx = nystrom_attention(Tensor(q), Tensor(k), Tensor(v), m=12).value
        assert rel_frob(approx, exact) < 1e-5

    def test_full_landmarks_match_exact_many_sizes(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            n = int(rng.integers(1, 33))
            d = int(rng.integers(1, 17))
            q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
            exact = exact_attention(Tensor(q), Tensor(k), Tensor(v)).value
            approx = nystrom_attention(Tensor(q), Tensor(k), Tensor(v), m=n).value
            assert rel_frob(approx, exact) < 1e-5

    def test_zero_queries_any_landmark_count(self):
        rng = np.random.default_rng(6)
        k = rng.standard_normal((10, 4))
        v = rng.standard_normal((10, 4))
        for m in (1, 3, 7, 10):
            out = nystrom_attention(Tensor(np.zeros((10, 4))), Tensor(k), Tensor(v), m).value
            expected = np.broadcast_to(v.mean(axis=0), (10, 4))
            np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_landmark_range_validated(self):
        q = Tensor(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            nystrom_attention(q, q, q, m=0)
        with pytest.raises(ValueError):
            nystrom_attention(q, q, q, m=5)


def identity_params(d, heads=1, landmarks=64):
    eye = np.eye(d)
    return AttentionParams(
        w_q=Tensor(eye.copy()),
        w_k=Tensor(eye.copy()),
        w_v=Tensor(eye.copy()),
        w_o=Tensor(eye.copy()),
        heads=heads,
        landmarks=landmarks,
    )


class TestMultiHeadNystrom:
    def test_identity_projections_single_head(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((9, 6))
        params = identity_params(6, heads=1, landmarks=4)
        via_mha = multi_head_nystrom(Tensor(x), params).value
        direct = nystrom_attention(Tensor(x), Tensor(x), Tensor(x), m=4).value
        np.testing.assert_allclose(via_mha, direct, atol=1e-12)

    def test_zero_values_give_zero_output(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 4))
        params = identity_params(4, heads=2)
        params.w_v = Tensor(np.zeros((4, 4)))
        out = multi_head_nystrom(Tensor(x), params).value
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_heads_decouple_into_single_head_runs(self):
        """Block-diagonal projections split the width into independent
        halves; each half must match its own single-head run."""
        rng = np.random.default_rng(9)
        h = 3
        d = 2 * h
        x = rng.standard_normal((8, d))
        blocks = {name: rng.standard_normal((2, h, h)) for name in ("q", "k", "v")}

        def blockdiag(pair):
            out = np.zeros((d, d))
            out[:h, :h] = pair[0]
            out[h:, h:] = pair[1]
            return out

        two_head = AttentionParams(
            w_q=Tensor(blockdiag(blocks["q"])),
            w_k=Tensor(blockdiag(blocks["k"])),
            w_v=Tensor(blockdiag(blocks["v"])),
            w_o=Tensor(np.eye(d)),
            heads=2,
            landmarks=4,
        )
        combined = multi_head_nystrom(Tensor(x), two_head).value
        for half in range(2):
            single = AttentionParams(
                w_q=Tensor(blocks["q"][half]),
                w_k=Tensor(blocks["k"][half]),
                w_v=Tensor(blocks["v"][half]),
                w_o=Tensor(np.eye(h)),
                heads=1,
                landmarks=4,
            )
            sub = multi_head_nystrom(Tensor(x[:, half * h:(half + 1) * h]), single).value
            np.testing.assert_allclose(combined[:, half * h:(half + 1) * h], sub, atol=1e-10)

    def test_output_shape_equals_input_shape(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((11, 8))
        out = multi_head_nystrom(Tensor(x), identity_params(8, heads=4, landmarks=3))
        assert out.shape == (11, 8)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            multi_head_nystrom(Tensor(np.zeros((3, 5))), identity_params(4))

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            identity_params(6, heads=4)

    def test_gradcheck_through_full_layer(self):
        rng = np.random.default_rng(11)
        d, n = 4, 5
        x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
        weights = [
            Tensor(0.5 * rng.standard_normal((d, d)), requires_grad=True) for _ in range(4)
        ]
        params = AttentionParams(*weights, heads=2, landmarks=n)
        loss_w = rng.standard_normal((n, d))

        def build():
            return nm.sum_all(nm.mul(multi_head_nystrom(x, params), Tensor(loss_w)))

        err = gradcheck(build, [x] + weights, step=1e-5)
        assert err < 1e-4, f"max relative gradient error {err:.3e}"


class TestApproximationQuality:
    def test_error_shrinks_with_more_landmarks(self):
        """Mean self-attention error at 64 landmarks is below the mean at 8
        (n=128), and full landmarks agree with the exact oracle."""
        n, d = 128, 16
        errors = {8: [], 64: [], 128: []}
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            x = rng.standard_normal((n, d))
            exact = exact_attention(Tensor(x), Tensor(x), Tensor(x)).value
            for m in errors:
                approx = nystrom_attention(Tensor(x), Tensor(x), Tensor(x), m).value
                errors[m].append(rel_frob(approx, exact))
        mean8 = np.mean(errors[8])
        mean64 = np.mean(errors[64])
        mean_full = np.mean(errors[128])
        assert mean64 < mean8
        assert mean_full < 1e-5
