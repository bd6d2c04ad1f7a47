"""Attention block tests: operators, position encoding, mechanisms, gradients."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctpoint.autodiff import DomainError, Tensor, grad_check, sum_reduce
from ctpoint.attention import (
    MECHANISMS,
    OPERATORS,
    AttentionConfig,
    AttentionMapMLP,
    GflBlock,
    PositionEncoder,
    delta,
    offset_attention,
    position_encode,
    qkv_project,
    relative_positions,
    scalar_attention,
    vector_attention,
)
from ctpoint.layers import LBR

from conftest import jitter_params, snapshot_restore, t64


class TestQkv:
    def test_identity_weights(self):
        rng = np.random.default_rng(0)
        y = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        eye = Tensor(np.eye(4, dtype=np.float32))
        q, k, v = qkv_project(y, eye, eye, eye)
        assert_allclose(q.data, y.data)

    def test_zero_weights(self):
        y = Tensor(np.ones((3, 4), dtype=np.float32))
        zero = Tensor(np.zeros((4, 4), dtype=np.float32))
        q, k, v = qkv_project(y, zero, zero, zero)
        assert not q.data.any() and not k.data.any() and not v.data.any()

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            qkv_project(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 5))),
                        Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        y = t64(rng.uniform(-1, 1, (3, 4)))
        ws = [t64(rng.uniform(-1, 1, (4, 4))) for _ in range(3)]
        w = np.linspace(1, 2, 12).reshape(3, 4)

        def fn(y, wq, wk, wv):
            q, k, v = qkv_project(y, wq, wk, wv)
            return sum_reduce((q + k + v) * Tensor(w, dtype=np.float64))

        report = grad_check(fn, [y] + ws)
        assert report["passed"], report


class TestScalarAttention:
    def test_single_token_returns_value(self):
        rng = np.random.default_rng(2)
        q, k, v = (Tensor(rng.normal(size=(1, 4)).astype(np.float32)) for _ in range(3))
        out, _ = scalar_attention(q, k, v)
        assert_allclose(out.data, v.data, atol=1e-6)

    def test_identical_keys_uniform(self):
        key = np.array([[0.3, -0.7], [0.3, -0.7]], dtype=np.float32)
        q = Tensor(np.array([[1.0, 2.0], [0.5, 0.1]], dtype=np.float32))
        v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        out, weights = scalar_attention(q, Tensor(key), v)
        assert_allclose(weights.data, np.full((2, 2), 0.5), atol=1e-6)
        assert_allclose(out.data, np.full((2, 2), 0.5), atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        q, k, v = (Tensor(rng.normal(size=(5, 3)).astype(np.float32)) for _ in range(3))
        _, weights = scalar_attention(q, k, v)
        assert_allclose(weights.data.sum(axis=-1), np.ones(5), atol=1e-6)


class TestDelta:
    def test_subtraction_self_pairs_are_zero(self):
        # entry (m, n) = q_m - k_n, so with K = Q every self pair (m, m)
        # vanishes exactly (and the whole map vanishes iff tokens coincide)
        rng = np.random.default_rng(4)
        q = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        out = delta(q, q, "subtraction").data
        assert not np.diagonal(out, axis1=0, axis2=1).any()
        same = Tensor(np.tile(rng.normal(size=4).astype(np.float32), (3, 1)))
        assert not delta(same, same, "subtraction").data.any()

    def test_hadamard_zero_query(self):
        k = Tensor(np.ones((3, 4), dtype=np.float32))
        out = delta(Tensor(np.zeros((3, 4), dtype=np.float32)), k, "hadamard")
        assert not out.data.any()

    def test_hand_subtraction(self):
        q = Tensor(np.array([[1.0], [2.0]], dtype=np.float32))
        k = Tensor(np.array([[3.0], [5.0]], dtype=np.float32))
        out = delta(q, k, "subtraction")
        assert_allclose(out.data[..., 0], [[-2.0, -4.0], [-1.0, -3.0]])

    def test_antisymmetry_under_swap(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        k = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        a = delta(q, k, "subtraction").data
        b = delta(k, q, "subtraction").data
        assert_allclose(a, -np.swapaxes(b, 0, 1), atol=1e-6)

    def test_concatenation_doubles_channels(self):
        q = Tensor(np.zeros((3, 4), dtype=np.float32))
        assert delta(q, q, "concatenation").shape == (3, 3, 8)

    def test_division_flags_zero_keys(self):
        q = Tensor(np.ones((2, 2), dtype=np.float32))
        k = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]], dtype=np.float32))
        with pytest.raises(DomainError):
            delta(q, k, "division")

    def test_dot_rejected(self):
        q = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            delta(q, q, "dot")


class TestPositionEncoding:
    def test_relative_diagonal_zero_and_antisymmetry(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(5, 3))
        rel = relative_positions(p, np.float64).data
        assert_allclose(np.diagonal(rel, axis1=0, axis2=1).T, np.zeros((5, 3)))
        assert_allclose(rel, -np.swapaxes(rel, 0, 1))

    def test_output_shape(self):
        rng = np.random.default_rng(7)
        enc = PositionEncoder(rng, d=6, dtype=np.float32)
        out = position_encode(rng.normal(size=(4, 3)), enc, train=False, dtype=np.float32)
        assert out.shape == (4, 4, 6)


class TestVectorAttention:
    def test_constant_premap_gives_uniform_weights_and_mean_value(self):
        # with the map MLP's final layer at exactly zero (the limit of its
        # near-identity init) the pre-weights are constant, so softmax + l1
        # yields uniform 1/S weights and the output is the column mean of V
        rng = np.random.default_rng(8)
        d = 3
        tau = AttentionMapMLP(rng, d, d, np.float32)
        tau.lin2.weight.data[:] = 0
        q = Tensor(rng.normal(size=(4, d)).astype(np.float32))
        v = Tensor(rng.normal(size=(4, d)).astype(np.float32))
        out, weights = vector_attention(q, q, v, None, tau, "subtraction")
        assert_allclose(weights.data, np.full((4, 4, d), 0.25), atol=1e-6)
        assert_allclose(out.data, np.tile(v.data.mean(axis=0), (4, 1)), atol=1e-6)

    def test_single_token_returns_value(self):
        rng = np.random.default_rng(9)
        tau = AttentionMapMLP(rng, 4, 4, np.float32)
        q = Tensor(rng.normal(size=(1, 4)).astype(np.float32))
        v = Tensor(rng.normal(size=(1, 4)).astype(np.float32))
        out, _ = vector_attention(q, q, v, None, tau, "hadamard")
        assert_allclose(out.data, v.data, atol=1e-6)

    @pytest.mark.parametrize("operator", ["subtraction", "summation"])
    def test_pairwise_fast_map_matches_generic(self, operator):
        rng = np.random.default_rng(21)
        d = 5
        tau = AttentionMapMLP(rng, d, d, np.float64)
        tau.lin1.bias.data = rng.uniform(-0.3, 0.3, d)
        q = Tensor(rng.normal(size=(4, d)), dtype=np.float64)
        k = Tensor(rng.normal(size=(4, d)), dtype=np.float64)
        fast = tau.pairwise(q, k, operator).data
        generic = tau(delta(q, k, operator)).data
        assert_allclose(fast, generic, atol=1e-12)

    @pytest.mark.parametrize("operator", ["concatenation", "summation", "subtraction", "hadamard"])
    def test_weights_sum_to_one_per_query_channel(self, operator):
        rng = np.random.default_rng(10)
        d = 4
        d_in = 2 * d if operator == "concatenation" else d
        tau = AttentionMapMLP(rng, d_in, d, np.float32)
        q = Tensor(rng.normal(size=(5, d)).astype(np.float32))
        k = Tensor(rng.normal(size=(5, d)).astype(np.float32))
        v = Tensor(rng.normal(size=(5, d)).astype(np.float32))
        _, weights = vector_attention(q, k, v, None, tau, operator)
        assert_allclose(weights.data.sum(axis=-2), np.ones((5, d)), atol=1e-6)


class TestOffsetAttention:
    def test_zero_offset_case(self):
        rng = np.random.default_rng(11)
        lbr = LBR(rng, 3, 3, dtype=np.float32)
        y = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        out = offset_attention(y, y, lbr, train=False)
        base = lbr(Tensor(np.zeros((4, 3), dtype=np.float32)), train=False)
        assert_allclose(out.data, base.data + y.data, atol=1e-6)
        assert out.shape == y.shape

    def test_hand_micro_example(self):
        rng = np.random.default_rng(12)
        lbr = LBR(rng, 2, 2, dtype=np.float32)
        lbr.lin.weight.data = np.eye(2, dtype=np.float32)
        lbr.lin.bias.data[:] = 0
        y = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        va = Tensor(np.full((2, 2), 0.5, dtype=np.float32))
        out = offset_attention(y, va, lbr, train=False)
        assert_allclose(out.data, [[1.5, 0.0], [0.0, 1.5]], rtol=1e-4)


def make_block(mechanism, operator, d=4, s=3, seed=0, pos=True, dtype=np.float64, jitter=False):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(mechanism, operator, position_encoding=pos)
    block = GflBlock(rng, d, cfg, dtype)
    if jitter:
        jitter_params(block, rng)
    y = rng.uniform(-1.0, 1.0, size=(s, d))
    if operator == "division":
        # keep keys bounded away from zero: positive tokens, near-identity W_K
        y = rng.uniform(0.5, 1.5, size=(s, d))
        block.w_k.data = np.eye(d, dtype=dtype) + rng.uniform(-0.01, 0.01, (d, d))
    positions = rng.uniform(-1, 1, size=(s, 3))
    return block, Tensor(y.astype(dtype), dtype=dtype), positions


class TestGflBlock:
    def test_basic_dot_is_scalar_attention(self):
        block, y, positions = make_block("basic", "dot", dtype=np.float32)
        out = block(y, positions, train=False)
        q, k, v = qkv_project(y, block.w_q, block.w_k, block.w_v)
        want, _ = scalar_attention(q, k, v)
        assert np.array_equal(out.data, want.data)

    def test_residual_contains_input_when_values_vanish(self):
        block, y, positions = make_block("pa_residual", "subtraction", dtype=np.float32)
        block.w_v.data[:] = 0
        out = block(y, positions, train=False)
        assert_allclose(out.data, y.data, atol=1e-7)

    def test_offset_composition_oracle(self):
        block, y, positions = make_block("offset", "subtraction", dtype=np.float32)
        out = block(y, positions, train=True)
        restore = snapshot_restore(block)
        restore()
        q, k, v = qkv_project(y, block.w_q, block.w_k, block.w_v)
        rho = position_encode(positions, block.pos, True, np.float32)
        att, _ = vector_attention(q, k, v, rho, block.tau, "subtraction")
        want = offset_attention(y, att, block.lbr, train=True)
        assert_allclose(out.data, want.data, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        for mech in MECHANISMS:
            block, y, positions = make_block(mech, "subtraction", s=5, dtype=np.float32)
            perm = rng.permutation(5)
            restore = snapshot_restore(block)
            a = block(y, positions, train=True).data
            restore()
            b = block(Tensor(y.data[perm]), positions[perm], train=True).data
            assert_allclose(b, a[perm], atol=2e-5)

    def test_translation_invariance_without_position_encoding(self):
        block, y, positions = make_block("offset", "subtraction", pos=False, dtype=np.float32)
        a = block(y, positions, train=False).data
        b = block(y, positions + np.array([5.0, -2.0, 1.0]), train=False).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("mechanism", MECHANISMS)
    @pytest.mark.parametrize("operator", ["dot", "subtraction"])
    def test_gradients_sample(self, mechanism, operator):
        report = gfl_gradcheck(mechanism, operator)
        assert report["passed"], (mechanism, operator, report)


def gfl_gradcheck(mechanism, operator, seed=0):
    """End-to-end finite-difference check of one mechanism/operator combo."""
    block, y, positions = make_block(mechanism, operator, seed=seed, jitter=True)
    y.requires_grad = True
    restore = snapshot_restore(block)
    params = [y] + [p for _, p in block.named_parameters()]
    w = np.linspace(0.5, 1.5, y.data.size).reshape(y.shape)

    def fn(*_):
        restore()
        out = block(y, positions, train=True)
        return sum_reduce(out * Tensor(w, dtype=np.float64))

    return grad_check(fn, params)


class TestConfig:
    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            AttentionConfig("laplacian", "subtraction")
        with pytest.raises(ValueError):
            AttentionConfig("basic", "tensor")

    def test_all_combinations_instantiate(self):
        rng = np.random.default_rng(14)
        for mech in MECHANISMS:
            for op in OPERATORS:
                GflBlock(rng, 4, AttentionConfig(mech, op), np.float32)
