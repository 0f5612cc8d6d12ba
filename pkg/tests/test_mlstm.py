"""mLSTM recurrence: reference cell, stabilization, parallel equivalence."""

import numpy as np
import pytest

from malvision.errors import NumericsError
from malvision.gradcheck import grad_check
from malvision.mlstm import (MLSTMBlockParams, MLSTMState, init_mlstm_block,
                             mlstm_block_forward, mlstm_block_reference,
                             mlstm_cell_step, mlstm_recurrence_step)
from malvision.tensor import GradTape, Tensor, tmean


def naive_recurrence(qs, ks, vs, ips, fps, forget="sigmoid"):
    """Unstabilized 64-bit oracle: direct exponentials, normalizer bound 1.

    qs/ks/vs are (T, heads, d); ips/fps are (T, heads).  ks must carry the
    same 1/sqrt(d) scaling the implementation applies.
    """
    t_len, heads, d = qs.shape
    c = np.zeros((heads, d, d))
    n = np.zeros((heads, d))
    outs = np.zeros((t_len, heads, d))
    for t in range(t_len):
        i = np.exp(ips[t])
        if forget == "sigmoid":
            f = 1.0 / (1.0 + np.exp(-fps[t]))
        else:
            f = np.exp(fps[t])
        c = f[:, None, None] * c + \
            i[:, None, None] * (vs[t][:, :, None] * ks[t][:, None, :])
        n = f[:, None] * n + i[:, None] * ks[t]
        num = np.einsum("hij,hj->hi", c, qs[t])
        qn = np.einsum("hj,hj->h", n, qs[t])
        outs[t] = num / np.maximum(np.abs(qn), 1.0)[:, None]
    return outs


def run_stabilized(qs, ks, vs, ips, fps, forget="sigmoid"):
    t_len, heads, d = qs.shape
    state = MLSTMState.zeros(heads, d, dtype=np.float64)
    outs = np.zeros_like(qs)
    for t in range(t_len):
        state, outs[t] = mlstm_recurrence_step(state, qs[t], ks[t], vs[t],
                                               ips[t], fps[t], forget)
    return outs


class TestRecurrenceCore:
    def test_covariance_update_degenerate_step(self):
        # input gate forced to 1 (zero pre-activation), forget gate
        # effectively 0; with d=1 the key scaling is 1, so C1 = v1 k1^T
        state = MLSTMState.zeros(1, 1)
        q = np.array([[2.0]])
        k = np.array([[3.0]])
        v = np.array([[5.0]])
        state, _ = mlstm_recurrence_step(state, q, k, v,
                                         ip=np.zeros(1),
                                         fp=np.full(1, -1e3))
        assert state.c.tolist() == [[[15.0]]]
        assert state.n.tolist() == [[3.0]]

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("forget", ["sigmoid", "exp"])
    def test_matches_naive_recurrence_t6(self, seed, forget):
        rng = np.random.default_rng(seed)
        t_len, heads, d = 6, 2, 4
        qs = rng.normal(size=(t_len, heads, d))
        ks = rng.normal(size=(t_len, heads, d)) / np.sqrt(d)
        vs = rng.normal(size=(t_len, heads, d))
        ips = rng.uniform(-5, 5, size=(t_len, heads))
        fps = rng.uniform(-5, 5, size=(t_len, heads))
        want = naive_recurrence(qs, ks, vs, ips, fps, forget)
        got = run_stabilized(qs, ks, vs, ips, fps, forget)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_recurrence_length_64(self, seed):
        rng = np.random.default_rng(100 + seed)
        t_len, heads, d = 64, 2, 4
        qs = rng.normal(size=(t_len, heads, d))
        ks = rng.normal(size=(t_len, heads, d)) / np.sqrt(d)
        vs = rng.normal(size=(t_len, heads, d))
        ips = rng.uniform(-5, 5, size=(t_len, heads))
        fps = rng.uniform(-5, 5, size=(t_len, heads))
        want = naive_recurrence(qs, ks, vs, ips, fps)
        got = run_stabilized(qs, ks, vs, ips, fps)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


class TestCellStep:
    def _zero_params(self, dim=8, heads=2):
        z = lambda *shape: Tensor(np.zeros(shape, dtype=np.float64))
        return MLSTMBlockParams(
            heads=heads, pre_g=z(dim), pre_b=z(dim), wq=z(dim, dim),
            wk=z(dim, dim), wv=z(dim, dim), wi=z(heads, dim), bi=z(heads),
            wf=z(heads, dim), bf=z(heads), mh_g=z(dim), mh_b=z(dim),
            wo=z(dim, dim))

    def test_zero_input_zero_params(self):
        params = self._zero_params()
        state = MLSTMState.zeros(2, 4)
        new_state, y = mlstm_cell_step(state, np.zeros(8), params)
        assert np.array_equal(y, np.zeros(8))
        assert np.array_equal(new_state.c, state.c)
        assert np.array_equal(new_state.n, state.n)
        assert np.array_equal(new_state.m, state.m)

    def test_non_finite_state_names_step(self):
        params = self._zero_params()
        params.bf = Tensor(np.full(2, np.inf))  # exp forget overflows
        state = MLSTMState.zeros(2, 4)
        with pytest.raises(NumericsError, match="step 3"):
            mlstm_cell_step(state, np.ones(8), params, forget="exp", step=3)


class TestBlockForward:
    def _random_block(self, seed, dim=8, heads=2, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return init_mlstm_block(rng, dim, heads, num_blocks=2, dtype=dtype)

    def test_length_one_reverse_is_noop(self):
        params = self._random_block(0)
        x = np.random.default_rng(1).normal(size=(1, 8))
        fwd = mlstm_block_reference(x, params, reverse=False)
        rev = mlstm_block_reference(x, params, reverse=True)
        assert np.array_equal(fwd, rev)

    def test_reverse_definition_identity(self):
        # reverse(block(reverse(seq))) == block with the reverse flag
        params = self._random_block(2)
        x = np.random.default_rng(3).normal(size=(5, 8))
        via_flag = mlstm_block_reference(x, params, reverse=True)
        manual = mlstm_block_reference(x[::-1], params, reverse=False)[::-1]
        assert np.array_equal(via_flag, manual)

    def test_palindromic_constant_sequence_direction_invariant(self):
        # a constant sequence is a palindrome; with the forget gate driven
        # to zero the cell is memoryless, so both scan directions produce
        # the same outputs (verified by evaluating both paths)
        params = self._random_block(4)
        params.wf.data = np.zeros_like(params.wf.data)
        params.bf.data = np.full_like(params.bf.data, -1e3)
        x = np.tile(np.random.default_rng(5).normal(size=(1, 8)), (6, 1))
        fwd = mlstm_block_reference(x, params, reverse=False)
        rev = mlstm_block_reference(x, params, reverse=True)
        np.testing.assert_allclose(fwd, rev, atol=1e-12)

    @pytest.mark.parametrize("reverse", [False, True])
    @pytest.mark.parametrize("forget", ["sigmoid", "exp"])
    def test_parallel_matches_sequential_f64(self, reverse, forget):
        params = self._random_block(6)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 12, 8))
        got = mlstm_block_forward(Tensor(x), params, reverse, forget).data
        for b in range(2):
            want = mlstm_block_reference(x[b], params, reverse, forget)
            np.testing.assert_allclose(got[b], want, rtol=1e-9, atol=1e-11)

    def test_parallel_matches_sequential_f32_within_1e5(self):
        params = self._random_block(8, dtype=np.float32)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 24, 8)).astype(np.float32)
        got = mlstm_block_forward(Tensor(x), params).data
        want = mlstm_block_reference(x[0], params)
        np.testing.assert_allclose(got[0], want, atol=1e-5, rtol=1e-4)

    def test_batch_rows_independent(self):
        params = self._random_block(10)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 6, 8))
        doubled = np.concatenate([x, x], axis=0)
        out = mlstm_block_forward(Tensor(doubled), params).data
        assert np.array_equal(out[0], out[1])


class TestBlockGradients:
    def _check(self, seed, qk_scale):
        rng = np.random.default_rng(seed)
        params = init_mlstm_block(rng, dim=6, heads=2, num_blocks=1,
                                  dtype=np.float64)
        params.wq.data = params.wq.data * qk_scale
        params.wk.data = params.wk.data * qk_scale
        x = rng.normal(size=(1, 5, 6))
        named = dict(params.named("blk"))

        def f():
            return tmean(mlstm_block_forward(Tensor(x), params))

        report = grad_check(f, named, eps=1e-6, tol=1e-4)
        assert report.passed, report.summary()

    def test_gradients_on_lower_bound_branch(self):
        # small q/k keep the normalizer pinned to exp(-m)
        self._check(seed=12, qk_scale=0.05)

    def test_gradients_on_dot_product_branch(self):
        # large q/k keep |n.q| decisively above the lower bound
        self._check(seed=13, qk_scale=30.0)
