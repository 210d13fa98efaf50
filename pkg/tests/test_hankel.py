
import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from conftest import triangle
from ddopf.errors import ForecastInfeasibleError, InsufficientDataError, PersistencyError
from ddopf.hankel import (
    behavior_dimension,
    build_simplified_stack,
    check_persistency,
    hankel_matrix,
    is_persistently_exciting,
    min_data_length,
    nullspace_substitution,
    numerical_rank,
    simplified_rows,
    split_past_future,
    truncate_rank,
)
from ddopf.netmodel import reduce
from ddopf.plant import TrajectoryLog, assemble_descriptor, simulate


@pytest.fixture(scope="module")
def tri():
    model = reduce(triangle(storage=True))
    return model, assemble_descriptor(model)


def _random_log(sys, T, seed, e0=None):
    rng = np.random.default_rng(seed)
    e0 = rng.uniform(10, 40, sys.q) if e0 is None else e0
    return simulate(sys, e0, rng.normal(size=(T, sys.n_u)), rng.normal(size=(T, sys.n_w)))


class TestHankelMatrix:
    def test_scalar(self):
        np.testing.assert_array_equal(hankel_matrix([1, 2, 3, 4], 2), [[1, 2, 3], [2, 3, 4]])

    def test_full_depth(self):
        assert hankel_matrix([1, 2, 3], 3).shape == (3, 1)

    def test_depth_one_is_data(self):
        v = np.arange(10.0).reshape(5, 2)
        np.testing.assert_array_equal(hankel_matrix(v, 1), v.T)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            hankel_matrix([1, 2], 3)

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 5))
    def test_block_layout(self, depth, n_v, extra):
        T = depth + extra
        v = np.arange(T * n_v, dtype=float).reshape(T, n_v)
        H = hankel_matrix(v, depth)
        assert H.shape == (depth * n_v, T - depth + 1)
        for j in range(H.shape[1]):
            np.testing.assert_array_equal(H[:, j], v[j : j + depth].ravel())


class TestPersistency:
    def test_geometric(self):
        assert is_persistently_exciting([1, 2, 4, 8, 16], 2) == (False, 1)

    def test_random(self):
        pe, rank = is_persistently_exciting(np.random.default_rng(0).normal(size=5), 2)
        assert pe and rank == 2

    def test_too_few_columns(self):
        # 2 * 3 rows but only 2 columns
        assert not is_persistently_exciting(np.random.default_rng(0).normal(size=(4, 2)), 3)[0]

    def test_insufficient_data_is_error(self):
        with pytest.raises(InsufficientDataError):
            is_persistently_exciting([1.0, 2.0], 3)

    def test_min_data_length(self):
        assert min_data_length(57, 99, 4, 1, 12) == 157 * 20 - 1 == 3139

    def test_strict_raises_short(self):
        rng = np.random.default_rng(0)
        with pytest.raises(PersistencyError, match="T >="):
            check_persistency(rng.normal(size=(10, 2)), rng.normal(size=(10, 1)), 1, 2, "strict")

    def test_strict_raises_rank(self):
        u = np.zeros((40, 2))
        with pytest.raises(PersistencyError, match="not persistently exciting"):
            check_persistency(u, np.ones((40, 1)), 1, 2, "strict")

    def test_truncated_reports(self):
        rep = check_persistency(np.zeros((40, 2)), np.ones((40, 1)), 1, 2, "truncated")
        assert rep["persistently_exciting"] is False and rep["order"] == 4 and rep["required_rank"] == 12

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            check_persistency(np.zeros((4, 1)), np.zeros((4, 1)), 0, 1, "loose")


class TestSplit:
    def test_scalar_example(self):
        log = TrajectoryLog([[1.0], [2.0], [3.0]], [[4.0], [5.0], [6.0]], [[7.0], [8.0], [9.0]])
        parts = split_past_future(log, 1, 1, 1)
        np.testing.assert_array_equal(parts["U_P"], [[1, 2]])
        np.testing.assert_array_equal(parts["U_F"], [[2, 3]])
        np.testing.assert_array_equal(parts["Y_P"], [[7, 8]])

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 2), st.integers(0, 6))
    def test_columns_and_concatenation(self, t_ini, L, s, extra):
        T = t_ini + L + s - 1 + extra
        rng = np.random.default_rng(T)
        log = TrajectoryLog(rng.normal(size=(T, 2)), rng.normal(size=(T, 1)), rng.normal(size=(T, 3)))
        parts = split_past_future(log, t_ini, L, s)
        assert parts["U_F"].shape[1] == T - L - t_ini - s + 2
        full = hankel_matrix(log.y[: T - s + 1], t_ini + L)
        np.testing.assert_array_equal(np.vstack([parts["Y_P"], parts["Y_F"]]), full)

    def test_insufficient(self):
        log = TrajectoryLog(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
        with pytest.raises(InsufficientDataError):
            split_past_future(log, 2, 2, 1)


class TestStack:
    def test_one_storage_blocks(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 30, 0), model.Cs_red, 1, 2)
        assert stack.S_P.shape[0] == 1 and stack.E_P.shape[0] == 1
        assert stack.U_F.shape[0] == 2 * sys.n_u and stack.Y_F.shape[0] == 2 * sys.n_y
        assert len({getattr(stack, n).shape[1] for n in stack.block_names()}) == 1

    def test_past_blocks_are_storage_signals(self, tri):
        model, sys = tri
        log = _random_log(sys, 20, 1)
        stack = build_simplified_stack(log, model.Cs_red, 1, 1)
        np.testing.assert_array_equal(stack.S_P[0], log.u[:-1, -1])
        np.testing.assert_array_equal(stack.E_P[0], log.y[:-1, 0])

    def test_118_rows(self, models, systems):
        model, sys = models["case118"], systems["case118"]
        log = _random_log(sys, 40, 2, e0=np.full(4, 100.0))
        stack = build_simplified_stack(log, model.Cs_red, 1, 1)
        assert stack.rows == 355 == simplified_rows(57, 99, 191, 4, 1, 1)
        assert behavior_dimension(57, 99, 4, 1) == 316

    def test_full_mode_keeps_past(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 30, 3), model.Cs_red, 1, 2, past_mode="full")
        assert stack.past_mode == "full" and stack.U_P.shape[0] == sys.n_u

    def test_strict_rejects_short_record(self, tri):
        model, sys = tri
        with pytest.raises(PersistencyError):
            build_simplified_stack(_random_log(sys, 10, 4), model.Cs_red, 1, 2, pe_policy="strict")


def _principal_angles(A, B):
    return sla.subspace_angles(A, B)


class TestTruncation:
    def test_exact_rank_keeps_span(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 60, 5), model.Cs_red, 1, 2)
        Z = stack.stacked()
        r = numerical_rank(Z)
        assert r < Z.shape[1]
        small = truncate_rank(stack, r)
        assert small.m == r
        assert numerical_rank(small.stacked()) == r
        assert np.max(_principal_angles(Z, small.stacked())) < 1e-8
        assert small.truncation.original_rank == r and small.truncation.kept == r

    def test_rank_after_truncation(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 60, 6), model.Cs_red, 1, 2)
        small = truncate_rank(stack, 3)
        assert numerical_rank(small.stacked()) == 3 and small.truncation.discarded.size > 0

    def test_target_above_columns_is_noop(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 12, 7), model.Cs_red, 1, 1)
        with pytest.warns(UserWarning):
            same = truncate_rank(stack, stack.m + 5)
        assert same is stack

    def test_invalid_target(self, tri):
        model, sys = tri
        stack = build_simplified_stack(_random_log(sys, 12, 8), model.Cs_red, 1, 1)
        with pytest.raises(ValueError):
            truncate_rank(stack, 0)


class TestNullspace:
    def test_square(self):
        sub = nullspace_substitution(np.eye(2))
        assert sub.basis.shape == (2, 0)
        np.testing.assert_allclose(sub.alpha([3.0, 4.0], np.zeros(0)), [3.0, 4.0])

    def test_row(self):
        sub = nullspace_substitution(np.array([[1.0, 1.0]]))
        b = sub.basis[:, 0] * np.sign(sub.basis[0, 0])
        np.testing.assert_allclose(b, np.array([1.0, -1.0]) / np.sqrt(2), atol=1e-12)

    def test_out_of_range_forecast(self):
        sub = nullspace_substitution(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ForecastInfeasibleError):
            sub.particular([1.0, 2.0])

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            nullspace_substitution(np.zeros((2, 3)))

    @given(st.integers(1, 4), st.integers(0, 6), st.integers(0, 2**31 - 1))
    def test_invariants(self, rows, extra, seed):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(rows, rows + extra))
        sub = nullspace_substitution(W)
        np.testing.assert_allclose(W @ sub.basis, 0, atol=1e-10)
        np.testing.assert_allclose(sub.basis.T @ sub.basis, np.eye(sub.basis.shape[1]), atol=1e-10)
        w = W @ rng.normal(size=W.shape[1])
        beta = rng.normal(size=sub.basis.shape[1])
        np.testing.assert_allclose(W @ sub.alpha(w, beta), w, atol=1e-9)


class TestFundamentalLemma:
    """Small instance: triangle grid with one storage, q = s = 1."""

    T_INI, L = 1, 3

    def _data(self, sys, seed=11):
        # joint (u, w) PE of order N + q + s - 1 with N = T_ini + L
        N = self.T_INI + self.L
        T = min_data_length(sys.n_u, sys.n_w, sys.q, 1, N) + 10
        log = _random_log(sys, T, seed)
        uw = np.hstack([log.u, log.w])
        assert is_persistently_exciting(uw, N + sys.q)[0]
        return log

    def _stack(self, log):
        N = self.T_INI + self.L
        return np.vstack([hankel_matrix(log.u, N), hankel_matrix(log.w, N), hankel_matrix(log.y, N)])

    def test_forward_direction(self, tri):
        model, sys = tri
        H = self._stack(self._data(sys))
        N = self.T_INI + self.L
        for seed in range(5):
            traj = _random_log(sys, N, 100 + seed)
            v = np.concatenate([traj.u.ravel(), traj.w.ravel(), traj.y.ravel()])
            alpha = np.linalg.lstsq(H, v, rcond=None)[0]
            assert np.linalg.norm(H @ alpha - v) < 1e-8 * max(1.0, np.linalg.norm(v))

    def test_forward_direction_simplified_stack(self, tri):
        model, sys = tri
        stack = build_simplified_stack(self._data(sys), model.Cs_red, self.T_INI, self.L, pe_policy="strict")
        Z = stack.stacked()
        traj = _random_log(sys, self.T_INI + self.L, 200)
        s = traj.u @ model.Cs_red.T
        v = np.concatenate([s[: self.T_INI].ravel(), traj.y[: self.T_INI, : sys.q].ravel(),
                            traj.u[self.T_INI :].ravel(), traj.w[self.T_INI :].ravel(),
                            traj.y[self.T_INI :].ravel()])
        alpha = np.linalg.lstsq(Z, v, rcond=None)[0]
        assert np.linalg.norm(Z @ alpha - v) < 1e-8 * np.linalg.norm(v)

    def test_reverse_direction(self, tri):
        model, sys = tri
        H = self._stack(self._data(sys))
        N = self.T_INI + self.L
        rng = np.random.default_rng(3)
        for _ in range(5):
            v = H @ rng.normal(size=H.shape[1])
            u = v[: N * sys.n_u].reshape(N, sys.n_u)
            w = v[N * sys.n_u : N * (sys.n_u + sys.n_w)].reshape(N, sys.n_w)
            y = v[N * (sys.n_u + sys.n_w) :].reshape(N, sys.n_y)
            replay = simulate(sys, y[0, : sys.q], u, w)
            np.testing.assert_allclose(replay.y, y, atol=1e-8 * max(1.0, np.abs(y).max()))
