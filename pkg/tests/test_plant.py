import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL_CASES, random_dyadic, triangle, two_bus
from ddopf.errors import DimensionError
from ddopf.netmodel import reduce
from ddopf.plant import (
    PlantState,
    QuasiWeierstrass,
    TrajectoryLog,
    assemble_descriptor,
    load_trajectory_csv,
    r_controllable,
    r_observable,
    save_trajectory_csv,
    simulate,
    step,
)


def _toy(A1, B1, C1):
    q = A1.shape[0]
    n_u = B1.shape[1]
    return QuasiWeierstrass(
        A1=A1, B1=B1, F1=np.zeros((q, 0)), N=np.zeros((0, 0)), B2=np.zeros((0, n_u)), F2=np.zeros((0, 0)),
        C1=C1, C2=np.zeros((C1.shape[0], 0)), D=np.zeros((C1.shape[0], n_u)), G=np.zeros((C1.shape[0], 0)),
    )


class TestAssemble:
    def test_two_bus_b1(self):
        sys = assemble_descriptor(reduce(two_bus(storage=True)), delta=0.25)
        np.testing.assert_array_equal(sys.B1, [[-0.25]])

    @pytest.mark.parametrize("name", SMALL_CASES + ("case118",))
    def test_structure(self, systems, models, name):
        sys, m = systems[name], models[name]
        q = m.q
        assert not np.any(sys.F1)
        np.testing.assert_array_equal(sys.A1, np.eye(q))
        np.testing.assert_array_equal(sys.D[q], -np.ones(m.n_u))
        np.testing.assert_array_equal(sys.G[q], np.ones(m.n_w))
        assert not np.any(sys.D[np.arange(sys.n_y) != q])
        np.testing.assert_array_equal(sys.C1[:q], np.eye(q))
        assert not np.any(sys.C1[q:])
        np.testing.assert_array_equal(sys.C2[q + 1 :], m.Bf_red)
        assert sys.nilpotency_index == 1
        assert sys.n_y == q + 1 + m.n_e and sys.q == len(m.case.storages)

    def test_b2_f2_solve_reduced_system(self, models, systems):
        m, sys = models["case14"], systems["case14"]
        np.testing.assert_allclose(m.B_red @ sys.B2, -m.Cg_red, atol=1e-12)
        np.testing.assert_allclose(m.B_red @ sys.F2, m.Cd_red, atol=1e-12)


class TestStep:
    def test_discharge_arithmetic(self):
        sys = assemble_descriptor(reduce(two_bus(storage=True)), delta=0.25)
        nxt, y = step(sys, PlantState([100.0], 0.25), np.array([10.0]), np.zeros(0))
        assert nxt.e[0] == 97.5
        assert y[0] == 100.0  # current charge, not next

    def test_zero_input(self, systems):
        sys = systems["case6"]
        e = np.array([30.0] * sys.q)
        nxt, y = step(sys, PlantState(e, 0.25), np.zeros(sys.n_u), np.zeros(sys.n_w))
        np.testing.assert_array_equal(nxt.e, e)
        np.testing.assert_array_equal(y, np.concatenate([e, np.zeros(sys.n_y - sys.q)]))

    def test_triangle_flows(self):
        sys = assemble_descriptor(reduce(triangle()))
        _, y = step(sys, PlantState(np.zeros(0), 0.25), np.array([1.0]), np.array([1.0]))
        np.testing.assert_allclose(y[1:], [-1 / 3, 2 / 3, 1 / 3], atol=1e-12)
        assert y[0] == 0.0

    def test_dimension_mismatch(self, systems):
        sys = systems["case6"]
        with pytest.raises(DimensionError):
            step(sys, PlantState(np.zeros(sys.q), 0.25), np.zeros(sys.n_u + 1), np.zeros(sys.n_w))

    def test_no_clipping(self):
        sys = assemble_descriptor(reduce(two_bus(storage=True)), delta=1.0)
        log = simulate(sys, [5.0], [[20.0]] * 3, np.zeros((3, 0)), delta=1.0)
        assert log.meta["e_final"][0] == -55.0


class TestSimulate:
    def test_empty(self, systems):
        sys = systems["case6"]
        log = simulate(sys, np.zeros(sys.q), np.zeros((0, sys.n_u)), np.zeros((0, sys.n_w)))
        assert len(log) == 0 and log.y.shape == (0, sys.n_y)

    def test_constant_inputs(self, systems):
        sys = systems["case6"]
        rng = np.random.default_rng(1)
        u, w = rng.uniform(-5, 5, sys.n_u), rng.uniform(0, 10, sys.n_w)
        log = simulate(sys, np.full(sys.q, 50.0), np.tile(u, (3, 1)), np.tile(w, (3, 1)))
        np.testing.assert_array_equal(log.y[0, sys.q :], log.y[2, sys.q :])
        d = np.diff(log.y[:, : sys.q], axis=0)
        np.testing.assert_allclose(d[0], d[1], atol=1e-12)

    def test_replay(self, systems):
        sys = systems["case14"]
        rng = np.random.default_rng(2)
        u, w = rng.normal(size=(10, sys.n_u)), rng.normal(size=(10, sys.n_w))
        a = simulate(sys, np.full(sys.q, 3.0), u, w)
        b = simulate(sys, np.full(sys.q, 3.0), a.u, a.w)
        np.testing.assert_array_equal(a.y, b.y)

    def test_length_mismatch(self, systems):
        sys = systems["case6"]
        with pytest.raises(DimensionError):
            simulate(sys, np.zeros(sys.q), np.zeros((3, sys.n_u)), np.zeros((2, sys.n_w)))


class TestProperties:
    @given(st.sampled_from(SMALL_CASES), st.integers(0, 2**31 - 1))
    def test_power_balance_exact_on_dyadic(self, systems, name, seed):
        sys = systems[name]
        rng = np.random.default_rng(seed)
        T = 5
        u, w = random_dyadic(rng, (T, sys.n_u)), random_dyadic(rng, (T, sys.n_w))
        log = simulate(sys, np.zeros(sys.q), u, w)
        balance = log.y[:, sys.q] + u.sum(axis=1) - w.sum(axis=1)
        assert not np.any(balance)

    @given(st.sampled_from(SMALL_CASES), st.integers(0, 2**31 - 1))
    def test_storage_superposition(self, systems, name, seed):
        sys = systems[name]
        rng = np.random.default_rng(seed)
        T = 6
        e0 = rng.uniform(0, 100, sys.q)
        u, u2, w = rng.normal(size=(T, sys.n_u)), rng.normal(size=(T, sys.n_u)), rng.normal(size=(T, sys.n_w))
        a = simulate(sys, e0, u + u2, w).y[:, : sys.q]
        b = simulate(sys, e0, u, w).y[:, : sys.q]
        c = simulate(sys, np.zeros(sys.q), u2, np.zeros_like(w)).y[:, : sys.q]
        np.testing.assert_allclose(a - b, c, atol=1e-9)

    @given(st.sampled_from(SMALL_CASES + ("case118",)), st.integers(0, 2**31 - 1))
    def test_flows_match_ptdf(self, systems, models, name, seed):
        sys, m = systems[name], models[name]
        rng = np.random.default_rng(seed)
        u, w = rng.normal(size=sys.n_u) * 10, rng.normal(size=sys.n_w) * 10
        _, y = step(sys, PlantState(np.zeros(sys.q), 0.25), u, w)
        np.testing.assert_allclose(y[sys.q + 1 :], m.ptdf @ (m.Cg_red @ u - m.Cd_red @ w), atol=1e-9)


class TestPbh:
    @pytest.mark.parametrize("name", ["case6", "case14", "case118"])
    def test_opf_instances(self, systems, name):
        assert r_controllable(systems[name]) and r_observable(systems[name])

    def test_uncontrolled_state(self):
        sys = _toy(np.eye(2), np.array([[1.0], [0.0]]), np.eye(2))
        assert not r_controllable(sys)
        assert r_observable(sys)

    def test_unobserved_state(self):
        sys = _toy(np.eye(2), np.eye(2), np.array([[1.0, 0.0]]))
        assert r_controllable(sys) and not r_observable(sys)

    def test_no_storage(self):
        sys = assemble_descriptor(reduce(triangle()))
        assert sys.q == 0
        assert r_controllable(sys) and r_observable(sys)


class TestCsv:
    def test_roundtrip(self, tmp_path, systems):
        sys = systems["case6"]
        rng = np.random.default_rng(3)
        log = simulate(sys, np.full(sys.q, 10.0), rng.normal(size=(7, sys.n_u)), rng.normal(size=(7, sys.n_w)))
        path = tmp_path / "t.csv"
        save_trajectory_csv(log, path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[:2] == ["k", "u_1"] and header[-1] == f"y_{sys.n_y}"
        back = load_trajectory_csv(path)
        np.testing.assert_array_equal(back.u, log.u)
        np.testing.assert_array_equal(back.w, log.w)
        np.testing.assert_array_equal(back.y, log.y)

    def test_unequal_rows_rejected(self):
        with pytest.raises(DimensionError):
            TrajectoryLog(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)))
