import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ddopf.case_io import load_builtin_case
from ddopf.netmodel import Branch, Bus, Demand, Generator, GridCase, Storage, reduce
from ddopf.plant import assemble_descriptor
from ddopf.qpsolve import QpProblem

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

SMALL_CASES = ("case3", "case6", "case14")


@pytest.fixture(scope="session")
def cases():
    return {name: load_builtin_case(name) for name in ("case3", "case6", "case14", "case118")}


@pytest.fixture(scope="session")
def models(cases):
    return {name: reduce(c) for name, c in cases.items()}


@pytest.fixture(scope="session")
def systems(models):
    return {name: assemble_descriptor(m) for name, m in models.items()}


def two_bus(x=0.5, tap=1.0, pd2=0.0, storage=False, gen2=False):
    gens = [Generator(1, 0.0, 100.0, 0.01, 10.0)]
    if gen2:
        gens.append(Generator(2, 0.0, 50.0, 0.02, 12.0))
    storages = [Storage(2, 0.0, 100.0, -20.0, 20.0, 50.0, 0.01, 1e-5)] if storage else []
    demands = [Demand(2, 0)] if pd2 > 0 else []
    return GridCase(
        buses=[Bus(1, 0.0), Bus(2, pd2)],
        branches=[Branch(1, 2, x, tap, 300.0)],
        generators=gens,
        storages=storages,
        demands=demands,
        slack_bus=1,
    )


def triangle(x=1.0, storage=False, rates=(300.0, 300.0, 300.0)):
    """Buses 1-2-3 with branches (1,2), (2,3), (1,3)."""
    return GridCase(
        buses=[Bus(1, 0.0), Bus(2, 0.0), Bus(3, 1.0)],
        branches=[Branch(1, 2, x, 1.0, rates[0]), Branch(2, 3, x, 1.0, rates[1]), Branch(1, 3, x, 1.0, rates[2])],
        generators=[Generator(1, 0.0, 100.0, 0.01, 10.0), Generator(2, 0.0, 100.0, 0.01, 10.0)],
        storages=[Storage(3, 0.0, 50.0, -10.0, 10.0, 25.0, 0.01, 1e-5)] if storage else [],
        demands=[Demand(3, 0)],
        slack_bus=1,
    )


def random_dyadic(rng, shape, scale=64):
    """Values that are exact multiples of 1/4, so sums are exact in binary."""
    return rng.integers(-4 * scale, 4 * scale, size=shape) / 4.0


def enumerate_oracle(p: QpProblem):
    """Optimum by trying every constraint pattern (inactive, at lo, at hi).

    Each pattern fixes its active rows as equalities; the KKT solution of the
    equality-constrained problem is kept if it is primal feasible.  For a
    strictly convex objective the best feasible candidate is the optimum.
    """
    best, best_x = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=p.m):
        rows = [i for i, s in enumerate(pattern) if s]
        if any(not np.isfinite(p.lo[i] if pattern[i] == 1 else p.hi[i]) for i in rows):
            continue
        b = np.array([p.lo[i] if pattern[i] == 1 else p.hi[i] for i in rows])
        Aa = p.A[rows]
        k = len(rows)
        K = np.block([[p.P, Aa.T], [Aa, np.zeros((k, k))]])
        rhs = np.concatenate([-p.c, b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        if not np.allclose(K @ sol, rhs, atol=1e-9):
            continue
        x = sol[: p.n]
        Ax = p.A @ x
        if np.all(Ax >= p.lo - 1e-9) and np.all(Ax <= p.hi + 1e-9):
            val = p.objective(x)
            if val < best:
                best, best_x = val, x
    return best_x, best
