from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from ocformer.core import ParticleState
from ocformer.errors import ConfigError, InvalidMeasureError
from ocformer.transport import (
    Coupling,
    DiscreteMeasure,
    cost_matrix,
    transport_plan,
    wasserstein2,
    wasserstein2_sq,
    wasserstein_bruteforce,
)

LAM = 32.0


def lp_value(cost, a, b):
    """Transport LP solved by scipy's HiGHS: an independent oracle."""
    n, m = cost.shape
    A_eq = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i] = 1
        A_eq.append(row.ravel())
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        A_eq.append(col.ravel())
    res = linprog(cost.ravel(), A_eq=np.array(A_eq), b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def random_measure(rng, n_atoms, denom, N=4):
    cuts = np.sort(rng.integers(0, denom + 1, n_atoms - 1))
    counts = np.diff(np.concatenate([[0], cuts, [denom]]))
    atoms = [ParticleState(Fraction(int(rng.integers(1, N + 1)), N), rng.uniform(-1, 1, 2)) for _ in range(n_atoms)]
    return DiscreteMeasure.from_atoms(atoms, [Fraction(int(c), denom) for c in counts])


def test_canonical_form_merges_sorts_and_drops_zeros():
    a = ParticleState(Fraction(1, 2), (0.0, 1.0))
    b = ParticleState(Fraction(1, 2), (0.0, -1.0))
    c = ParticleState(Fraction(1, 4), (0.0, 0.0))
    mu = DiscreteMeasure.from_atoms([a, b, a, b, c], [Fraction(1, 6), Fraction(1, 3), Fraction(1, 6), Fraction(1, 3), 0])
    assert mu.atoms == (b, a)
    assert mu.numerators == (2, 1) and mu.denominator == 3


@pytest.mark.parametrize("masses", [[0.5, 0.6], [Fraction(3, 2), Fraction(-1, 2)]])
def test_invalid_masses(masses):
    atoms = [ParticleState(1, (0.0, 0.0)), ParticleState(Fraction(1, 2), (0.0, 0.0))]
    with pytest.raises(InvalidMeasureError):
        DiscreteMeasure.from_atoms(atoms, masses)


def test_hand_computed_distance():
    # same positions, features shifted by (0.3, 0.4): cost 0.25 per atom
    x = [(0.0, 0.0), (0.5, 0.5)]
    y = [(0.3, 0.4), (0.8, 0.9)]
    v, plan = wasserstein2_sq(DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y), LAM)
    assert abs(v - 0.25) < 1e-15
    assert abs(wasserstein2(DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y), LAM) - 0.5) < 1e-15


def test_large_lambda_keeps_positions_matched():
    # without the positional term the swap would be free
    x = [(1.0, 1.0), (-1.0, -1.0)]
    y = [(-1.0, -1.0), (1.0, 1.0)]
    P, Q = DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y)
    v, plan = wasserstein2_sq(P, Q, LAM)
    assert v == pytest.approx(8.0)
    v0, _ = wasserstein2_sq(P, Q, 0.0)
    assert v0 == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(2, 6))
def test_uniform_matches_bruteforce(seed, N):
    rng = np.random.default_rng(seed)
    P = DiscreteMeasure.empirical(rng.uniform(-1, 1, (N, 2)))
    Q = DiscreteMeasure.empirical(rng.uniform(-1, 1, (N, 2)))
    for lam in (0.0, LAM):
        assert abs(wasserstein2_sq(P, Q, lam)[0] - wasserstein_bruteforce(P, Q, lam)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 7), m=st.integers(1, 7), denom=st.sampled_from([7, 12, 20, 60]))
def test_general_masses_match_linear_program(seed, n, m, denom):
    rng = np.random.default_rng(seed)
    P = random_measure(rng, n, denom)
    Q = random_measure(rng, m, denom)
    v, plan = wasserstein2_sq(P, Q, LAM)
    assert plan.is_feasible(P, Q)
    ref = lp_value(cost_matrix(P, Q, LAM), P.mass_array(), Q.mass_array())
    assert abs(v - ref) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    P, Q, R = (random_measure(rng, int(rng.integers(1, 6)), 12) for _ in range(3))
    assert wasserstein2_sq(P, P, LAM)[0] == 0.0
    assert abs(wasserstein2_sq(P, Q, LAM)[0] - wasserstein2_sq(Q, P, LAM)[0]) < 1e-9
    assert wasserstein2(P, R, LAM) <= wasserstein2(P, Q, LAM) + wasserstein2(Q, R, LAM) + 1e-9


def test_transport_plan_integral_and_balanced():
    cost = np.array([[1.0, 2.0, 3.0], [4.0, 1.0, 0.5]])
    flow = transport_plan(cost, [3, 2], [1, 2, 2])
    assert flow.dtype == np.int64
    assert flow.sum(axis=1).tolist() == [3, 2]
    assert flow.sum(axis=0).tolist() == [1, 2, 2]
    assert np.sum(flow * cost) == pytest.approx(lp_value(cost, np.array([3, 2]), np.array([1, 2, 2])))
    with pytest.raises(InvalidMeasureError):
        transport_plan(cost, [3, 3], [1, 2, 2])
    with pytest.raises(ConfigError):
        transport_plan(cost, [5], [1, 2, 2])


def test_coupling_feasibility_is_exact():
    P = DiscreteMeasure.empirical([(0.0, 0.0), (1.0, 0.0)])
    good = Coupling(np.array([[1, 0], [0, 1]]), 2)
    bad = Coupling(np.array([[2, 0], [0, 0]]), 2)
    assert good.is_feasible(P, P) and not bad.is_feasible(P, P)
    assert good.masses()[0][0] == Fraction(1, 2)


def test_bruteforce_limits():
    P = DiscreteMeasure.empirical(np.zeros((9, 2)) + np.arange(9)[:, None])
    with pytest.raises(ConfigError):
        wasserstein_bruteforce(P, P, LAM)
