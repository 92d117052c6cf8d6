"""Exact atom recursion against independent brute-force oracles."""

import itertools
import math

import numpy as np
import pytest

from treecast import (
    AtomDistribution,
    BudgetExceeded,
    LevelMismatch,
    child_posterior_mixture,
    from_pi_theta,
    iterate_levels,
    leaf_enumeration,
    level_zero,
    moments,
    recursion_step,
    transition_matrix,
    z_moments,
)

P_REF = from_pi_theta(0.6, 0.7, 2)

# frozen from leaf_enumeration(P_REF, 3): the 256-configuration Bayes sum
LEAF_D2_N3 = {
    "x_n": 0.16082064490388193,
    "z_n": 0.07446016544449692,
    "delta_n": 0.7908718846757441,
    "e_x_minus": 0.2412309673558225,
}


def brute_force_level_one(p):
    """Level-1 law of the plus posterior by direct Bayes over child spins.

    Enumerates the d^2... no product identities: for each spin tuple A,
    P(A | root) is a plain product of channel entries and the posterior is
    pi1 P(A|1) / (pi1 P(A|1) + pi2 P(A|2)).
    """
    m = transition_matrix(p).as_array()
    law = {}
    for spins in itertools.product((0, 1), repeat=p.d):
        p1 = math.prod(m[0, s] for s in spins)
        p2 = math.prod(m[1, s] for s in spins)
        f = p.pi1 * p1 / (p.pi1 * p1 + p.pi2 * p2)
        key = round(f, 12)
        w1, w2, _ = law.get(key, (0.0, 0.0, f))
        law[key] = (w1 + p1, w2 + p2, f)
    values = sorted(law)
    plus = [(law[v][2], law[v][0]) for v in values]
    minus = [(1.0 - law[v][2], law[v][1]) for v in values]
    return plus, sorted(minus)


def test_level_zero_is_point_mass_at_one():
    plus, minus = level_zero()
    assert plus.atoms == [(1.0, 1.0)]
    assert minus.atoms == [(1.0, 1.0)]
    assert plus.level == 0


def test_level_zero_moments():
    plus, minus = level_zero()
    mom = moments(plus, minus, P_REF)
    assert mom.x_n == pytest.approx(P_REF.pi2, abs=1e-15)
    assert mom.z_n == pytest.approx(P_REF.pi2**2, abs=1e-15)
    assert mom.delta_n == pytest.approx(1.0, abs=1e-15)


def test_theta_zero_collapses_to_priors():
    p = from_pi_theta(0.6, 0.0, 2)
    plus, minus = recursion_step(p, *level_zero())
    assert plus.atoms == [(pytest.approx(0.6, abs=1e-12), 1.0)]
    assert minus.atoms == [(pytest.approx(0.4, abs=1e-12), 1.0)]
    mom = moments(plus, minus, p)
    assert mom.x_n == pytest.approx(0.0, abs=1e-12)
    assert mom.z_n == pytest.approx(0.0, abs=1e-12)
    assert mom.delta_n == pytest.approx(p.pi1, abs=1e-12)


def test_near_noiseless_copies_the_root():
    p = from_pi_theta(0.6, 1.0 - 1e-9, 2)
    plus, minus = recursion_step(p, *level_zero())
    mom = moments(plus, minus, p)
    assert plus.mean() == pytest.approx(1.0, abs=1e-6)
    assert mom.x_n == pytest.approx(p.pi2, abs=1e-6)


def test_level_one_against_direct_bayes():
    plus, minus = recursion_step(P_REF, *level_zero())
    exp_plus, exp_minus = brute_force_level_one(P_REF)
    assert len(plus) == 3
    for (v, q), (ev, eq) in zip(plus.atoms, exp_plus):
        assert v == pytest.approx(ev, abs=1e-12)
        assert q == pytest.approx(eq, abs=1e-12)
    for (v, q), (ev, eq) in zip(minus.atoms, exp_minus):
        assert v == pytest.approx(ev, abs=1e-12)
        assert q == pytest.approx(eq, abs=1e-12)
    assert moments(plus, minus, P_REF).x_n == pytest.approx(0.2631613739148362, abs=1e-12)


def test_leaf_enumeration_regression_fixture():
    mom = leaf_enumeration(P_REF, 3)
    for key, want in LEAF_D2_N3.items():
        assert getattr(mom, key) == pytest.approx(want, abs=1e-12), key


@pytest.mark.parametrize("pi1,theta", [(0.6, 0.7), (0.9, 0.5), (0.75, -0.3), (0.5, 0.7)])
@pytest.mark.parametrize("d", [2, 3])
def test_recursion_matches_leaf_enumeration(pi1, theta, d):
    p = from_pi_theta(pi1, theta, d)
    n_top = 3 if d == 2 else 2
    pairs = iterate_levels(p, n_top)
    for n in range(n_top + 1):
        got = moments(*pairs[n], p)
        want = leaf_enumeration(p, n)
        assert got.x_n == pytest.approx(want.x_n, abs=1e-10)
        assert got.z_n == pytest.approx(want.z_n, abs=1e-10)
        assert got.delta_n == pytest.approx(want.delta_n, abs=1e-10)
        assert got.e_x_minus == pytest.approx(want.e_x_minus, abs=1e-10)


def test_identity_suite_on_reference_fixture():
    pairs = iterate_levels(P_REF, 3)
    p = P_REF
    for plus, minus in pairs:
        mom = moments(plus, minus, p)
        # the mean excess equals the pi-weighted second moment of the mixture
        mix2 = p.pi1 * plus.moment_about(p.pi1, 2) + p.pi2 * minus.moment_about(p.pi2, 2)
        assert mom.x_n == pytest.approx(mix2 / p.pi1, abs=1e-10)
        split = plus.moment_about(p.pi1, 2) + (p.pi2 / p.pi1) * minus.moment_about(p.pi2, 2)
        assert mom.x_n == pytest.approx(split, abs=1e-10)
        assert mom.x_n == pytest.approx((p.pi2 / p.pi1) * mom.e_x_minus, abs=1e-10)
        assert 0.0 <= mom.z_n <= mom.x_n + 1e-12
        # guessing by the posterior succeeds w.p. pi1^2 + pi2^2 + 2 pi1 x_n,
        # a lower bound on the optimal rule; Cauchy-Schwarz gives the upper cap
        guess = p.pi1**2 + p.pi2**2 + 2 * p.pi1 * mom.x_n
        assert guess <= mom.delta_n + 1e-10
        assert p.pi1 <= mom.delta_n + 1e-12
        assert mom.delta_n <= p.pi1 + math.sqrt(p.pi1 * mom.x_n) + 1e-10


def test_child_mixture_moments():
    pairs = iterate_levels(P_REF, 2)
    p = P_REF
    for plus, minus in pairs:
        mom = moments(plus, minus, p)
        y = child_posterior_mixture(p, plus, minus, row=1)
        assert y.moment_about(p.pi1, 1) == pytest.approx(p.theta * mom.x_n, abs=1e-12)
        want = p.pi1 * mom.x_n + p.theta * (mom.z_n - p.pi1 * mom.x_n)
        assert y.moment_about(p.pi1, 2) == pytest.approx(want, abs=1e-12)


def test_product_identities():
    pairs = iterate_levels(P_REF, 2)
    p = P_REF
    for plus, minus in pairs:
        x = moments(plus, minus, p).x_n
        ez1, ez2 = z_moments(p, plus, minus)
        assert ez1 == pytest.approx((1 + p.theta**2 * x / p.pi1) ** p.d, abs=1e-10)
        assert ez2 == pytest.approx((1 - p.theta**2 * x / p.pi2) ** p.d, abs=1e-10)


def test_expansion_residual_shrinks_with_x():
    p = P_REF
    pairs = iterate_levels(p, 3)
    xs = [moments(*pair, p).x_n for pair in pairs]
    assert all(b < a for a, b in zip(xs, xs[1:]))  # shrinking sequence
    coef = (1 - 6 * p.pi1 * p.pi2) / (p.pi1 * p.pi2**2) * (p.d * (p.d - 1) / 2) * p.theta**4
    residuals = [
        abs(xs[n + 1] - p.d_theta_sq * xs[n] - coef * xs[n] ** 2) for n in range(len(xs) - 1)
    ]
    assert all(b < a for a, b in zip(residuals, residuals[1:]))


def test_budget_guards():
    with pytest.raises(BudgetExceeded):
        leaf_enumeration(P_REF, 5)
    pairs = iterate_levels(P_REF, 2)
    with pytest.raises(BudgetExceeded):
        recursion_step(P_REF, *pairs[2], max_atoms=10)


def test_level_mismatch_rejected():
    plus, _ = level_zero()
    shifted = AtomDistribution(values=np.array([1.0]), probs=np.array([1.0]), level=1)
    with pytest.raises(LevelMismatch):
        moments(plus, shifted, P_REF)
    with pytest.raises(LevelMismatch):
        recursion_step(P_REF, plus, shifted)


def test_atom_distribution_validation():
    with pytest.raises(ValueError):
        AtomDistribution(values=np.array([0.2, 0.1]), probs=np.array([0.5, 0.5]), level=0)
    with pytest.raises(ValueError):
        AtomDistribution(values=np.array([0.2, 0.4]), probs=np.array([0.5, 0.4]), level=0)
    with pytest.raises(ValueError):
        AtomDistribution(values=np.array([1.5]), probs=np.array([1.0]), level=0)


def test_atoms_csv_roundtrip(tmp_path):
    plus, _ = recursion_step(P_REF, *level_zero())
    path = tmp_path / "atoms.csv"
    plus.to_csv(path)
    back = AtomDistribution.from_csv(path, level=plus.level)
    assert np.array_equal(back.values, plus.values)
    assert np.array_equal(back.probs, plus.probs)
