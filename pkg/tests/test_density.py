"""Population dynamics: edge cases, determinism, oracle agreement, classification."""

import numpy as np
import pytest

from treecast import (
    BudgetExceeded,
    Classification,
    CounterStream,
    EmptyPool,
    SamplePool,
    Trajectory,
    broadcast_bp_estimate,
    classify,
    de_step,
    from_pi_theta,
    leaf_enumeration,
    level_zero_pool,
    run_trajectory,
    transition_matrix,
)

P_REF = from_pi_theta(0.6, 0.7, 2)


def test_theta_zero_pools_are_constant():
    p = from_pi_theta(0.6, 0.0, 2)
    out = de_step(p, level_zero_pool(2000, seed=1), 2000, CounterStream(1))
    assert out.level == 1
    assert np.allclose(out.plus, 0.6, atol=1e-12)
    assert np.allclose(out.minus, 0.4, atol=1e-12)


def test_noiseless_pools_copy_the_root():
    p = from_pi_theta(0.6, 1.0, 2, allow_degenerate=True)
    out = de_step(p, level_zero_pool(2000, seed=1), 2000, CounterStream(1))
    assert np.all(out.plus == 1.0)
    assert np.all(out.minus == 1.0)


def test_empty_pool_rejected():
    with pytest.raises(EmptyPool):
        SamplePool(plus=np.array([]), minus=np.array([]), level=0, seed=0)


def test_rerun_is_bit_identical():
    a = run_trajectory(P_REF, 4, 30_000, seed=5)
    b = run_trajectory(P_REF, 4, 30_000, seed=5)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.z, b.z)
    assert np.array_equal(a.z_over_x[1:], b.z_over_x[1:])


def test_worker_count_does_not_change_results(monkeypatch):
    base = run_trajectory(P_REF, 4, 40_000, seed=6)
    monkeypatch.setenv("TREECAST_THREADS", "3")
    threaded = run_trajectory(P_REF, 4, 40_000, seed=6)
    assert np.array_equal(base.x, threaded.x)
    assert np.array_equal(base.z, threaded.z)


def test_seed_changes_results():
    a = run_trajectory(P_REF, 2, 30_000, seed=5)
    b = run_trajectory(P_REF, 2, 30_000, seed=6)
    assert not np.array_equal(a.x[1:], b.x[1:])


def test_level_zero_stats_are_exact():
    traj = run_trajectory(P_REF, 0, 10_000, seed=1)
    assert traj.x[0] == pytest.approx(P_REF.pi2, abs=1e-15)
    assert traj.x_stderr[0] < 1e-15
    assert traj.z[0] == pytest.approx(P_REF.pi2**2, abs=1e-15)


def test_pool_matches_exact_oracle():
    brute = leaf_enumeration(P_REF, 3)
    traj = run_trajectory(P_REF, 3, 1_000_000, seed=7)
    assert abs(traj.x[3] - brute.x_n) <= 4 * traj.x_stderr[3]
    assert abs(traj.z[3] - brute.z_n) <= 4 * traj.z_stderr[3]


def test_pool_identities_within_noise():
    p = P_REF
    stream = CounterStream(11)
    pool = level_zero_pool(200_000, seed=11)
    m = transition_matrix(p)
    for _ in range(3):
        pool = de_step(p, pool, len(pool), stream)
        x = pool.plus.mean() - p.pi1
        se = pool.plus.std(ddof=1) / np.sqrt(len(pool))
        # cross-law first-moment identity (enforced by the consistency step)
        minus_excess = pool.minus.mean() - p.pi2
        assert x == pytest.approx((p.pi2 / p.pi1) * minus_excess, abs=6 * se)
        # second moment never exceeds the first-moment excess
        z = ((pool.plus - p.pi1) ** 2).mean()
        z_se = ((pool.plus - p.pi1) ** 2).std(ddof=1) / np.sqrt(len(pool))
        assert z <= x + 3 * (se + z_se)
        # row-1 mixture has mean excess theta * x
        y_mean = m.m11 * pool.plus.mean() + m.m12 * (1 - pool.minus).mean()
        assert y_mean - p.pi1 == pytest.approx(p.theta * x, abs=6 * se)


def test_trajectory_stays_in_range():
    traj = run_trajectory(P_REF, 6, 100_000, seed=3)
    assert np.all(traj.x >= -3 * traj.x_stderr - 1e-12)
    assert np.all(traj.x <= P_REF.pi2 + 3 * traj.x_stderr + 1e-12)


def test_symmetric_below_bound_decays():
    # d theta^2 = 0.98: the mean excess must vanish by level 200
    p = from_pi_theta(0.5, 0.7, 2)
    traj = run_trajectory(p, 200, 100_000, seed=21)
    assert abs(traj.x[200]) < 1e-3
    assert classify(traj) is Classification.NON_RECONSTRUCTION


def test_symmetric_above_bound_plateaus():
    # d theta^2 = 1.125: the excess must stay bounded away from zero
    p = from_pi_theta(0.5, 0.75, 2)
    traj = run_trajectory(p, 200, 100_000, seed=22)
    assert np.all(traj.x[50:] > 0.01)
    assert classify(traj) is Classification.RECONSTRUCTION


def test_concentration_diagnostic_on_decaying_run():
    # z/x approaches pi1 as x gets small
    p = from_pi_theta(0.5, 0.7, 2)
    traj = run_trajectory(p, 120, 100_000, seed=23)
    small = np.flatnonzero((traj.x > 1e-3) & (traj.x <= 1e-2))
    assert small.size > 0
    gaps = np.abs(traj.z_over_x[small] - p.pi1)
    assert gaps[-1] <= 0.1
    assert gaps[-1] <= gaps[0] + 0.02


def _mk_traj(x, se=None):
    n = len(x)
    x = np.asarray(x, dtype=float)
    se = np.full(n, 1e-4) if se is None else np.asarray(se, dtype=float)
    return Trajectory(
        level=np.arange(n),
        x=x,
        x_stderr=se,
        z=x**2,
        z_stderr=se,
        z_over_x=np.where(x != 0, x, np.nan),
        pool_size=np.full(n, 1000),
        wall_time=np.zeros(n),
        seed=0,
        params=P_REF,
    )


def test_classify_zero_trajectory():
    assert classify(_mk_traj(np.zeros(60))) is Classification.NON_RECONSTRUCTION


def test_classify_plateau():
    rng = np.random.default_rng(0)
    x = np.concatenate([np.linspace(0.4, 0.05, 30), 0.05 + 0.001 * rng.standard_normal(30)])
    assert classify(_mk_traj(x, np.full(60, 0.001))) is Classification.RECONSTRUCTION


def test_classify_ambiguous_tail():
    x = 0.4 * 0.97 ** np.arange(60)  # still at 0.07 by the end, steadily falling
    assert classify(_mk_traj(x)) is Classification.UNDECIDED


def test_classify_requires_length():
    with pytest.raises(ValueError):
        classify(_mk_traj(np.zeros(20)), window=25)


def test_trajectory_csv_format(tmp_path):
    traj = run_trajectory(P_REF, 2, 10_000, seed=9)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "level,x,x_stderr,z,z_stderr,z_over_x,pool_size"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "0" and first[-1] == "10000"
    assert float(first[1]) == traj.x[0]


def test_bp_level_zero_exact():
    est = broadcast_bp_estimate(P_REF, 0, 1000, CounterStream(1))
    assert est.x_n == pytest.approx(P_REF.pi2, abs=1e-15)
    assert est.stderr == 0.0


def test_bp_theta_zero_near_zero():
    p = from_pi_theta(0.6, 0.0, 2)
    est = broadcast_bp_estimate(p, 2, 50_000, CounterStream(2))
    assert abs(est.x_n) <= max(3 * est.stderr, 1e-12)


def test_bp_matches_exact_oracle():
    brute = leaf_enumeration(P_REF, 3)
    est = broadcast_bp_estimate(P_REF, 3, 300_000, CounterStream(3))
    assert abs(est.x_n - brute.x_n) <= 4 * est.stderr


def test_bp_budget():
    p = from_pi_theta(0.6, 0.3, 10)
    with pytest.raises(BudgetExceeded):
        broadcast_bp_estimate(p, 8, 10, CounterStream(1))


def test_negative_theta_trajectory_decays():
    # mirrored eigenvalue: same d theta^2, trajectory need not match +theta
    p = from_pi_theta(0.5, -0.7, 2)
    traj = run_trajectory(p, 60, 20_000, seed=31)
    assert np.all(np.isfinite(traj.x))
    assert traj.x[60] < 0.05
    pos = run_trajectory(from_pi_theta(0.5, 0.7, 2), 60, 20_000, seed=31)
    assert not np.array_equal(traj.x[1:], pos.x[1:])


def test_de_step_rejects_nonpositive_out_size():
    with pytest.raises(ValueError):
        de_step(P_REF, level_zero_pool(100, seed=1), 0, CounterStream(1))
