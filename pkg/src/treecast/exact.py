"""Exact finite-support laws of the root posteriors on small trees.

Conditioned on the root state, the posterior of state 1 given the spins at
level n has a finite law. Level n+1 follows from level n by drawing d child
spins from the channel row of the conditioning state, attaching to each
child the corresponding posterior atom, and combining through the products

    Z1 = prod_j (1 + (theta/pi1) (Y_j - pi1)),
    Z2 = prod_j (1 - (theta/pi2) (Y_j - pi1)),

with the new posterior pi1 Z1 / (pi1 Z1 + pi2 Z2). Only the log-ratio
log Z1 - log Z2 enters the posterior, so the d-fold product enumeration is
carried out as a d-fold convolution of per-child log-ratio atoms.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import BudgetExceeded, LevelMismatch
from .model import ModelParams, transition_matrix

MERGE_TOL = 1e-12
PRUNE_EPS = 1e-300
PROB_SUM_TOL = 1e-12
DEFAULT_MAX_ATOMS = 4_000_000


@dataclass(frozen=True)
class AtomDistribution:
    """Finite law as sorted (value, probability) atoms, tagged with a level."""

    values: np.ndarray
    probs: np.ndarray
    level: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if values.ndim != 1 or values.shape != probs.shape or values.size == 0:
            raise ValueError("values and probs must be equal-length nonempty 1-d arrays")
        if np.any(probs <= 0.0):
            raise ValueError("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"atom probabilities sum to {probs.sum()}, not 1")
        if np.any(np.diff(values) <= 0.0):
            raise ValueError("atom values must be strictly increasing")
        if values[0] < -MERGE_TOL or values[-1] > 1.0 + MERGE_TOL:
            raise ValueError("posterior atoms must lie in [0, 1]")
        values.flags.writeable = False
        probs.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.values.size

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def mean(self) -> float:
        return float(self.probs @ self.values)

    def moment_about(self, center: float, power: int) -> float:
        return float(self.probs @ (self.values - center) ** power)

    def expect(self, fn) -> float:
        return float(self.probs @ fn(self.values))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("value,prob\n")
            for v, q in zip(self.values, self.probs):
                fh.write(f"{float(v)!r},{float(q)!r}\n")

    @classmethod
    def from_csv(cls, path, level: int) -> "AtomDistribution":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(values=rows[:, 0], probs=rows[:, 1], level=level)


def _merge_sorted(values, prob_columns, tol=MERGE_TOL):
    """Sort by value, merge atoms closer than tol, prune dead mass.

    prob_columns is a list of probability vectors sharing the value support;
    all columns are merged with the same grouping so paired weightings stay
    aligned. Returns (values, [columns]).
    """
    order = np.argsort(values, kind="stable")
    values = values[order]
    cols = [c[order] for c in prob_columns]
    if values.size > 1:
        boundaries = np.empty(values.size, dtype=bool)
        boundaries[0] = True
        np.greater(np.diff(values), tol, out=boundaries[1:])
        starts = np.flatnonzero(boundaries)
        total = sum(cols)
        mass = np.add.reduceat(total, starts)
        merged_vals = np.add.reduceat(total * values, starts) / mass
        cols = [np.add.reduceat(c, starts) for c in cols]
        values = merged_vals
    keep = np.zeros(values.size, dtype=bool)
    for c in cols:
        keep |= c >= PRUNE_EPS
    if not keep.all():
        pruned = max(float(c[~keep].sum()) for c in cols)
        if pruned > 1e-12:
            raise ValueError(f"pruned probability mass {pruned} too large")
        values = values[keep]
        cols = [c[keep] for c in cols]
    return values, cols


def level_zero() -> tuple[AtomDistribution, AtomDistribution]:
    """Level-0 laws: the root spin itself is observed, so both posteriors are 1."""
    point = AtomDistribution(values=np.array([1.0]), probs=np.array([1.0]), level=0)
    return point, point


def child_posterior_mixture(
    p: ModelParams, plus: AtomDistribution, minus: AtomDistribution, row: int = 1
) -> AtomDistribution:
    """Law of a child's state-1 posterior when its spin follows channel row ``row``.

    Spin 1 contributes the plus law, spin 2 contributes one minus the minus law.
    """
    if plus.level != minus.level:
        raise LevelMismatch(f"levels differ: {plus.level} vs {minus.level}")
    m1, m2 = transition_matrix(p).row(row)
    values = np.concatenate([plus.values, 1.0 - minus.values])
    probs = np.concatenate([m1 * plus.probs, m2 * minus.probs])
    pos = probs > 0.0
    values, (probs,) = _merge_sorted(values[pos], [probs[pos]])
    return AtomDistribution(values=values, probs=probs, level=plus.level)


def _child_log_ratio_support(p, plus, minus):
    """Per-child log-ratio atoms with probabilities under both channel rows.

    Returns (delta, w_row1, w_row2) where delta = log f1 - log f2 for the two
    posterior factors f1 = 1 + (theta/pi1)(y - pi1), f2 = 1 - (theta/pi2)(y - pi1)
    evaluated on the merged support of the child posterior y.
    """
    m = transition_matrix(p)
    y = np.concatenate([plus.values, 1.0 - minus.values])
    w1 = np.concatenate([m.m11 * plus.probs, m.m12 * minus.probs])
    w2 = np.concatenate([m.m21 * plus.probs, m.m22 * minus.probs])
    t = y - p.pi1
    f1 = np.maximum(1.0 + (p.theta / p.pi1) * t, PRUNE_EPS)
    f2 = np.maximum(1.0 - (p.theta / p.pi2) * t, PRUNE_EPS)
    delta = np.log(f1) - np.log(f2)
    return _merge_sorted(delta, [w1, w2])


def _convolve_support(delta, cols, d, max_atoms):
    """d-fold convolution of (delta, probability columns), merging equal sums."""
    acc_vals = delta.copy()
    acc_cols = [c.copy() for c in cols]
    for _ in range(d - 1):
        size = acc_vals.size * delta.size
        if size > max_atoms:
            raise BudgetExceeded(
                f"enumeration size {size} exceeds max_atoms={max_atoms}; "
                "use density evolution for this regime"
            )
        sums = (acc_vals[:, None] + delta[None, :]).ravel()
        prods = [(a[:, None] * b[None, :]).ravel() for a, b in zip(acc_cols, cols)]
        acc_vals, acc_cols = _merge_sorted(sums, prods)
    return acc_vals, acc_cols


def recursion_step(
    p: ModelParams,
    plus: AtomDistribution,
    minus: AtomDistribution,
    max_atoms: int = DEFAULT_MAX_ATOMS,
) -> tuple[AtomDistribution, AtomDistribution]:
    """One level of the exact distributional recursion.

    The plus output conditions the root on state 1 (child spins from channel
    row 1, atom value pi1 Z1 / (pi1 Z1 + pi2 Z2)); the minus output conditions
    on state 2 (row 2, value pi2 Z2 / (pi1 Z1 + pi2 Z2)). Atoms equal within
    1e-12 are merged.
    """
    if plus.level != minus.level:
        raise LevelMismatch(f"levels differ: {plus.level} vs {minus.level}")
    delta, (w1, w2) = _child_log_ratio_support(p, plus, minus)
    sums, (q1, q2) = _convolve_support(delta, [w1, w2], p.d, max_atoms)
    log_prior = np.log(p.pi1 / p.pi2)
    vals_plus = expit(log_prior + sums)
    level = plus.level + 1

    vp, (qp,) = _merge_sorted(vals_plus, [q1])
    vm, (qm,) = _merge_sorted(1.0 - vals_plus, [q2])
    new_plus = AtomDistribution(values=vp, probs=qp / qp.sum(), level=level)
    new_minus = AtomDistribution(values=vm, probs=qm / qm.sum(), level=level)
    return new_plus, new_minus


@dataclass(frozen=True)
class ExactMoments:
    """Reconstruction diagnostics of a (plus, minus) pair of laws at one level."""

    x_n: float
    z_n: float
    delta_n: float
    e_x_minus: float
    level: int

    _SLACK = 1e-9

    def __post_init__(self):
        if self.z_n < -self._SLACK or self.z_n > self.x_n + self._SLACK:
            raise ValueError(f"need 0 <= z_n <= x_n, got z={self.z_n}, x={self.x_n}")


def moments(plus: AtomDistribution, minus: AtomDistribution, p: ModelParams) -> ExactMoments:
    """First/second moments of the plus law and the optimal-guess success rate.

    x_n is the mean excess of the plus posterior over pi1, z_n its second
    moment about pi1, delta_n the success probability of guessing the root
    by the larger posterior, and e_x_minus the mean excess of the minus law.
    """
    if plus.level != minus.level:
        raise LevelMismatch(f"levels differ: {plus.level} vs {minus.level}")
    x_n = plus.mean() - p.pi1
    z_n = plus.moment_about(p.pi1, 2)
    e_x_minus = minus.mean() - p.pi2
    # unconditional posterior is the root-state mixture of plus and reflected minus
    delta_n = p.pi1 * plus.expect(lambda v: np.maximum(v, 1.0 - v)) + p.pi2 * minus.expect(
        lambda v: np.maximum(v, 1.0 - v)
    )
    return ExactMoments(x_n=x_n, z_n=z_n, delta_n=delta_n, e_x_minus=e_x_minus, level=plus.level)


def z_moments(
    p: ModelParams,
    plus: AtomDistribution,
    minus: AtomDistribution,
    row: int = 1,
    max_atoms: int = DEFAULT_MAX_ATOMS,
) -> tuple[float, float]:
    """(E Z1, E Z2) by explicit enumeration of the d-fold products.

    Independent of the closed forms (1 +- theta^2 x_n / pi)^d that the
    i.i.d. structure implies; used to validate them.
    """
    m = transition_matrix(p)
    mr1, mr2 = m.row(row)
    y = np.concatenate([plus.values, 1.0 - minus.values])
    w = np.concatenate([mr1 * plus.probs, mr2 * minus.probs])
    t = y - p.pi1
    out = []
    for factor in (1.0 + (p.theta / p.pi1) * t, 1.0 - (p.theta / p.pi2) * t):
        logs = np.log(np.maximum(factor, PRUNE_EPS))
        vals, (probs,) = _merge_sorted(logs, [w])
        sums, (q,) = _convolve_support(vals, [probs], p.d, max_atoms)
        out.append(float(q @ np.exp(sums)))
    return out[0], out[1]


def leaf_enumeration(p: ModelParams, n: int, max_configs: int = 2**20) -> ExactMoments:
    """Moments at level n by brute force over all 2^(d^n) leaf configurations.

    Likelihoods are computed bottom-up by direct marginalization over the
    internal spins (no product-form shortcut), then combined by Bayes rule;
    this is the independent cross-check for the atom recursion.
    """
    if n < 0:
        raise ValueError("level must be nonnegative")
    num_leaves = p.d**n
    if num_leaves > 63 or 2**num_leaves > max_configs:
        raise BudgetExceeded(
            f"2^{num_leaves} leaf configurations exceed the budget of {max_configs}"
        )
    n_cfg = 2**num_leaves
    cfg_ids = np.arange(n_cfg, dtype=np.uint64)
    # spins[c, j] = 0 for state 1, 1 for state 2, leaf j in configuration c
    spins = ((cfg_ids[:, None] >> np.arange(num_leaves, dtype=np.uint64)[None, :]) & 1).astype(
        np.float64
    )
    like = np.stack([1.0 - spins, spins], axis=-1)  # (configs, leaves, 2)
    mat = transition_matrix(p).as_array()
    for _ in range(n):
        like = like @ mat.T  # entry i: sum_j M_ij * child_likelihood_j
        width = like.shape[1]
        like = like.reshape(n_cfg, width // p.d, p.d, 2).prod(axis=2)
    p_given_1 = like[:, 0, 0]
    p_given_2 = like[:, 0, 1]
    total = p.pi1 * p_given_1 + p.pi2 * p_given_2
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(total > 0.0, p.pi1 * p_given_1 / total, 0.0)
    x_n = float(p_given_1 @ f1) - p.pi1
    z_n = float(p_given_1 @ (f1 - p.pi1) ** 2)
    e_x_minus = float(p_given_2 @ (1.0 - f1)) - p.pi2
    delta_n = float(total @ np.maximum(f1, 1.0 - f1))
    return ExactMoments(x_n=x_n, z_n=z_n, delta_n=delta_n, e_x_minus=e_x_minus, level=n)


def iterate_levels(
    p: ModelParams, n_max: int, max_atoms: int = DEFAULT_MAX_ATOMS
) -> list[tuple[AtomDistribution, AtomDistribution]]:
    """Laws for levels 0..n_max as a list of (plus, minus) pairs."""
    pair = level_zero()
    out = [pair]
    for _ in range(n_max):
        pair = recursion_step(p, pair[0], pair[1], max_atoms=max_atoms)
        out.append(pair)
    return out
