"""Asymmetric binary channel on the d-ary tree.

Canonical parameterization is (pi1, theta, d); the asymmetry delta is
derived as delta = (1 - theta) * (pi2 - pi1) so that pi = (pi1, pi2) is
the stationary distribution of the induced transition matrix

    M = theta * I + (1 - theta) * [pi; pi]       (rows pi)

with second eigenvalue theta.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstraintViolation, DegenerateChannel

CONSISTENCY_TOL = 1e-12


@dataclass(frozen=True)
class Channel2x2:
    """A 2x2 row-stochastic matrix over the state set {1, 2}."""

    m11: float
    m12: float
    m21: float
    m22: float

    def __post_init__(self):
        for name in ("m11", "m12", "m21", "m22"):
            v = getattr(self, name)
            if not (-CONSISTENCY_TOL <= v <= 1.0 + CONSISTENCY_TOL):
                raise ConstraintViolation(f"channel entry {name}={v} outside [0, 1]")
        if abs(self.m11 + self.m12 - 1.0) > CONSISTENCY_TOL:
            raise ConstraintViolation("row 1 of channel does not sum to 1")
        if abs(self.m21 + self.m22 - 1.0) > CONSISTENCY_TOL:
            raise ConstraintViolation("row 2 of channel does not sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m21, self.m22]])

    def row(self, i: int) -> tuple[float, float]:
        """Row for parent state i in {1, 2}."""
        if i == 1:
            return (self.m11, self.m12)
        if i == 2:
            return (self.m21, self.m22)
        raise ValueError(f"state must be 1 or 2, got {i}")

    @property
    def second_eigenvalue(self) -> float:
        # trace = 1 + theta for a row-stochastic 2x2 matrix
        return self.m11 + self.m22 - 1.0


@dataclass(frozen=True)
class ModelParams:
    """Branching factor, channel eigenvalue, stationary law and asymmetry.

    Invariants: pi1 >= pi2 > 0, pi1 + pi2 = 1, |theta| + |delta| <= 1 and
    pi1 = 1/2 - delta / (2 (1 - theta)) (mutual consistency of the triple).
    """

    d: int
    theta: float
    pi1: float
    pi2: float
    delta: float

    def __post_init__(self):
        if not isinstance(self.d, int) or self.d < 2:
            raise ConstraintViolation(f"branching factor d={self.d} must be an integer >= 2")
        if not (self.pi1 >= self.pi2 > 0.0):
            raise ConstraintViolation(f"need pi1 >= pi2 > 0, got ({self.pi1}, {self.pi2})")
        if abs(self.pi1 + self.pi2 - 1.0) > CONSISTENCY_TOL:
            raise ConstraintViolation("pi1 + pi2 must equal 1")
        if abs(self.theta) > 1.0:
            raise ConstraintViolation(f"|theta| must be <= 1, got {self.theta}")
        if abs(self.theta) + abs(self.delta) > 1.0 + CONSISTENCY_TOL:
            raise ConstraintViolation(
                f"|theta| + |delta| = {abs(self.theta) + abs(self.delta)} exceeds 1"
            )
        if self.theta != 1.0:
            implied_pi1 = 0.5 - self.delta / (2.0 * (1.0 - self.theta))
            if abs(self.pi1 - implied_pi1) > CONSISTENCY_TOL:
                raise ConstraintViolation(
                    f"(pi1, theta, delta) inconsistent: pi1={self.pi1}, implied {implied_pi1}"
                )
        elif self.delta != 0.0:
            raise ConstraintViolation("theta = 1 forces delta = 0")

    @property
    def d_theta_sq(self) -> float:
        return self.d * self.theta * self.theta


def from_pi_theta(pi1: float, theta: float, d: int, allow_degenerate: bool = False) -> ModelParams:
    """Build consistent parameters from the stationary weight of state 1.

    Requires 1/2 <= pi1 < 1 and |theta| < 1 (|theta| = 1 only with
    ``allow_degenerate``, for noiseless closed-form tests). Raises
    ConstraintViolation when the derived asymmetry is infeasible, i.e.
    |theta| + |delta| > 1.
    """
    if not isinstance(d, int) or d < 2:
        raise ConstraintViolation(f"branching factor d={d} must be an integer >= 2")
    if not 0.5 <= pi1 < 1.0:
        raise ConstraintViolation(f"pi1 must lie in [1/2, 1), got {pi1}")
    if abs(theta) >= 1.0:
        if abs(theta) > 1.0 or not allow_degenerate:
            raise DegenerateChannel(
                f"|theta| = {abs(theta)} requires allow_degenerate=True (noiseless channel)"
            )
    pi2 = 1.0 - pi1
    delta = (1.0 - theta) * (pi2 - pi1)
    if abs(theta) + abs(delta) > 1.0 + CONSISTENCY_TOL:
        raise ConstraintViolation(
            f"infeasible pair: |theta| + |delta| = {abs(theta) + abs(delta)} > 1 "
            f"for pi1={pi1}, theta={theta}"
        )
    return ModelParams(d=d, theta=theta, pi1=pi1, pi2=pi2, delta=delta)


def transition_matrix(p: ModelParams) -> Channel2x2:
    """One-step channel M_ij = theta [i=j] + (1 - theta) pi_j."""
    t, q = p.theta, 1.0 - p.theta
    return Channel2x2(
        m11=t + q * p.pi1,
        m12=q * p.pi2,
        m21=q * p.pi1,
        m22=t + q * p.pi2,
    )


def multistep_matrix(p: ModelParams, s: int) -> Channel2x2:
    """s-step channel in closed form: diagonal entries pi_i + pi_j theta^s.

    s = 0 gives the identity, s = 1 the one-step matrix, and for
    |theta| < 1 the rows converge to pi as s grows.
    """
    if not isinstance(s, int) or s < 0:
        raise ValueError(f"step count must be a nonnegative integer, got {s}")
    ts = p.theta**s
    u = p.pi1 + p.pi2 * ts
    v = p.pi2 + p.pi1 * ts
    return Channel2x2(m11=u, m12=1.0 - u, m21=1.0 - v, m22=v)


@dataclass(frozen=True)
class KestenStigum:
    theta_ks: float
    d_theta_sq: float
    above_ks: bool


def kesten_stigum(p: ModelParams) -> KestenStigum:
    """Compare d theta^2 against the spectral reconstruction bound d theta^2 = 1."""
    dts = p.d_theta_sq
    return KestenStigum(theta_ks=p.d ** -0.5, d_theta_sq=dts, above_ks=dts > 1.0)
