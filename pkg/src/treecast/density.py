"""Monte Carlo realization of the distributional recursion (population dynamics).

Pools of samples stand in for the laws of the two conditioned root
posteriors. One step resamples, for each new entry, d child posteriors from
the previous pools (child spins from the appropriate channel row), forms the
two products in log space and emits the Bayes combination. A second,
independent estimator simulates whole broadcast trees and evaluates the
posterior on the sampled leaves.

Randomness is counter-based: every (seed, level, side, chunk) tuple keys its
own Philox stream over a fixed chunk grid, so results are bit-identical for
a given seed regardless of how many worker threads execute the chunks
(TREECAST_THREADS caps the workers).
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from scipy.special import expit

from .errors import BudgetExceeded, EmptyPool, NonFinite
from .model import ModelParams, transition_matrix

CHUNK = 16384  # fixed: the chunk grid is part of the reproducibility contract
_LOG_FLOOR = 1e-300

_PURPOSE_DE = 1
_PURPOSE_BP = 2


def _worker_count(n_chunks: int) -> int:
    raw = os.environ.get("TREECAST_THREADS", "1")
    try:
        limit = int(raw)
    except ValueError:
        limit = 1
    return max(1, min(limit, n_chunks))


@dataclass(frozen=True)
class CounterStream:
    """Derives independent Philox generators keyed by (purpose, level, side, chunk)."""

    seed: int

    def generator(self, purpose: int, level: int, side: int, chunk: int) -> np.random.Generator:
        if not (0 <= level < 2**24 and 0 <= side < 2**4 and 0 <= chunk < 2**20):
            raise ValueError("stream coordinates out of range")
        lane = np.uint64((purpose << 48) | (level << 24) | (side << 20) | chunk)
        key = np.array([np.uint64(self.seed & (2**64 - 1)), lane], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SamplePool:
    """Samples of the two conditioned posteriors at one level."""

    plus: np.ndarray
    minus: np.ndarray
    level: int
    seed: int

    def __post_init__(self):
        plus = np.asarray(self.plus, dtype=np.float64)
        minus = np.asarray(self.minus, dtype=np.float64)
        if plus.size == 0 or plus.shape != minus.shape or plus.ndim != 1:
            raise EmptyPool("pools must be nonempty 1-d arrays of equal length")
        plus.flags.writeable = False
        minus.flags.writeable = False
        object.__setattr__(self, "plus", plus)
        object.__setattr__(self, "minus", minus)

    def __len__(self):
        return self.plus.size


def level_zero_pool(pool_size: int, seed: int) -> SamplePool:
    """Level 0: the root spin is observed, both posteriors are identically 1."""
    ones = np.ones(pool_size)
    return SamplePool(plus=ones, minus=ones.copy(), level=0, seed=seed)


def _log_ratio_table(p: ModelParams, y: np.ndarray) -> np.ndarray:
    t = y - p.pi1
    f1 = np.maximum(1.0 + (p.theta / p.pi1) * t, _LOG_FLOOR)
    f2 = np.maximum(1.0 - (p.theta / p.pi2) * t, _LOG_FLOOR)
    return np.log(f1) - np.log(f2)


@numba.njit(cache=True, nogil=True)
def _mixture_sum_kernel(u, table, n_plus, prob_plus, out):
    """Sum of d child log-ratios per output sample, children drawn i.i.d.

    Each child consumes a single uniform: the branch below prob_plus picks a
    plus-pool entry, the rest a minus-pool entry, with the residual
    uniformity recycled as the table index.
    """
    m, d = u.shape
    n_total = table.size
    n_minus = n_total - n_plus
    c_plus = n_plus / prob_plus if prob_plus > 0.0 else 0.0
    c_minus = n_minus / (1.0 - prob_plus) if prob_plus < 1.0 else 0.0
    for i in range(m):
        acc = 0.0
        for j in range(d):
            x = u[i, j]
            if x < prob_plus:
                k = int(x * c_plus)
                if k >= n_plus:
                    k = n_plus - 1
            else:
                k = n_plus + int((x - prob_plus) * c_minus)
                if k >= n_total:
                    k = n_total - 1
            acc += table[k]
        out[i] = acc


def _resample_log_ratio_sums(table, n_plus, prob_plus, d, out, gen):
    u = gen.random((out.size, d))
    _mixture_sum_kernel(u, table, n_plus, prob_plus, out)


def _consistency_shift(t_plus: np.ndarray, t_comp: np.ndarray, pi1: float) -> float:
    """Uniform log-odds shift restoring the exact first-moment identity.

    The unconditional posterior has mean pi1 exactly; its empirical mixture
    (pi1-weighted plus samples, pi2-weighted reflected minus samples) drifts
    by O(pool^-1/2) per step, and the recursion amplifies a uniform log-odds
    drift by roughly d*theta per level. Projecting it out each step keeps
    the pools on the physical manifold. t_plus and t_comp are the
    log-odds of the new plus samples and of one-minus-the-new-minus samples.
    """
    pi2 = 1.0 - pi1

    def balance(eps):
        mean_u = pi1 * float(expit(t_plus + eps).mean()) + pi2 * float(
            expit(t_comp + eps).mean()
        )
        return mean_u - pi1

    h0 = balance(0.0)
    if abs(h0) < 1e-13:
        return 0.0
    lo, hi = -50.0, 50.0
    eps, h = 0.0, h0
    for _ in range(80):
        if h > 0.0:
            hi = eps
        else:
            lo = eps
        d1 = pi1 * float((expit(t_plus + eps) * expit(-(t_plus + eps))).mean()) + pi2 * float(
            (expit(t_comp + eps) * expit(-(t_comp + eps))).mean()
        )
        step = eps - h / d1 if d1 > 1e-300 else 0.5 * (lo + hi)
        eps = step if lo < step < hi else 0.5 * (lo + hi)
        h = balance(eps)
        if abs(h) < 1e-14 or hi - lo < 1e-14:
            break
    return eps


def de_step(p: ModelParams, pool: SamplePool, out_size: int, stream: CounterStream) -> SamplePool:
    """One density-evolution step; returns pools one level deeper.

    Plus samples condition the root on state 1 (child spins from channel
    row 1), minus samples on state 2 (row 2). A single log-odds shift is
    applied to all new samples afterwards (see _consistency_shift) so the
    pools stay on the manifold the exact laws live on.
    """
    if len(pool) == 0:
        raise EmptyPool("input pool is empty")
    if out_size <= 0:
        raise ValueError("out_size must be positive")
    n_plus = pool.plus.size
    table = np.concatenate(
        [_log_ratio_table(p, pool.plus), _log_ratio_table(p, 1.0 - pool.minus)]
    )
    m = transition_matrix(p)
    log_prior = math.log(p.pi1 / p.pi2)
    level = pool.level + 1
    n_chunks = (out_size + CHUNK - 1) // CHUNK
    sums = [np.empty(out_size) for _ in range(2)]

    def work(args):
        side, chunk = args
        lo = chunk * CHUNK
        hi = min(lo + CHUNK, out_size)
        gen = stream.generator(_PURPOSE_DE, level, side, chunk)
        prob_plus = m.m11 if side == 0 else m.m21
        _resample_log_ratio_sums(table, n_plus, prob_plus, p.d, sums[side][lo:hi], gen)

    tasks = [(side, chunk) for side in (0, 1) for chunk in range(n_chunks)]
    workers = _worker_count(len(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            list(pool_exec.map(work, tasks))
    else:
        for task in tasks:
            work(task)

    if not (np.isfinite(sums[0]).all() and np.isfinite(sums[1]).all()):
        raise NonFinite("log-space product escaped the clamped range (theta near +-1?)")
    t_plus = log_prior + sums[0]
    t_comp = log_prior + sums[1]  # log-odds of 1 - X^- samples
    eps = _consistency_shift(t_plus, t_comp, p.pi1)
    new_plus = expit(t_plus + eps)
    new_minus = expit(-t_comp - eps)
    return SamplePool(plus=new_plus, minus=new_minus, level=level, seed=pool.seed)


@dataclass
class Trajectory:
    """Per-level diagnostics of a density-evolution run."""

    level: np.ndarray
    x: np.ndarray
    x_stderr: np.ndarray
    z: np.ndarray
    z_stderr: np.ndarray
    z_over_x: np.ndarray
    pool_size: np.ndarray
    wall_time: np.ndarray
    seed: int
    params: ModelParams

    CSV_HEADER = "level,x,x_stderr,z,z_stderr,z_over_x,pool_size"

    def __len__(self):
        return self.level.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for i in range(len(self)):
                fh.write(
                    f"{int(self.level[i])},{float(self.x[i])!r},{float(self.x_stderr[i])!r},"
                    f"{float(self.z[i])!r},{float(self.z_stderr[i])!r},"
                    f"{float(self.z_over_x[i])!r},{int(self.pool_size[i])}\n"
                )


def _pool_stats(pool: SamplePool, p: ModelParams):
    dev = pool.plus - p.pi1
    n = dev.size
    x = float(dev.mean())
    x_se = float(dev.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    sq = dev * dev
    z = float(sq.mean())
    z_se = float(sq.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    zx = z / x if x != 0.0 else math.nan
    return x, x_se, z, z_se, zx


def run_trajectory(p: ModelParams, n_max: int, pool_size: int, seed: int) -> Trajectory:
    """Iterate density evolution from the observed-root pools for n_max levels.

    Deterministic for fixed (seed, pool_size, n_max) independent of the
    worker count.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    stream = CounterStream(seed)
    pool = level_zero_pool(pool_size, seed)
    rows = []
    t0 = time.perf_counter()
    rows.append((0, *_pool_stats(pool, p), pool_size, time.perf_counter() - t0))
    for _ in range(n_max):
        t0 = time.perf_counter()
        pool = de_step(p, pool, pool_size, stream)
        rows.append((pool.level, *_pool_stats(pool, p), pool_size, time.perf_counter() - t0))
    cols = list(zip(*rows))
    return Trajectory(
        level=np.array(cols[0], dtype=np.int64),
        x=np.array(cols[1]),
        x_stderr=np.array(cols[2]),
        z=np.array(cols[3]),
        z_stderr=np.array(cols[4]),
        z_over_x=np.array(cols[5]),
        pool_size=np.array(cols[6], dtype=np.int64),
        wall_time=np.array(cols[7]),
        seed=seed,
        params=p,
    )


class Classification(str, Enum):
    NON_RECONSTRUCTION = "NonReconstruction"
    RECONSTRUCTION = "Reconstruction"
    UNDECIDED = "Undecided"


def classify(traj: Trajectory, eps_zero: float = 1e-3, window: int = 25) -> Classification:
    """Decide the tail behavior of a trajectory.

    NonReconstruction: the final window sits below eps_zero and is monotone
    nonincreasing within noise. Reconstruction: the final window's mean
    clears eps_zero by five standard errors and is level. Anything
    ambiguous is Undecided.
    """
    if len(traj) < 2 * window:
        raise ValueError(f"trajectory length {len(traj)} < 2 * window = {2 * window}")
    x = traj.x[-window:]
    se = traj.x_stderr[-window:]
    monotone = bool(np.all(x[1:] <= x[:-1] + 3.0 * (se[1:] + se[:-1])))
    if np.all(x < eps_zero) and monotone:
        return Classification.NON_RECONSTRUCTION
    mean = float(x.mean())
    half = window // 2
    drift = abs(float(x[half:].mean()) - float(x[:half].mean()))
    se_comb = math.sqrt(float((se[:half] ** 2).sum()) + float((se[half:] ** 2).sum())) / half
    level = drift <= max(5.0 * se_comb, 0.1 * abs(mean))
    if mean > eps_zero + 5.0 * float(se.mean()) and level:
        return Classification.RECONSTRUCTION
    return Classification.UNDECIDED


@dataclass(frozen=True)
class BPEstimate:
    x_n: float
    stderr: float
    level: int
    num_trees: int


def broadcast_bp_estimate(
    p: ModelParams, n: int, num_trees: int, stream: CounterStream
) -> BPEstimate:
    """Estimate the mean excess posterior by simulating whole trees.

    Each tree broadcasts the root state 1 down n levels, then the posterior
    of the root is evaluated on the realized leaf spins by the upward
    recursion. Independent of the pool-based sampler.
    """
    if n < 0:
        raise ValueError("level must be nonnegative")
    if num_trees <= 0:
        raise ValueError("num_trees must be positive")
    if p.d**n > 10**7:
        raise BudgetExceeded(f"tree with {p.d**n} leaves exceeds the per-tree budget")
    if n == 0:
        return BPEstimate(x_n=p.pi2, stderr=0.0, level=0, num_trees=num_trees)

    m = transition_matrix(p)
    log_prior = math.log(p.pi1 / p.pi2)
    leaves = p.d**n
    trees_per_chunk = max(1, 2**18 // leaves)
    n_chunks = (num_trees + trees_per_chunk - 1) // trees_per_chunk
    total = 0.0
    total_sq = 0.0
    for chunk in range(n_chunks):
        t = min(trees_per_chunk, num_trees - chunk * trees_per_chunk)
        gen = stream.generator(_PURPOSE_BP, n, 0, chunk)
        # forward: spin arrays per level, 0 encodes state 1
        spins = np.zeros((t, 1))
        for _ in range(n):
            thr = np.where(spins == 0.0, m.m11, m.m21)
            u = gen.random((t, spins.shape[1] * p.d))
            spins = (u >= np.repeat(thr, p.d, axis=1)).astype(np.float64)
        # upward: leaf posterior of state 1 is the indicator of spin 1
        y = 1.0 - spins
        for _ in range(n):
            s = _log_ratio_table(p, y).reshape(t, -1, p.d).sum(axis=2)
            y = expit(log_prior + s)
        vals = y[:, 0]
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
    mean = total / num_trees
    var = max(total_sq / num_trees - mean * mean, 0.0)
    stderr = math.sqrt(var / num_trees) if num_trees > 1 else 0.0
    return BPEstimate(x_n=mean - p.pi1, stderr=stderr, level=n, num_trees=num_trees)
