"""Command-line surface: mode dispatch, config handling, file emission.

Subcommands: exact | de | bp | gfunc | threshold | sweep | check. Options
may come from a flat key=value config file (--config) with command-line
flags taking precedence. All randomness is seeded explicitly; reruns with
an identical resolved config produce byte-identical outputs, and the
TREECAST_THREADS environment variable only caps worker threads without
affecting results.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import density, exact, gaussian, threshold
from .errors import ConfigError, TreecastError
from .model import from_pi_theta, kesten_stigum, multistep_matrix, transition_matrix

MODES = ("exact", "de", "bp", "gfunc", "threshold", "sweep", "check")

_MODE_DEFAULT_N = {"exact": 3, "de": 60, "bp": 3, "sweep": 60}
_FLAG_KEYS = (
    "pi1",
    "theta",
    "d_theta_sq",
    "d",
    "n_max",
    "pool",
    "seed",
    "quad_order",
    "tol",
    "out",
)
_EXTRA_KEYS = {
    "grid_size": int,
    "eps_zero": float,
    "window": int,
    "sweep_pi1": str,
    "sweep_d_theta_sq": str,
    "max_atoms": int,
}


@dataclass
class RunConfig:
    """Resolved settings for one invocation."""

    mode: str
    pi1: float = 0.9
    theta: float | None = None
    d_theta_sq: float | None = None
    d: int = 2
    n_max: int | None = None
    pool: int = 100_000
    seed: int = 20240801
    quad_order: int = 80
    tol: float = 1e-6
    out: str = "out"
    grid_size: int = 200
    eps_zero: float = 1e-3
    window: int = 25
    sweep_pi1: str = "0.75,0.8,0.85,0.9,0.95"
    sweep_d_theta_sq: str = "0.7,0.8,0.9,1.0"
    max_atoms: int = exact.DEFAULT_MAX_ATOMS

    def resolved_theta(self) -> float:
        if self.theta is not None and self.d_theta_sq is not None:
            raise ConfigError("theta and d_theta_sq are mutually exclusive")
        if self.d_theta_sq is not None:
            if self.d_theta_sq < 0:
                raise ConfigError("d_theta_sq must be nonnegative")
            return math.sqrt(self.d_theta_sq / self.d)
        if self.theta is not None:
            return self.theta
        return 0.6

    def depth(self) -> int:
        if self.n_max is not None:
            return self.n_max
        return _MODE_DEFAULT_N.get(self.mode, 3)

    def canonical_lines(self) -> str:
        pairs = {
            "mode": self.mode,
            "pi1": self.pi1,
            "theta": self.theta,
            "d_theta_sq": self.d_theta_sq,
            "d": self.d,
            "n_max": self.depth(),
            "pool": self.pool,
            "seed": self.seed,
            "quad_order": self.quad_order,
            "tol": self.tol,
            "grid_size": self.grid_size,
            "eps_zero": self.eps_zero,
            "window": self.window,
            "sweep_pi1": self.sweep_pi1,
            "sweep_d_theta_sq": self.sweep_d_theta_sq,
            "max_atoms": self.max_atoms,
        }
        return "\n".join(f"{k}={pairs[k]!r}" for k in sorted(pairs))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_lines().encode()).hexdigest()


def _fmt(x) -> str:
    """Shortest round-trip representation; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys are rejected."""
    known = set(_FLAG_KEYS) | set(_EXTRA_KEYS)
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    kind = {
        "pi1": float,
        "theta": float,
        "d_theta_sq": float,
        "d": int,
        "n_max": int,
        "pool": int,
        "seed": int,
        "quad_order": int,
        "tol": float,
        "out": str,
    }.get(key) or _EXTRA_KEYS.get(key)
    try:
        return kind(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {key}: {value!r}") from err


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(mode=args.mode)
    if args.config:
        for key, value in parse_config_file(args.config).items():
            setattr(cfg, key, _coerce(key, value))
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if cfg.theta is not None and cfg.d_theta_sq is not None:
        raise ConfigError("theta and d_theta_sq are mutually exclusive")
    if not 0.5 <= cfg.pi1 < 1.0:
        raise ConfigError(f"pi1 must lie in [1/2, 1), got {cfg.pi1}")
    if cfg.pool <= 0 or cfg.d < 2 or (cfg.n_max is not None and cfg.n_max < 0):
        raise ConfigError("pool must be positive, d >= 2, n_max >= 0")
    return cfg


def _model(cfg: RunConfig):
    return from_pi_theta(cfg.pi1, cfg.resolved_theta(), cfg.d)


def _write_meta(out_dir: Path, name: str, cfg: RunConfig, payload: dict):
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    meta.update(payload)
    (out_dir / f"{name}.meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def cmd_exact(cfg: RunConfig, out_dir: Path) -> int:
    p = _model(cfg)
    n = cfg.depth()
    pairs = exact.iterate_levels(p, n, max_atoms=cfg.max_atoms)
    with open(out_dir / "exact_moments.csv", "w", newline="") as fh:
        fh.write("level,x,z,delta,e_x_minus\n")
        for plus, minus in pairs:
            mom = exact.moments(plus, minus, p)
            fh.write(
                f"{mom.level},{_fmt(mom.x_n)},{_fmt(mom.z_n)},"
                f"{_fmt(mom.delta_n)},{_fmt(mom.e_x_minus)}\n"
            )
    pairs[-1][0].to_csv(out_dir / "exact_atoms_plus.csv")
    pairs[-1][1].to_csv(out_dir / "exact_atoms_minus.csv")
    _write_meta(
        out_dir,
        "exact",
        cfg,
        {
            "model": {"d": p.d, "theta": p.theta, "pi1": p.pi1, "delta": p.delta},
            "n_max": n,
            "above_kesten_stigum": kesten_stigum(p).above_ks,
            "outputs": ["exact_moments.csv", "exact_atoms_plus.csv", "exact_atoms_minus.csv"],
        },
    )
    return 0


def cmd_de(cfg: RunConfig, out_dir: Path) -> int:
    p = _model(cfg)
    traj = density.run_trajectory(p, n_max=cfg.depth(), pool_size=cfg.pool, seed=cfg.seed)
    traj.to_csv(out_dir / "trajectory.csv")
    label = None
    if len(traj) >= 2 * cfg.window:
        label = density.classify(traj, eps_zero=cfg.eps_zero, window=cfg.window).value
    _write_meta(
        out_dir,
        "trajectory",
        cfg,
        {
            "model": {"d": p.d, "theta": p.theta, "pi1": p.pi1, "delta": p.delta},
            "pool_size": cfg.pool,
            "n_max": cfg.depth(),
            "classification": label,
            "eps_zero": cfg.eps_zero,
            "window": cfg.window,
            "above_kesten_stigum": kesten_stigum(p).above_ks,
            "outputs": ["trajectory.csv"],
        },
    )
    return 0


def cmd_bp(cfg: RunConfig, out_dir: Path) -> int:
    p = _model(cfg)
    est = density.broadcast_bp_estimate(
        p, n=cfg.depth(), num_trees=cfg.pool, stream=density.CounterStream(cfg.seed)
    )
    payload = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "level": est.level,
        "num_trees": est.num_trees,
        "x_n": est.x_n,
        "stderr": est.stderr,
        "model": {"d": p.d, "theta": p.theta, "pi1": p.pi1, "delta": p.delta},
    }
    (out_dir / "bp.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_gfunc(cfg: RunConfig, out_dir: Path) -> int:
    pi2 = 1.0 - cfg.pi1
    grid = np.linspace(pi2 / cfg.grid_size, pi2, cfg.grid_size)
    with open(out_dir / "gfunc.csv", "w", newline="") as fh:
        fh.write("s,g,g_minus_s\n")
        for s in grid:
            val = gaussian.g_quadrature(cfg.pi1, float(s), order=cfg.quad_order)
            fh.write(f"{_fmt(s)},{_fmt(val)},{_fmt(val - s)}\n")
    _write_meta(
        out_dir,
        "gfunc",
        cfg,
        {"pi1": cfg.pi1, "grid_size": cfg.grid_size, "quad_order": cfg.quad_order,
         "outputs": ["gfunc.csv"]},
    )
    return 0


def cmd_threshold(cfg: RunConfig, out_dir: Path) -> int:
    report = threshold.classify_regime(
        cfg.pi1, tol=cfg.tol, order=cfg.quad_order, grid_size=max(cfg.grid_size, 200)
    )
    payload = report.to_json_dict()
    payload["config_hash"] = cfg.config_hash()
    payload["seed"] = cfg.seed
    payload["d"] = cfg.d
    payload["theta_plus_approx"] = report.theta_plus_approx(cfg.d)
    payload["ks_theta"] = report.ks_theta(cfg.d)
    (out_dir / "threshold.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as err:
        raise ConfigError(f"bad {what} list: {text!r}") from err
    if not values:
        raise ConfigError(f"empty {what} list")
    return values


@dataclass(frozen=True)
class SweepRow:
    pi1: float
    d_theta_sq: float
    d: int
    regime: str
    omega_star: float | None
    x_tail: float
    x_tail_stderr: float
    classification: str


PHASE_DIAGRAM_HEADER = "pi1,d_theta_sq,d,regime,omega_star,x_tail,x_tail_stderr,classification"


def emit_phase_diagram(rows, path):
    """Write sweep rows as CSV with a stable column order.

    Missing thresholds are empty fields, never zeros; row order follows the
    input.
    """
    if not rows:
        raise ConfigError("sweep produced no rows")
    with open(path, "w", newline="") as fh:
        fh.write(PHASE_DIAGRAM_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{_fmt(r.pi1)},{_fmt(r.d_theta_sq)},{r.d},{r.regime},"
                f"{_fmt(r.omega_star)},{_fmt(r.x_tail)},{_fmt(r.x_tail_stderr)},"
                f"{r.classification}\n"
            )


def cmd_sweep(cfg: RunConfig, out_dir: Path) -> int:
    pi1_values = _parse_float_list(cfg.sweep_pi1, "sweep_pi1")
    dts_values = _parse_float_list(cfg.sweep_d_theta_sq, "sweep_d_theta_sq")
    reports = {
        pi1: threshold.classify_regime(
            pi1, tol=cfg.tol, order=cfg.quad_order, grid_size=max(cfg.grid_size, 200)
        )
        for pi1 in pi1_values
    }
    rows = []
    for pi1 in pi1_values:
        report = reports[pi1]
        for dts in dts_values:
            p = from_pi_theta(pi1, math.sqrt(dts / cfg.d), cfg.d)
            traj = density.run_trajectory(p, n_max=cfg.depth(), pool_size=cfg.pool, seed=cfg.seed)
            label = density.classify(traj, eps_zero=cfg.eps_zero, window=cfg.window)
            tail_x = traj.x[-cfg.window :]
            tail_se = traj.x_stderr[-cfg.window :]
            rows.append(
                SweepRow(
                    pi1=pi1,
                    d_theta_sq=dts,
                    d=cfg.d,
                    regime=report.regime.value,
                    omega_star=report.omega_star,
                    x_tail=float(tail_x.mean()),
                    x_tail_stderr=float(np.sqrt((tail_se**2).sum()) / cfg.window),
                    classification=label.value,
                )
            )
    emit_phase_diagram(rows, out_dir / "sweep.csv")
    _write_meta(
        out_dir,
        "sweep",
        cfg,
        {
            "d": cfg.d,
            "pool_size": cfg.pool,
            "n_max": cfg.depth(),
            "pi1_values": pi1_values,
            "d_theta_sq_values": dts_values,
            "outputs": ["sweep.csv"],
        },
    )
    return 0


def _check_model_suite():
    for pi1 in (0.5, 0.6, 0.75, 0.9):
        for theta in (-0.3, 0.0, 0.3, 0.7):
            try:
                p = from_pi_theta(pi1, theta, 3)
            except TreecastError:
                continue  # infeasible asymmetry/eigenvalue pair
            m = transition_matrix(p).as_array()
            pi = np.array([p.pi1, p.pi2])
            assert np.abs(pi @ m - pi).max() < 1e-12, "stationarity"
            assert abs((m[0, 0] + m[1, 1] - 1.0) - theta) < 1e-12, "second eigenvalue"
            step = np.eye(2)
            for s in range(6):
                ms = multistep_matrix(p, s).as_array()
                assert np.abs(ms - step).max() < 1e-12, "closed-form power"
                step = step @ m


def _check_exact_suite():
    p = from_pi_theta(0.6, 0.7, 2)
    pairs = exact.iterate_levels(p, 2)
    for plus, minus in pairs:
        mom = exact.moments(plus, minus, p)
        x_from_minus = (p.pi2 / p.pi1) * mom.e_x_minus
        assert abs(mom.x_n - x_from_minus) < 1e-10, "cross-law identity"
        mix2 = p.pi1 * plus.moment_about(p.pi1, 2) + p.pi2 * minus.moment_about(p.pi2, 2)
        assert abs(mom.x_n - mix2 / p.pi1) < 1e-10, "second-moment identity"
        assert -1e-12 <= mom.z_n <= mom.x_n + 1e-12, "moment ordering"
        guess = p.pi1**2 + p.pi2**2 + 2 * p.pi1 * mom.x_n
        assert guess <= mom.delta_n + 1e-10, "posterior-guess lower bound"
        assert mom.delta_n <= p.pi1 + math.sqrt(p.pi1 * mom.x_n) + 1e-10, "guess upper bound"
        ez1, ez2 = exact.z_moments(p, plus, minus)
        x = mom.x_n
        assert abs(ez1 - (1.0 + p.theta**2 * x / p.pi1) ** p.d) < 1e-10, "product identity Z1"
        assert abs(ez2 - (1.0 - p.theta**2 * x / p.pi2) ** p.d) < 1e-10, "product identity Z2"
    for n in (1, 2):
        plus, minus = pairs[n]
        mom = exact.moments(plus, minus, p)
        brute = exact.leaf_enumeration(p, n)
        assert abs(mom.x_n - brute.x_n) < 1e-10, "oracle equivalence x"
        assert abs(mom.z_n - brute.z_n) < 1e-10, "oracle equivalence z"
        assert abs(mom.delta_n - brute.delta_n) < 1e-10, "oracle equivalence delta"


def _check_de_suite():
    p = from_pi_theta(0.6, 0.7, 2)
    t1 = density.run_trajectory(p, n_max=3, pool_size=20_000, seed=7)
    t2 = density.run_trajectory(p, n_max=3, pool_size=20_000, seed=7)
    assert np.array_equal(t1.x, t2.x) and np.array_equal(t1.z, t2.z), "rerun determinism"
    brute = exact.leaf_enumeration(p, 3)
    t3 = density.run_trajectory(p, n_max=3, pool_size=200_000, seed=11)
    assert abs(t3.x[3] - brute.x_n) < 5 * max(t3.x_stderr[3], 1e-9), "pool vs exact"


def _check_gaussian_suite():
    assert gaussian.g_quadrature(0.9, 0.0) == 0.0, "g(0)"
    for pi1 in (0.5, 0.9):
        for s in (0.1, 0.5, 1.0):
            delta = abs(
                gaussian.g_quadrature(pi1, s, 80) - gaussian.g_quadrature(pi1, s, 160)
            )
            assert delta <= 1e-10, f"order doubling at ({pi1}, {s})"
        grid = np.linspace((1 - pi1) / 200, 1 - pi1, 200)
        vals = gaussian.g_grid(pi1, grid)
        assert np.all(np.diff(vals) > -1e-12), "monotone on grid"
    c = gaussian.series_coefficients(0.5)
    assert abs(c.c2 + 2.0) < 1e-12, "symmetric quadratic coefficient"
    mc = gaussian.g_montecarlo(0.9, 0.05, 100_000, seed=5)
    assert abs(mc.value - gaussian.g_quadrature(0.9, 0.05)) <= 4 * mc.stderr, "MC agreement"


def _check_threshold_suite():
    assert threshold.omega_star(0.5) is None, "symmetric has no subcritical fixed point"
    sol = threshold.omega_star(0.9, tol=1e-6)
    assert sol is not None and 0.0 < sol.omega < 1.0, "threshold exists"
    assert sol.certificate <= 10 * 1e-6, "fixed-point certificate"


def _check_io_suite():
    cfg = RunConfig(mode="de", pi1=0.6, theta=0.7, d=2, n_max=3, pool=20_000, seed=13)
    blobs = []
    saved = os.environ.get("TREECAST_THREADS")
    try:
        for threads in ("1", "3"):
            os.environ["TREECAST_THREADS"] = threads
            with tempfile.TemporaryDirectory() as tmp:
                out_dir = Path(tmp)
                cmd_de(cfg, out_dir)
                blobs.append(
                    (out_dir / "trajectory.csv").read_bytes()
                    + (out_dir / "trajectory.meta.json").read_bytes()
                )
    finally:
        if saved is None:
            os.environ.pop("TREECAST_THREADS", None)
        else:
            os.environ["TREECAST_THREADS"] = saved
    assert blobs[0] == blobs[1], "outputs must not depend on TREECAST_THREADS"


def cmd_check(cfg: RunConfig, out_dir: Path) -> int:
    suites = [
        ("model_closed_forms", _check_model_suite),
        ("exact_identities", _check_exact_suite),
        ("density_evolution", _check_de_suite),
        ("gaussian_limit", _check_gaussian_suite),
        ("threshold_solver", _check_threshold_suite),
        ("io_determinism", _check_io_suite),
    ]
    failures = 0
    for name, fn in suites:
        try:
            fn()
        except AssertionError as err:
            failures += 1
            print(f"FAIL {name}: {err}")
        else:
            print(f"PASS {name}")
    return 1 if failures else 0


_HANDLERS = {
    "exact": cmd_exact,
    "de": cmd_de,
    "bp": cmd_bp,
    "gfunc": cmd_gfunc,
    "threshold": cmd_threshold,
    "sweep": cmd_sweep,
    "check": cmd_check,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treecast",
        description="Broadcast processes on trees: exact laws, density evolution, thresholds.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode)
        group = sp.add_mutually_exclusive_group()
        group.add_argument("--theta", type=float, default=None)
        group.add_argument("--d-theta-sq", dest="d_theta_sq", type=float, default=None)
        sp.add_argument("--pi1", type=float, default=None)
        sp.add_argument("--d", type=int, default=None)
        sp.add_argument("--n-max", dest="n_max", type=int, default=None)
        sp.add_argument("--pool", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--quad-order", dest="quad_order", type=int, default=None)
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--config", type=str, default=None)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        out_dir = Path(cfg.out)
        if cfg.mode != "check":
            out_dir.mkdir(parents=True, exist_ok=True)
        return _HANDLERS[cfg.mode](cfg, out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except TreecastError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
