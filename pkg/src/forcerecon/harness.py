"""Twin experiments: a known truth is observed and the reconstruction is scored against it."""
from __future__ import annotations

import configparser
import dataclasses
import io as _io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conditions as cond
from .errors import BlowUpError, ConfigError, ForceReconError, InfeasibleParametersError
from .forcing import EnslavingMap, PowerLawTail, QuasiFiniteForce, map_from_parser, map_sections, raise_rank
from .io import read_spf1, write_csv, write_manifest, write_spf1
from .sieve import TwinTruth, run_sieve, stationary_sieve
from .solvers import (
    NSEConfig,
    NudgingNSESystem,
    NudgingTDSystem,
    TDConfig,
    Tick,
    check_timestep,
    generate_truth,
)
from .spectral import (
    ScalarField,
    VectorField,
    WaveGrid,
    leray_coeffs,
    random_scalar,
    random_vector,
    seminorm,
    seminorm_coeffs,
    set_workers,
    unpack_low,
)

log = logging.getLogger(__name__)

EQUATIONS = ("td", "nse")
ALGORITHMS = ("sieve", "sieve_stationary", "nudging")
VELOCITIES = ("zero", "taylor_green", "shear", "abc")


def _default_map():
    return PowerLawTail(rank=2, order=(-1.0, -1.0), exponent=2.0, amplitude=1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    equation: str = "td"
    algorithm: str = "nudging"
    seed: int = 0
    threads: int = 1
    dim: int = 2
    K: int = 31
    kappa: float = 1.0
    nu: float = 1.0
    velocity: str = "taylor_green"
    velocity_amplitude: float = 0.5
    velocity_frequency: float = 0.0
    map: EnslavingMap = field(default_factory=_default_map)
    force_amplitude: float = 1.0
    force_slope: float = 0.0
    force_frequency: float = 0.0
    force_low_file: str = ""
    guess_equals_truth: bool = False
    state_amplitude: float | None = 1.0
    state_slope: float = 2.0
    state_modes: int = 8
    N: int | None = None
    mu: float | None = None
    mu1: float | None = None
    mu2: float | None = None
    margin: float = 0.9
    eps: float = 0.5
    gronwall_eps: float = 0.01
    lambda_ratio: float = 4.0
    C_star: float = 1.0
    C_abg: float = 1.0
    bernstein: float = 1.0
    c2: float = 1.0
    dt: float = 0.01
    T: float = 10.0
    t_star: float | None = None
    stages: int = 6
    T_win: float | None = None
    t_march: float = 1.0
    stationary_tol: float | None = None
    record_every: int = 10
    fit_start: float = 0.0
    fit_end: float | None = None
    out_dir: str = ""

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ConfigError(f"equation must be one of {EQUATIONS}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.equation == "nse" and self.algorithm == "sieve_stationary":
            raise ConfigError("the stationary sieve is defined for transport-diffusion only")
        if self.velocity not in VELOCITIES:
            raise ConfigError(f"velocity must be one of {VELOCITIES}")
        if self.dt <= 0 or self.T <= 0:
            raise ConfigError("dt and T must be positive")
        if self.stages < 1:
            raise ConfigError("need at least one stage")
        if self.equation == "nse" and self.dim != 2:
            raise ConfigError("Navier-Stokes runs are two-dimensional")

    @property
    def viscosity(self):
        return self.kappa if self.equation == "td" else self.nu

    def constants(self):
        return cond.ConstantsTable(C_star=self.C_star, C_abg=self.C_abg, bernstein=self.bernstein, c2=self.c2)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# ----------------------------------------------------------- config files

# section -> key -> type; keys coincide with ExperimentConfig field names
SCHEMA = {
    "experiment": {"equation": "str", "algorithm": "str", "seed": "int", "threads": "int"},
    "grid": {"dim": "int", "K": "int"},
    "physics": {"kappa": "float", "nu": "float"},
    "velocity": {"velocity": "str", "velocity_amplitude": "float", "velocity_frequency": "float"},
    "force": {"force_amplitude": "float", "force_slope": "float", "force_frequency": "float",
              "force_low_file": "str", "guess_equals_truth": "bool"},
    "initial": {"state_amplitude": "auto_float", "state_slope": "float", "state_modes": "int"},
    "observation": {"N": "auto_int"},
    "algorithm": {"mu": "auto_float", "mu1": "auto_float", "mu2": "auto_float", "margin": "float",
                  "eps": "float", "gronwall_eps": "float", "lambda_ratio": "float", "C_star": "float",
                  "C_abg": "float", "bernstein": "float", "c2": "float"},
    "time": {"dt": "float", "T": "float", "t_star": "auto_float", "stages": "int", "T_win": "auto_float",
             "t_march": "float", "stationary_tol": "auto_float", "record_every": "int"},
    "output": {"out_dir": "str", "fit_start": "float", "fit_end": "auto_float"},
}
MAP_SECTIONS = ("map", "base")
FIELD_TYPES = {k: t for sec in SCHEMA.values() for k, t in sec.items()}


def _convert(key, text, kind):
    text = text.strip()
    try:
        if kind.startswith("auto_"):
            if text.lower() in ("auto", "none", ""):
                return None
            kind = kind[5:]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {kind})") from None


def parse_config_text(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for sec in parser.sections():
        if sec in MAP_SECTIONS:
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            values[key] = _convert(key, raw, SCHEMA[sec][key])
    if "map" in parser:
        values["map"] = map_from_parser(parser)
    if values.get("force_low_file"):
        p = Path(values["force_low_file"])
        values["force_low_file"] = str(p if p.is_absolute() else Path(base_dir) / p)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)


def config_sections(cfg):
    """The resolved config as manifest sections (round-trips through parse_config_text)."""
    out = {}
    for sec, keys in SCHEMA.items():
        out[sec] = {}
        for k, kind in keys.items():
            v = getattr(cfg, k)
            out[sec][k] = "auto" if v is None else (str(v).lower() if kind == "bool" else v)
    out.update(map_sections(cfg.map))
    return out


def config_text(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, items in config_sections(cfg).items():
        parser[sec] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in items.items()}
    buf = _io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ------------------------------------------------------------ scenario parts


def build_velocity(cfg, grid):
    if cfg.equation != "td" or cfg.velocity == "zero":
        return None
    A = cfg.velocity_amplitude
    if cfg.velocity == "abc":
        if grid.dim != 3:
            raise ConfigError("the ABC flow needs dim = 3")
        base = VectorField.from_function(
            grid, lambda x, y, z: (np.sin(z) + np.cos(y), np.sin(x) + np.cos(z), np.sin(y) + np.cos(x)))
    else:
        if grid.dim != 2:
            raise ConfigError(f"velocity {cfg.velocity!r} needs dim = 2")
        if cfg.velocity == "taylor_green":
            base = VectorField.from_function(grid, lambda x, y: (np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)))
        else:
            base = VectorField.from_function(grid, lambda x, y: (np.sin(y), 0 * x))
    steady = VectorField._raw(grid, A * base.coeffs)
    if cfg.velocity_frequency == 0:
        return steady
    w = cfg.velocity_frequency
    return lambda t: VectorField._raw(grid, (1 + 0.5 * math.sin(w * t)) * steady.coeffs)


def _random_low(grid, rng, rank, slope, amplitude, vector):
    if vector:
        f = random_vector(grid, rng, N=rank, slope=slope)
    else:
        f = random_scalar(grid, rng, N=rank, slope=slope)
    n = seminorm(f, 0.0)
    return type(f)._raw(grid, f.coeffs * (amplitude / n if n > 0 else 0.0))


def build_force(cfg, grid, fmap, rng):
    """Truth force: seeded random low modes of the map's rank, normalised in L^2.

    The spectrum of the low modes falls off as |k|^-force_slope.  A nonzero
    force_frequency gives low(t) = a cos(w t) + b sin(w t).
    """
    vector = cfg.equation == "nse"
    if cfg.force_low_file:
        low = read_spf1(cfg.force_low_file, grid)
        if vector:
            low = VectorField._raw(grid, leray_coeffs(grid, low.coeffs))
        return QuasiFiniteForce(low, fmap)
    a = _random_low(grid, rng, fmap.rank, cfg.force_slope, cfg.force_amplitude, vector)
    if cfg.force_frequency == 0:
        return QuasiFiniteForce(a, fmap)
    b = _random_low(grid, rng, fmap.rank, cfg.force_slope, cfg.force_amplitude, vector)
    w = cfg.force_frequency
    cls = type(a)
    return QuasiFiniteForce(lambda t: cls._raw(grid, a.coeffs * math.cos(w * t) + b.coeffs * math.sin(w * t)), fmap)


def build_state0(cfg, grid, rng, R=None):
    """Truth initial state; NSE amplitude is the H^1 norm (auto: the radius R)."""
    modes = min(cfg.state_modes, grid.K)
    if cfg.equation == "nse":
        u = random_vector(grid, rng, N=modes, slope=cfg.state_slope)
        target = cfg.state_amplitude if cfg.state_amplitude is not None else (R or 1.0)
        n = seminorm(u, 1.0)
    else:
        u = random_scalar(grid, rng, N=modes, slope=cfg.state_slope)
        target = cfg.state_amplitude if cfg.state_amplitude is not None else 1.0
        n = seminorm(u, 0.0)
    return type(u)._raw(grid, u.coeffs * (target / n if n > 0 else 0.0))


def _declared(fmap, grid):
    return fmap if fmap.declared_lipschitz is not None else fmap.declare(grid)


def _family(fmap, N):
    return raise_rank(fmap, N) if N > fmap.rank else fmap


# ------------------------------------------------------------- parameters


@dataclass
class Resolved:
    N: int
    report: object
    mu: float | None = None
    mu1: float | None = None
    mu2: float | None = None
    t_star: float | None = None


def _with_min_N(fn, N, explicit_N):
    rep = fn(N)
    if rep.feasible or explicit_N or rep.min_feasible_N is None:
        return rep
    return fn(rep.min_feasible_N)


def resolve_parameters(cfg, grid, fmap, g, state0, functionals=None):
    """Fill every 'auto' parameter from the condition checker.

    Raises InfeasibleParametersError when auto values are requested but the
    conditions fail; fully explicit parameters are used as given.
    """
    consts = cfg.constants()
    explicit_N = cfg.N is not None
    N0 = cfg.N if explicit_N else fmap.rank
    lip = cond.family_lipschitz(fmap, grid)
    nu = cfg.viscosity
    if cfg.equation == "td":
        vf = functionals or cond.velocity_functionals(
            build_velocity(cfg, grid), T=cfg.T, grid=grid, eps_extra=(cfg.eps,), constants=consts)
        if cfg.algorithm == "nudging":
            rep = _with_min_N(lambda M: cond.nudging_td_params(
                vf, _declared(_family(fmap, M), grid), M, nu, cfg.eps, consts, cfg.lambda_ratio,
                lip, cfg.gronwall_eps), N0, explicit_N)
            res = Resolved(rep.N, rep, mu1=rep.mu1, mu2=rep.mu2)
        else:
            strong = tuple(fmap.order) == cond.STRONG_ORDER
            rep = _with_min_N(lambda M: cond.sieve_td_mu_interval(
                vf, _declared(_family(fmap, M), grid), M, nu, strong, cfg.margin, cfg.dt, consts, lip),
                N0, explicit_N)
            res = Resolved(rep.N, rep, mu=rep.mu, t_star=rep.t_star)
    else:
        gr = cond.grashof_report(g, nu, T=cfg.T, u0=state0, constants=consts)
        if cfg.algorithm == "nudging":
            # a-priori bound on sup ||u||: max(||u0||, R)
            U = max(seminorm(state0, 1.0), gr.R)

            def params(M):
                low = grid.low_mask(M)
                w0 = seminorm_coeffs(grid, state0.coeffs * ~low, 0.0)
                e0 = seminorm_coeffs(grid, g.at(0.0).coeffs * low, -1.0)
                return cond.nudging_nse_params(U, _declared(_family(fmap, M), grid), M, nu, consts,
                                               w0=w0, e0=e0, lambda_ratio=cfg.lambda_ratio, lipschitz_of=lip)

            rep = _with_min_N(params, N0, explicit_N)
            res = Resolved(rep.N, rep, mu1=rep.mu1, mu2=rep.mu2)
        else:
            R = gr.R if gr.R > 0 else 1.0

            def params(M):
                high = ~grid.low_mask(M)
                a = cond.SieveNSEAssumptions(
                    alpha=max(seminorm(state0, 1.0) / R, 1e-12),
                    beta=max(seminorm(state0, 2.0) / R, 1e-12),
                    gamma=max(seminorm_coeffs(grid, state0.coeffs * high, 1.0) / R, 1e-12),
                    sigma=max(gr.shape_factor, 1e-12),
                    M0=0.0 if cfg.guess_equals_truth else _sup_H1(g, cfg.T),
                    R=R, T1=gr.T1, T2=gr.T2,
                )
                return cond.sieve_nse_mu_interval(a, _declared(_family(fmap, M), grid), M, nu, consts,
                                                  dt=cfg.dt, lipschitz_of=lip)

            rep = _with_min_N(params, N0, explicit_N)
            res = Resolved(rep.N, rep, mu=rep.mu, t_star=rep.t_star)
    # explicit values win over checker output
    if cfg.mu is not None:
        res.mu = cfg.mu
    if cfg.mu1 is not None:
        res.mu1 = cfg.mu1
    if cfg.mu2 is not None:
        res.mu2 = cfg.mu2
    if cfg.t_star is not None:
        res.t_star = cfg.t_star
    needs_auto = any(v is None for v in _auto_fields(cfg))
    if needs_auto and not res.report.feasible:
        raise InfeasibleParametersError(
            f"auto parameters requested but conditions fail at N={res.report.N}"
            + (f" (minimal feasible N = {res.report.min_feasible_N})" if res.report.min_feasible_N else ""),
            res.report)
    band = int(2 * grid.K // 3)
    if res.N > band:
        msg = f"N={res.N} exceeds the dealiased band |k| <= {band} of K={grid.K}"
        rep = dataclasses.replace(res.report, feasible=False, notes=[*res.report.notes, msg])
        raise InfeasibleParametersError(msg, rep)
    return res


def _auto_fields(cfg):
    if cfg.algorithm == "nudging":
        return (cfg.N, cfg.mu1, cfg.mu2)
    return (cfg.N, cfg.mu, cfg.t_star)


def _sup_H1(g, T, samples=33):
    if g.time_dependent:
        return max(seminorm(g.at(t), 1.0) for t in np.linspace(0, T, samples))
    return seminorm(g.at(), 1.0)


# ------------------------------------------------------------------ series


@dataclass
class DecayFit:
    rate: float
    intercept: float
    residual: float
    n: int
    floored: bool = False

    @property
    def ratio(self):
        """Per-unit factor exp(rate) (the geometric ratio for per-stage series)."""
        return math.exp(self.rate)


@dataclass
class ErrorSeries:
    index: str
    columns: dict
    fits: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key == self.index:
            return self.columns[key]
        return self.columns[key]

    @property
    def x(self):
        return self.columns[self.index]

    def names(self):
        return list(self.columns)

    def rows(self):
        n = len(self.x)
        return [{k: float(v[i]) for k, v in self.columns.items()} for i in range(n)]

    def to_csv(self, path):
        write_csv(path, self.rows(), self.names())


def fit_decay_rate(series, column, window=None, min_samples=8, floor=None, index=None):
    """Least-squares line through log(values) against the index column.

    Values at or below the error floor (100 eps times the first value in the
    window, or ``floor`` if larger) end the fit; the result is flagged.  The
    residual is the RMS log deviation divided by the total log drop of the line.
    """
    if isinstance(series, ErrorSeries):
        x, y = np.asarray(series.x, float), np.asarray(series[column], float)
    else:
        x = np.asarray(series[index or "t"], float)
        y = np.asarray(series[column], float)
    if window is not None:
        lo, hi = window
        keep = (x >= (-np.inf if lo is None else lo)) & (x <= (np.inf if hi is None else hi))
        x, y = x[keep], y[keep]
    if len(y) == 0:
        raise ValueError("empty fit window")
    thresh = 100 * np.finfo(float).eps * abs(y[0])
    if floor is not None:
        thresh = max(thresh, floor)
    bad = np.flatnonzero(~(y > thresh))
    floored = bool(len(bad))
    if floored:
        x, y = x[: bad[0]], y[: bad[0]]
    if len(y) < min_samples:
        raise ValueError(f"need at least {min_samples} samples above the floor, have {len(y)}")
    ly = np.log(y)
    A = np.vstack([x, np.ones_like(x)]).T
    (rate, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    rms = float(np.sqrt(np.mean((ly - (rate * x + icpt)) ** 2)))
    drop = abs(rate) * (x[-1] - x[0])
    resid = rms / drop if drop > 0 else (0.0 if rms == 0 else math.inf)
    return DecayFit(float(rate), float(icpt), float(resid), len(y), floored)


# ------------------------------------------------------------------- runs


@dataclass
class TwinResult:
    config: ExperimentConfig
    series: ErrorSeries
    report: object
    N: int
    params: dict
    final_force: object
    truth_force: object
    detail: list = field(default_factory=list)
    run: object = None
    paths: dict = field(default_factory=dict)


def run_twin(config, out_dir=None):
    """Truth, observations, algorithm, errors; writes CSV/manifest/force snapshot if out_dir."""
    cfg = config
    set_workers(cfg.threads)
    grid = WaveGrid(cfg.dim, cfg.K)
    rng = np.random.default_rng(cfg.seed)
    fmap = _declared(cfg.map, grid)
    g = build_force(cfg, grid, fmap, rng)
    vector = cfg.equation == "nse"
    R = None
    if vector:
        R = cond.grashof_report(g, cfg.nu, T=cfg.T).R
    state0 = build_state0(cfg, grid, rng, R)
    res = resolve_parameters(cfg, grid, fmap, g, state0)
    N = res.N
    family = _family(fmap, N)
    if vector:
        phys = NSEConfig(cfg.nu, grid)
    else:
        phys = TDConfig(cfg.kappa, grid, build_velocity(cfg, grid))
        check_timestep(phys, cfg.dt, times=np.linspace(0, cfg.T, 9), allow=True)
    log.info("N=%d params=%s", N, res)
    if cfg.algorithm == "nudging":
        series, final, extra = _run_nudging(cfg, grid, phys, family, g, state0, N, res)
    elif cfg.algorithm == "sieve":
        series, final, extra = _run_sieve(cfg, grid, phys, fmap, g, state0, N, res)
    else:
        series, final, extra = _run_stationary(cfg, grid, phys, fmap, g, state0, N, res)
    params = {k: v for k, v in dataclasses.asdict(res).items() if k != "report" and v is not None}
    result = TwinResult(cfg, series, res.report, N, params, final, g, **extra)
    out = out_dir or cfg.out_dir
    if out:
        write_outputs(result, out)
    return result


def _run_nudging(cfg, grid, phys, family, g, state0, N, res):
    kind = "nse" if cfg.equation == "nse" else "td"
    mu1, mu2 = res.mu1, res.mu2
    traj, obs = generate_truth(kind, phys, g, state0, cfg.T, cfg.dt, N)
    System = NudgingNSESystem if kind == "nse" else NudgingTDSystem
    system = System(phys, family, obs, mu1, mu2, N)
    shape = ((grid.dim,) if kind == "nse" else ()) + grid.shape
    # state guess: observed low modes, zero elsewhere; force guess: zero (or the truth)
    low0 = obs.value(Tick(0, 0, 0.0))
    l0 = np.zeros(shape, dtype=complex)
    if cfg.guess_equals_truth:
        low0 = state0.coeffs.copy()
        l0 = _force_coeffs(g, 0.0, kind) * grid.low_mask(N)
    y = (low0, l0)
    n = int(round(cfg.T / cfg.dt))
    cols = {k: [] for k in ("t", "sync_err_L2", "sync_err_H1", "model_err_Hm1", "model_err_L2", "apriori_energy")}

    def record(k, y):
        t = k * cfg.dt
        z = y[0] - traj.state_at_step(k)
        f = y[1] + family.apply_coeffs(grid, y[1])
        h = f - _force_coeffs(g, t, kind)
        cols["t"].append(t)
        cols["sync_err_L2"].append(seminorm_coeffs(grid, z, 0.0))
        cols["sync_err_H1"].append(seminorm_coeffs(grid, z, 1.0))
        cols["model_err_Hm1"].append(seminorm_coeffs(grid, h, -1.0))
        cols["model_err_L2"].append(seminorm_coeffs(grid, h, 0.0))
        cols["apriori_energy"].append(mu2 * seminorm_coeffs(grid, y[0], 0.0) ** 2
                                      + seminorm_coeffs(grid, y[1], 0.0) ** 2)

    record(0, y)
    for k in range(n):
        y = system.advance(y, k, cfg.dt)
        if (k + 1) % cfg.record_every == 0 or k + 1 == n:
            record(k + 1, y)
    series = ErrorSeries("t", {k: np.array(v) for k, v in cols.items()})
    window = (cfg.fit_start, cfg.fit_end)
    for c in ("sync_err_L2", "model_err_Hm1"):
        try:
            series.fits[c] = fit_decay_rate(series, c, window)
        except ValueError as exc:
            log.warning("no fit for %s: %s", c, exc)
    cls = VectorField if kind == "nse" else ScalarField
    final = cls._raw(grid, y[1] + family.apply_coeffs(grid, y[1]))
    return series, final, {}


def _force_coeffs(g, t, kind):
    c = g.at(t).coeffs
    return leray_coeffs(g.at(t).grid, c) if kind == "nse" else c


def _run_sieve(cfg, grid, phys, fmap, g, state0, N, res):
    kind = cfg.equation
    dt = cfg.dt
    t_star = res.t_star
    if t_star is None or not math.isfinite(t_star):
        raise InfeasibleParametersError("no finite relaxation time", res.report)
    m = int(round(t_star / dt))
    t_star = m * dt
    W = 2 * m if cfg.T_win is None else int(round(cfg.T_win / dt))
    horizon = ((cfg.stages - 1) * m + W) * dt
    traj, obs = generate_truth(kind, phys, g, state0, horizon, dt, N)
    f0 = None
    s0 = None
    if cfg.guess_equals_truth:
        f0, s0 = g, state0
    run = run_sieve(kind, phys, fmap, obs, f0, s0, t_star, cfg.stages, res.mu, dt=dt,
                    T_win=W * dt, truth=TwinTruth(traj, g), N=N)
    cols = {
        "stage": np.arange(cfg.stages, dtype=float),
        "sup_model_err_Hm1": run.model_errors(),
        "sup_model_err_L2": np.array([s.sup_model_err_L2 for s in run.stages]),
        "sup_sync_err_L2": run.sync_errors(),
        "sup_state_err_H1": run.state_errors(),
    }
    series = ErrorSeries("stage", cols)
    main = "sup_model_err_L2" if kind == "nse" else "sup_model_err_Hm1"
    try:
        series.fits[main] = fit_decay_rate(series, main, min_samples=min(3, cfg.stages))
    except ValueError as exc:
        log.warning("no per-stage fit: %s", exc)
    last = run.stages[-1]
    family = _family(fmap, N)
    l = unpack_low(grid, last.force.nodes[-1], N)
    cls = VectorField if kind == "nse" else ScalarField
    final = cls._raw(grid, l + family.apply_coeffs(grid, l))
    return series, final, {"detail": list(run.csv_rows()), "run": run}


def _run_stationary(cfg, grid, phys, fmap, g, state0, N, res):
    if g.time_dependent or not phys.is_static:
        raise ConfigError("the stationary sieve needs time-independent force and velocity")
    traj, obs = generate_truth("td_stationary", phys, g, state0, 0.0, cfg.dt, N)
    f0 = g if cfg.guess_equals_truth else None
    run = stationary_sieve(phys, fmap, obs, f0, cfg.stages, res.mu, cfg.t_march, cfg.dt,
                           tol=cfg.stationary_tol, g_true=g, truth_state=traj.final, N=N)
    gn = seminorm(g.at(), -1.0) or 1.0
    errs = run.model_errors()
    cols = {
        "stage": np.arange(cfg.stages, dtype=float),
        "sup_model_err_Hm1": errs,
        "relative_model_err": errs / gn,
        "sup_model_err_L2": np.array([s.sup_model_err_L2 for s in run.stages]),
        "sup_sync_err_L2": run.sync_errors(),
        "sup_state_err_H1": run.state_errors(),
    }
    series = ErrorSeries("stage", cols)
    family = _family(fmap, N)
    l = unpack_low(grid, run.stages[-1].mean_force, N)
    final = ScalarField._raw(grid, l + family.apply_coeffs(grid, l))
    return series, final, {"detail": list(run.csv_rows()), "run": run}


STAGE_COLUMNS = ["stage", "t", "sync_err_L2", "sync_err_H1", "model_err_Hm1", "model_err_L2",
                 "sup_window_model_err"]


def write_outputs(result, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    if result.series.index == "t":
        paths["errors"] = out / "errors.csv"
        result.series.to_csv(paths["errors"])
    else:
        paths["stages"] = out / "stages.csv"
        write_csv(paths["stages"], result.detail, STAGE_COLUMNS)
        paths["summary"] = out / "stage_summary.csv"
        result.series.to_csv(paths["summary"])
    paths["force"] = out / "force_final.spf"
    write_spf1(paths["force"], result.final_force)
    sections = config_sections(result.config)
    sections["resolved"] = {"N": result.N, **result.params}
    sections["conditions"] = result.report.to_kv()
    sections["fits"] = {f"{c}_{a}": getattr(fit, a) for c, fit in result.series.fits.items()
                        for a in ("rate", "intercept", "residual", "n", "floored")}
    paths["manifest"] = out / "manifest.ini"
    write_manifest(paths["manifest"], sections)
    result.paths = {k: str(v) for k, v in paths.items()}
    return result.paths


def simulate(config, out_dir):
    """Truth run only: archive of states and observations."""
    from .io import write_archive

    cfg = config
    set_workers(cfg.threads)
    grid = WaveGrid(cfg.dim, cfg.K)
    rng = np.random.default_rng(cfg.seed)
    fmap = _declared(cfg.map, grid)
    g = build_force(cfg, grid, fmap, rng)
    R = cond.grashof_report(g, cfg.nu, T=cfg.T).R if cfg.equation == "nse" else None
    state0 = build_state0(cfg, grid, rng, R)
    N = cfg.N if cfg.N is not None else fmap.rank
    if cfg.equation == "nse":
        phys = NSEConfig(cfg.nu, grid)
        kind = "nse"
    else:
        phys = TDConfig(cfg.kappa, grid, build_velocity(cfg, grid))
        kind = "td_stationary" if cfg.algorithm == "sieve_stationary" else "td"
    traj, obs = generate_truth(kind, phys, g, state0, cfg.T, cfg.dt, N, keep_every=cfg.record_every)
    write_archive(out_dir, traj, obs, config_sections(cfg))
    return traj, obs


def check(config):
    """Condition report for a config, without integrating anything."""
    cfg = config
    grid = WaveGrid(cfg.dim, cfg.K)
    rng = np.random.default_rng(cfg.seed)
    fmap = _declared(cfg.map, grid)
    g = build_force(cfg, grid, fmap, rng)
    R = cond.grashof_report(g, cfg.nu, T=cfg.T).R if cfg.equation == "nse" else None
    state0 = build_state0(cfg, grid, rng, R)
    try:
        return resolve_parameters(cfg, grid, fmap, g, state0).report
    except InfeasibleParametersError as exc:
        if exc.report is None:
            raise
        return exc.report


# ------------------------------------------------------------------ sweeps


def _sweep_one(args):
    cfg, axis, value, out = args
    row = {axis: value, "status": "ok", "error": ""}
    try:
        res = run_twin(cfg, out)
    except (ForceReconError, ValueError, BlowUpError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    s = res.series
    model = "model_err_Hm1" if s.index == "t" else (
        "sup_model_err_L2" if cfg.equation == "nse" else "sup_model_err_Hm1")
    sync = "sync_err_L2" if s.index == "t" else "sup_sync_err_L2"
    first, last = float(s[model][0]), float(s[model][-1])
    row.update(
        N=res.N, feasible=bool(res.report.feasible),
        initial_model_err=first, final_model_err=last, final_sync_err=float(s[sync][-1]),
        model_ratio=last / first if first > 0 else math.nan,
    )
    fit = s.fits.get(model)
    row["model_rate"] = fit.rate if fit else math.nan
    row["converged"] = bool(first > 0 and last / first < 0.5)
    row["flagged"] = not row["converged"]
    return row


SWEEP_COLUMNS = ["status", "N", "feasible", "initial_model_err", "final_model_err", "final_sync_err",
                 "model_ratio", "model_rate", "converged", "flagged", "error"]


def sweep(base, axis, values, workers=None, out_dir=None):
    """One twin run per value of a numeric config field; failures become rows."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in FIELD_TYPES or FIELD_TYPES[axis] == "str":
        raise ConfigError(f"{axis!r} is not a numeric config field")
    conv = int if FIELD_TYPES[axis].endswith("int") else float
    jobs = []
    for v in values:
        v = conv(v)
        cfg = base.replace(**{axis: v})
        out = str(Path(out_dir) / f"{axis}={v}") if out_dir else None
        jobs.append((cfg, axis, v, out))
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        rows = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    if out_dir:
        write_csv(Path(out_dir) / "sweep.csv", rows, [axis] + SWEEP_COLUMNS)
    return rows
