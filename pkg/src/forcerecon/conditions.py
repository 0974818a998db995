"""Tuning and feasibility quantities for both algorithms.

Everything here is a pure function of its inputs.  Absolute constants that are
only known to exist live in :class:`ConstantsTable`; their defaults are
placeholders, and every report says so.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InfeasibleParametersError
from .forcing import QuasiFiniteForce, raise_rank
from .spectral import ScalarField, VectorField, gradient, seminorm_coeffs

WEAK_ORDER = (-1.0, -1.0)
STRONG_ORDER = (0.0, 0.0)
N_SEARCH_LIMIT = 100000


@dataclass(frozen=True)
class ConstantsTable:
    """Inequality constants; all default to 1 and are not rigorous values."""

    sobolev: tuple = ()  # ((p, s, value), ...); missing entries are 1
    bernstein: float = 1.0
    c_L: float = 1.0
    c_L_prime: float = 1.0
    c_A: float = 1.0
    c_BG: float = 1.0
    C_abg: float = 1.0
    C_star: float = 1.0
    c2: float = 1.0
    nonrigorous: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not v > 0:
                raise ValueError(f"constant {f.name} must be positive, got {v}")
        for p, s, v in self.sobolev:
            if not v > 0:
                raise ValueError(f"Sobolev constant c_({p},{s}) must be positive")
        for p, s, v in self.sobolev:
            if p == 2 and s == 0 and v != 1:
                raise ValueError("c_(2,0) is exactly 1")

    def sobolev_constant(self, p, s):
        for pp, ss, v in self.sobolev:
            if math.isclose(pp, p) and math.isclose(ss, s):
                return v
        return 1.0

    def velocity_constant(self, eps, d):
        """c_{p_eps, eps} with the convention c_{inf, d/2} = Bernstein C."""
        if math.isclose(eps, d / 2):
            return self.bernstein
        return self.sobolev_constant(2 * d / (d - 2 * eps), eps)


# ------------------------------------------------------------ velocity data


def lp_norm(values, p, volume):
    """L^p norm of a pointwise magnitude sampled on a uniform grid."""
    n = values.size
    if math.isinf(p):
        return float(values.max(initial=0.0))
    return float((volume / n * np.sum(values**p)) ** (1.0 / p))


@dataclass
class VelocityFunctionals:
    d: int
    eps: tuple
    V: tuple
    W: tuple
    U: float
    horizon: float
    samples: int

    def _index(self, eps):
        for i, e in enumerate(self.eps):
            if math.isclose(e, eps, abs_tol=1e-12):
                return i
        raise KeyError(f"epsilon {eps} not on the functional grid {self.eps}")

    def V_at(self, eps):
        return self.V[self._index(eps)]

    def W_at(self, eps):
        return self.W[self._index(eps)]

    def min_scaled(self, N, kappa):
        """min over eps of V_eps N^eps / kappa, ties toward the smaller eps."""
        vals = [V * float(N) ** e / kappa for e, V in zip(self.eps, self.V)]
        i = int(np.argmin(vals))  # argmin returns the first minimiser
        return vals[i], self.eps[i]

    def peclet(self, kappa):
        return {
            "Pe": {e: V / kappa for e, V in zip(self.eps, self.V)},
            "Pe_d": self.U / kappa,
            "Pe_tilde": {e: W / kappa for e, W in zip(self.eps, self.W)},
        }


def _sample(grid, coeffs):
    # the solver only sees the dealias band; oversample so sup norms are not missed
    return grid.to_physical(coeffs * grid.band_mask, oversample=2)


def _eps_grid(d, extra):
    pts = set(np.round(np.arange(0.0, d / 2 + 1e-12, 0.25), 12))
    pts.update(float(e) for e in extra)
    out = sorted(p for p in pts if 0 <= p <= d / 2 + 1e-12)
    return tuple(out)


def velocity_functionals(velocity, T=0.0, sample_dt=None, grid=None, eps_extra=(), constants=None):
    """V, U, W for a velocity field given as a field, a callable of time or a TDConfig.

    Norms are evaluated by quadrature on the transform grid.  Sup and average
    run over the samples 0, sample_dt, ..., T; W uses the trapezoidal average.
    """
    constants = constants or ConstantsTable()
    if hasattr(velocity, "kappa") and hasattr(velocity, "velocity_at"):
        grid = velocity.grid
        at = velocity.velocity_at
        static = velocity.is_static
    elif velocity is None or isinstance(velocity, VectorField):
        grid = velocity.grid if velocity is not None else grid
        at = lambda t, v=velocity: v
        static = True
    else:
        at = velocity
        static = False
    if grid is None:
        raise ValueError("need a grid for a zero velocity")
    d = grid.dim
    eps = _eps_grid(d, eps_extra)
    if static or T <= 0:
        times = np.array([0.0])
    else:
        if sample_dt is None:
            sample_dt = T / 64
        n = max(int(math.ceil(T / sample_dt - 1e-9)), 1)
        times = np.linspace(0.0, T, n + 1)
    vol = grid.volume
    Vs = np.zeros((len(times), len(eps)))
    Us = np.zeros(len(times))
    for i, t in enumerate(times):
        v = at(t)
        if v is None:
            continue
        vals = _sample(grid, v.coeffs)
        mag = np.sqrt(np.sum(vals**2, axis=0))
        for j, e in enumerate(eps):
            if math.isclose(e, d / 2):
                Vs[i, j] = lp_norm(mag, 2.0, vol)
            else:
                Vs[i, j] = lp_norm(mag, d / e if e > 0 else math.inf, vol)
        grads = np.stack([_sample(grid, gradient(ScalarField._raw(grid, c)).coeffs) for c in v.coeffs])
        gmag = np.sqrt(np.sum(grads**2, axis=(0, 1)))
        c_half = constants.velocity_constant(0.5, d)
        Us[i] = min(c_half**2 * lp_norm(gmag, float(d), vol), lp_norm(mag, math.inf, vol))
    consts = np.array([constants.velocity_constant(e, d) for e in eps])
    V = tuple(float(x) for x in consts * Vs.max(axis=0))
    raw = Vs  # |v|_{d/eps}; at eps = d/2 this is the L^2 norm
    if len(times) == 1:
        W2 = raw[0] ** 2
    else:
        W2 = np.trapezoid(raw**2, times, axis=0) / (times[-1] - times[0])
    W = tuple(float(x) for x in np.sqrt(W2))
    return VelocityFunctionals(d, eps, V, W, float(Us.max()), float(times[-1]), len(times))


# ------------------------------------------------------------------ Grashof


@dataclass
class GrashofReport:
    G: float
    G_star: float
    R: float
    R_star: float
    shape_factor: float
    R2: float
    T1: float
    T2: float
    heuristic_times: bool = True


def _force_sampler(g, grid, T, samples):
    if isinstance(g, QuasiFiniteForce):
        if g.time_dependent:
            return [g.at(t) for t in np.linspace(0, T, samples)]
        return [g.at()]
    if isinstance(g, (ScalarField, VectorField)):
        return [g]
    if g is None:
        return []
    if callable(g):
        return [g(t) for t in np.linspace(0, T, samples)]
    raise TypeError(f"cannot sample force of type {type(g).__name__}")


def grashof_report(g, nu, T=0.0, samples=65, u0=None, constants=None):
    """Grashof numbers, absorbing radii and (heuristic) absorbing times.

    A zero force gives all zeros; the shape factor is then 0 by convention.
    T1 and T2 are e-folding estimates from the energy/enstrophy decay and need
    ``u0``; without it they are reported as 0.
    """
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    constants = constants or ConstantsTable()
    snaps = _force_sampler(g, None, T, samples)
    L2 = max((seminorm_coeffs(s.grid, s.coeffs, 0.0) for s in snaps), default=0.0)
    Hm1 = max((seminorm_coeffs(s.grid, s.coeffs, -1.0) for s in snaps), default=0.0)
    H1 = max((seminorm_coeffs(s.grid, s.coeffs, 1.0) for s in snaps), default=0.0)
    G, Gs = L2 / nu**2, Hm1 / nu**2
    R, Rs = math.sqrt(2) * nu * G, math.sqrt(2) * nu * Gs
    shape = H1 / L2 if L2 > 0 else 0.0
    R2 = constants.c2 * (shape + math.sqrt(2) / 2 * R / nu) * R / math.sqrt(2)
    T1 = T2 = 0.0
    if u0 is not None and R > 0:
        a2 = (seminorm_coeffs(u0.grid, u0.coeffs, 1.0) / R) ** 2
        T1 = math.log(a2 - 1) / nu if a2 > 2 else 0.0
        if R2 > 0:
            b2 = seminorm_coeffs(u0.grid, u0.coeffs, 2.0) ** 2 / (2 * R2**2)
            T2 = math.log(b2 - 1) / nu if b2 > 2 else 0.0
    return GrashofReport(G, Gs, R, Rs, shape, R2, T1, T2)


# ------------------------------------------------------------------ reports


@dataclass
class ConditionReport:
    algorithm: str
    feasible: bool
    N: int
    mu_lower: float = math.nan
    mu_upper: float = math.nan
    mu: float = math.nan
    mu1: float = math.nan
    mu2: float = math.nan
    lambda1: float = math.nan
    lambda2: float = math.nan
    alpha: float = math.nan
    t_star: float = math.nan
    contraction: float = math.nan
    rho: float = math.nan
    delta_N: float = math.nan
    l_N: float = math.nan
    C_F: float = math.nan
    U_g: float = math.nan
    lipschitz: float = math.nan
    min_feasible_N: int | None = None
    nonrigorous: bool = True
    notes: list = field(default_factory=list)

    def to_kv(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "notes":
                out[k] = "; ".join(v)
            elif isinstance(v, float) and math.isnan(v):
                continue
            else:
                out[k] = v
        return out

    def to_text(self):
        lines = [f"{self.algorithm}: {'FEASIBLE' if self.feasible else 'INFEASIBLE'} at N={self.N}"]
        for k, v in self.to_kv().items():
            if k in ("algorithm", "feasible", "N", "notes"):
                continue
            lines.append(f"  {k:<16} {v:.6g}" if isinstance(v, float) else f"  {k:<16} {v}")
        if self.nonrigorous:
            lines.append("  (constants are non-rigorous defaults)")
        for n in self.notes:
            lines.append(f"  note: {n}")
        return "\n".join(lines)

    def require(self):
        if not self.feasible:
            raise InfeasibleParametersError(f"{self.algorithm} conditions fail at N={self.N}", self)
        return self


def _check_order(fmap, order, what):
    if tuple(fmap.order) != order:
        raise ValueError(f"{what} needs a map of order {order}, got {tuple(fmap.order)}")
    if fmap.declared_lipschitz is None:
        raise ValueError(f"{what} needs a map with a declared Lipschitz constant")


def family_lipschitz(fmap, grid=None):
    """M -> ||F_M|| for the canonical family of ``fmap``.

    With a grid the constant of each raised map is computed exactly; without,
    the declared constant is used for every M.
    """
    if grid is None:
        return lambda M: float(fmap.declared_lipschitz)

    def lip(M):
        if M == fmap.rank:
            return float(fmap.declared_lipschitz)
        return float(raise_rank(fmap, M).lipschitz(grid))

    return lip


def _search_N(start, ok, limit=N_SEARCH_LIMIT):
    for M in range(max(int(start), 1), limit + 1):
        if ok(M):
            return M
    return None


def snap_up(t, dt):
    if dt is None or not math.isfinite(t):
        return t
    return math.ceil(t / dt - 1e-9) * dt


# ---------------------------------------------------------------- TD sieve


def sieve_td_mu_interval(functionals, fmap, N, kappa, strong=False, margin=0.9, dt=None,
                         constants=None, lipschitz_of=None):
    """Admissible nudging strength, relaxation time and contraction factor."""
    constants = constants or ConstantsTable()
    _check_order(fmap, STRONG_ORDER if strong else WEAK_ORDER, "strong sieve" if strong else "weak sieve")
    lip = lipschitz_of or (lambda M: float(fmap.declared_lipschitz))

    def bounds(M):
        F = lip(M)
        P, _ = functionals.min_scaled(M, kappa)
        if strong:
            lo = max((1 + F) * P, functionals.U / kappa) ** 2 * kappa
            hi = M**2 * kappa / 4
        else:
            lo = (1 + F) ** 2 * P**2 * kappa
            hi = M**2 * kappa / 2
        return lo, hi, F, P

    lo, hi, F, P = bounds(N)
    rep = ConditionReport("sieve_td_strong" if strong else "sieve_td", lo < hi, N,
                          mu_lower=lo, mu_upper=hi, lipschitz=F, nonrigorous=constants.nonrigorous)
    if not rep.feasible:
        rep.min_feasible_N = _search_N(N + 1, lambda M: bounds(M)[0] < bounds(M)[1])
        return rep
    rep.mu = hi
    _relaxation(rep, kappa, F, P, margin, dt)
    return rep


def _relaxation(rep, kappa, F, P, margin, dt):
    q = kappa / rep.mu * (1 + F) ** 2 * P**2
    if q >= margin:
        rep.t_star = math.inf
        rep.notes.append(f"margin {margin} unreachable: static part {q:.3g}")
        return
    t = -math.log(margin - q) / rep.mu
    rep.t_star = snap_up(t, dt)
    rep.contraction = math.exp(-rep.mu * rep.t_star) + q


def contraction_factor(mu, t_star, kappa, F, P):
    return math.exp(-mu * t_star) + kappa / mu * (1 + F) ** 2 * P**2


# -------------------------------------------------------------- TD nudging


def gronwall_rate(a, b, c_bar, eps):
    """Largest eigenvalue of [[a, c/2], [c/2, b]] with c = sqrt(1 + eps) c_bar."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if math.isinf(c_bar):
        return math.inf
    return 0.5 * (a + b + math.sqrt((a - b) ** 2 + (1 + eps) * c_bar**2))


def nudging_roots(mu1, mu2):
    """(lambda1, lambda2) with lambda1 + lambda2 = mu1 and lambda1 lambda2 = mu2."""
    disc = mu1 * mu1 - 4 * mu2
    if disc < 0:
        raise ValueError("mu1^2 < 4 mu2: the roots are complex")
    s = math.sqrt(disc)
    return 0.5 * (mu1 + s), 0.5 * (mu1 - s)


def nudging_mu(lambda1, lambda2):
    return lambda1 + lambda2, lambda1 * lambda2


def nudging_td_params(functionals, fmap, N, kappa, eps, constants=None, lambda_ratio=4.0,
                      lipschitz_of=None, gronwall_eps=0.01):
    """N-feasibility and a concrete (mu1, mu2) for the coupled nudging system.

    With beta = alpha / lambda2 the decay condition reads
    A1 - A2 / beta > beta A3 (A1 = 4 kappa N^2, A2 = 8 F^2 N^2, A3 = C^2 W^2 N^(2 eps));
    beta is put at the midpoint of its admissible interval and lambda2 then
    minimises rho over (0, kappa N^2].  ``eps`` is the integrability index of
    W; ``gronwall_eps`` is the slack in the averaged Gronwall rate.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if lambda_ratio <= 1:
        raise ValueError("lambda1 must exceed lambda2")
    constants = constants or ConstantsTable()
    _check_order(fmap, WEAK_ORDER, "TD nudging")
    lip = lipschitz_of or (lambda M: float(fmap.declared_lipschitz))
    C = constants.C_star
    W = functionals.W_at(eps)

    def lhs(M):
        return C * lip(M) / M * (W / kappa) * M**eps

    F = lip(N)
    rep = ConditionReport("nudging_td", lhs(N) < math.sqrt(2) / 2, N, lipschitz=F,
                          nonrigorous=constants.nonrigorous)
    if not rep.feasible:
        rep.min_feasible_N = _search_N(N + 1, lambda M: lhs(M) < math.sqrt(2) / 2)
        return rep
    A1, A2, A3 = 4 * kappa * N**2, 8 * F**2 * N**2, C**2 * W**2 * N ** (2 * eps)
    if A3 > 0:
        beta = A1 / (2 * A3)
    elif F > 0:
        beta = 4 * F**2 / kappa
    else:
        beta = 1.0
    a = -kappa * N**2
    b0 = 1 - 2 * F**2 / (beta * kappa)
    c0 = beta * A3

    def rho(lam2):
        return gronwall_rate(a, -lam2 * b0, math.sqrt(lam2 * c0), gronwall_eps)

    hi = kappa * N**2
    res = minimize_scalar(rho, bounds=(hi * 1e-9, hi), method="bounded", options={"xatol": hi * 1e-10})
    lam2 = float(res.x) if rho(res.x) < rho(hi) else hi
    rep.lambda2 = lam2
    rep.lambda1 = lambda_ratio * lam2
    rep.mu1, rep.mu2 = nudging_mu(rep.lambda1, rep.lambda2)
    rep.alpha = beta * lam2
    rep.rho = rho(lam2)
    if rep.rho >= 0:
        rep.feasible = False
        rep.notes.append("no lambda2 gives a negative Gronwall rate")
    return rep


# ---------------------------------------------------------------- NSE sieve


@dataclass(frozen=True)
class SieveNSEAssumptions:
    """Bounds on the truth and the initial guesses (all positive)."""

    alpha: float
    beta: float
    gamma: float
    sigma: float
    M0: float
    R: float
    T1: float = 0.0
    T2: float = 0.0

    def __post_init__(self):
        for k in ("alpha", "beta", "gamma", "sigma", "R"):
            if not getattr(self, k) > 0:
                raise ValueError(f"assumption {k} must be positive")
        if self.M0 < 0:
            raise ValueError("M0 must be nonnegative")


def C_F(assume, F, nu, constants):
    return math.sqrt(constants.C_abg) / nu * max(
        assume.M0 / assume.R,
        (1 + F) * assume.R * math.sqrt(math.log(math.e + assume.sigma + assume.R / nu)),
    )


def sieve_nse_mu_interval(assumptions, fmap, N, nu, constants=None, mu_fraction=0.9, dt=None,
                          lipschitz_of=None):
    """C_F(N), the interval [C_F^2 nu, N^2 nu / 4) and a relaxation time."""
    constants = constants or ConstantsTable()
    _check_order(fmap, STRONG_ORDER, "NSE sieve")
    lip = lipschitz_of or (lambda M: float(fmap.declared_lipschitz))
    if isinstance(assumptions, dict):
        assumptions = SieveNSEAssumptions(**assumptions)
    cf = C_F(assumptions, lip(N), nu, constants)
    lo, hi = cf**2 * nu, N**2 * nu / 4
    rep = ConditionReport("sieve_nse", cf < N / 2, N, mu_lower=lo, mu_upper=hi, C_F=cf,
                          lipschitz=lip(N), contraction=0.5, nonrigorous=constants.nonrigorous)
    if not rep.feasible:
        rep.min_feasible_N = _search_N(N + 1, lambda M: C_F(assumptions, lip(M), nu, constants) < M / 2)
        return rep
    mu = max(lo, mu_fraction * hi)
    rep.mu = mu
    # the synchronisation transient must have decayed well below the halving target
    t_sync = (1 + math.log(4)) / mu
    a = assumptions
    t1p = 0.0
    if a.M0 > 0:
        t1p = max(0.0, math.log(a.gamma**2 * mu * nu * a.R**2 / a.M0**2) / mu)
    rep.t_star = snap_up(max(t_sync, t1p, a.T1, a.T2), dt)
    rep.notes.append("t_star uses heuristic absorbing times")
    return rep


# -------------------------------------------------------------- NSE nudging


def l_N(N):
    return 2 * (math.sqrt(math.log(N)) + 1)


def delta_N(C, F, U, N, nu):
    return 1 - 16 * (C * F * U * l_N(N) / (N * nu)) ** 2


def budget_alpha(w0, e0, nu):
    """Largest alpha with |w0|^2 + alpha ||e0||_*^2 <= nu^2 / (2 alpha)."""
    if e0 == 0 and w0 == 0:
        return 1.0
    if e0 == 0:
        return nu**2 / (2 * w0**2)
    return (-(w0**2) + math.sqrt(w0**4 + 2 * nu**2 * e0**2)) / (2 * e0**2)


def nudging_nse_params(U_g, fmap, N, nu, constants=None, w0=None, e0=None, lambda_ratio=4.0,
                       lipschitz_of=None):
    """N-feasibility, delta_N and (mu1, mu2) for the NSE nudging system.

    ``w0``/``e0`` are the initial state error |w(0)| and force error
    ||e(0)||_*; they fix alpha.  Without them alpha = 1.
    """
    constants = constants or ConstantsTable()
    _check_order(fmap, WEAK_ORDER, "NSE nudging")
    lip = lipschitz_of or (lambda M: float(fmap.declared_lipschitz))
    C = constants.C_star

    def ok(M):
        return 16 * C * (1 + U_g / nu * (1 + l_N(M) * lip(M))) < M

    F = lip(N)
    rep = ConditionReport("nudging_nse", ok(N), N, l_N=l_N(N), U_g=U_g, lipschitz=F,
                          delta_N=delta_N(C, F, U_g, N, nu), nonrigorous=constants.nonrigorous)
    if not rep.feasible:
        rep.min_feasible_N = _search_N(N + 1, ok)
        return rep
    alpha = 1.0 if w0 is None and e0 is None else budget_alpha(w0 or 0.0, e0 or 0.0, nu)
    ln = l_N(N)
    drag = 2 * alpha * C**2 * U_g**2 * ln**2 / (N**2 * nu)
    if F > 0:
        lam2 = nu * alpha / (4 * F**2)
        lam1_min = nu * N**2 / (4 * F**2) + (F**2 + C**2 * U_g**2 * ln**2) / nu
    else:
        lam2 = N**2 * nu / 16 + drag
        lam1_min = C**2 * U_g**2 * ln**2 / nu
    coeff = lam2 - 2 * F**2 * lam2**2 / (alpha * nu) - drag
    rep.alpha = alpha
    rep.lambda2 = lam2
    rep.lambda1 = max(lambda_ratio * lam2, 2 * lam1_min)
    rep.mu1, rep.mu2 = nudging_mu(rep.lambda1, rep.lambda2)
    rep.rho = -min(N**2 * nu / 8, 2 * coeff)
    if coeff <= 0:
        rep.feasible = False
        rep.notes.append("delta_N too small for a positive decay coefficient")
    return rep
