"""Time integration of transport-diffusion and 2D Navier-Stokes, plus their nudged forms.

The semi-discrete systems are written as y' = L y + N(y, t) with L diagonal in
Fourier space (or, for the coupled nudging systems, a 2x2 block per low mode
coupling the state to the force estimate).  L is integrated exactly by a
fourth-order exponential Runge-Kutta scheme (Cox-Matthews ETDRK4).  Unlike the
plain integrating-factor form, ETDRK4 leaves steady states of forced stiff
modes exactly in place, which the stationary algorithms rely on.

Every right-hand side evaluation is tagged with a :class:`Tick` (step index,
RK stage 0..3, time).  Truth runs record low modes at all four ticks of every
step, so an assimilating run in lockstep reads observations at exactly the
stage points the joint system would have produced.
"""
from __future__ import annotations

import math
import warnings
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BlowUpError, ConvergenceError, ObservationGapError, SupportError
from .forcing import QuasiFiniteForce
from .spectral import (
    ScalarField,
    VectorField,
    advect_coeffs,
    band_physical,
    leray_coeffs,
    nse_bilinear_coeffs,
    pack_low,
    unpack_low,
)

Tick = namedtuple("Tick", "step sub t")
STAGE_FRACTIONS = (0.0, 0.5, 0.5, 1.0)
BLOWUP_LIMIT = 1e12


# ------------------------------------------------------------------ phi functions

_CONTOUR = np.exp(1j * np.pi * (np.arange(1, 33) - 0.5) / 32)


def phi_functions(z):
    """(e^z, phi_1, phi_2, phi_3) for a real array z via contour averaging."""
    z = np.asarray(z, dtype=float)
    Z = z[..., None] + _CONTOUR
    eZ = np.exp(Z)
    p1 = np.mean((eZ - 1) / Z, axis=-1).real
    p2 = np.mean((eZ - 1 - Z) / Z**2, axis=-1).real
    p3 = np.mean((eZ - 1 - Z - Z**2 / 2) / Z**3, axis=-1).real
    return np.exp(z), p1, p2, p3


def phi_functions_matrix(M):
    """(e^M, phi_1(M), phi_2(M), phi_3(M)) for a small square matrix."""
    n = M.shape[0]
    aug = np.zeros((4 * n, 4 * n))
    aug[:n, :n] = M
    for j in range(3):
        aug[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
    ex = scipy.linalg.expm(aug)
    return tuple(ex[:n, j * n:(j + 1) * n] for j in range(4))


def _etd_weights(e, p1, p2, p3, h):
    return {"E": e, "f1": h * (p1 - 3 * p2 + 4 * p3), "f2": h * (p2 - 2 * p3), "f3": h * (4 * p3 - p2)}


class DiagonalLinear:
    """L acting as a multiplier on each state component."""

    def __init__(self, *diags):
        self.diags = tuple(np.asarray(d, dtype=float) for d in diags)

    def apply(self, y):
        return tuple(d * c for d, c in zip(self.diags, y))

    def coefficients(self, h):
        out = []
        for d in self.diags:
            w = _etd_weights(*phi_functions(d * h), h)
            e2, q1, _, _ = phi_functions(d * h / 2)
            w["E2"] = e2
            w["Q"] = (h / 2) * q1
            out.append(w)
        return _DiagCoeffs(out)


class _DiagCoeffs:
    def __init__(self, per_comp):
        self.per_comp = per_comp

    def __call__(self, name, y):
        return tuple(c[name] * v for c, v in zip(self.per_comp, y))


class PairedLinear:
    """Two components (x, l): x has multiplier ``x_diag``; on the low-mode mask
    the pair evolves by the 2x2 matrix ``block`` acting on (x_k, l_k)."""

    def __init__(self, x_diag, low_mask, block):
        self.x_diag = np.asarray(x_diag, dtype=float)
        self.low = np.asarray(low_mask, dtype=bool)
        self.block = np.asarray(block, dtype=float)

    def apply(self, y):
        x, l = y
        lo = self.low
        b = self.block
        x_out = np.where(lo, b[0, 0] * x + b[0, 1] * l, self.x_diag * x)
        l_out = np.where(lo, b[1, 0] * x + b[1, 1] * l, 0.0)
        return x_out, l_out

    def coefficients(self, h):
        xs = _etd_weights(*phi_functions(self.x_diag * h), h)
        e2, q1, _, _ = phi_functions(self.x_diag * h / 2)
        xs["E2"], xs["Q"] = e2, (h / 2) * q1
        zero = _etd_weights(*phi_functions(np.zeros(1)), h)
        e2z, q1z, _, _ = phi_functions(np.zeros(1))
        zero["E2"], zero["Q"] = e2z, (h / 2) * q1z
        bl = _etd_weights(*phi_functions_matrix(self.block * h), h)
        e2b, q1b, _, _ = phi_functions_matrix(self.block * h / 2)
        bl["E2"], bl["Q"] = e2b, (h / 2) * q1b
        lo = self.low
        coeffs = {}
        for name in ("E", "E2", "Q", "f1", "f2", "f3"):
            m = bl[name]
            a = np.where(lo, m[0, 0], xs[name])
            b = np.where(lo, m[0, 1], 0.0)
            c = np.where(lo, m[1, 0], 0.0)
            d = np.where(lo, m[1, 1], float(zero[name][0]))
            coeffs[name] = (a, b, c, d)
        return _PairCoeffs(coeffs)


class _PairCoeffs:
    def __init__(self, coeffs):
        self.coeffs = coeffs

    def __call__(self, name, y):
        a, b, c, d = self.coeffs[name]
        x, l = y
        return a * x + b * l, c * x + d * l


def _add(*terms):
    return tuple(sum(parts) for parts in zip(*terms))


class ETDRK4:
    """Cox-Matthews exponential RK4 for y' = L y + N(y, tick)."""

    def __init__(self, linear, dt):
        self.linear = linear
        self.dt = float(dt)
        self.c = linear.coefficients(self.dt)

    def step(self, y, nonlinear, step):
        h = self.dt
        t = step * h
        C = self.c
        Nv = nonlinear(y, Tick(step, 0, t))
        Ey = C("E2", y)
        a = _add(Ey, C("Q", Nv))
        Na = nonlinear(a, Tick(step, 1, t + h / 2))
        b = _add(Ey, C("Q", Na))
        Nb = nonlinear(b, Tick(step, 2, t + h / 2))
        c = _add(C("E2", a), C("Q", tuple(2 * p - q for p, q in zip(Nb, Nv))))
        Nc = nonlinear(c, Tick(step, 3, t + h))
        return _add(
            C("E", y),
            C("f1", Nv),
            C("f2", tuple(2 * (p + q) for p, q in zip(Na, Nb))),
            C("f3", Nc),
        )


def _check_state(y, t):
    for c in y:
        if not np.all(np.isfinite(c)):
            raise BlowUpError(t, "non-finite coefficient")
        if np.sqrt(np.sum(np.abs(c) ** 2)) > BLOWUP_LIMIT:
            raise BlowUpError(t, f"state norm above {BLOWUP_LIMIT:g}")


# ------------------------------------------------------------------- configs


class TDConfig:
    """Diffusivity, advecting velocity and grid of a transport-diffusion problem.

    ``velocity`` is None (no advection), a VectorField (static) or a callable
    ``t -> VectorField``.
    """

    def __init__(self, kappa, grid, velocity=None, time_shift=0.0, check_times=(0.0, 0.5, 1.0)):
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        self.kappa = float(kappa)
        self.grid = grid
        self.velocity = velocity
        self.time_shift = float(time_shift)
        self._phys = None
        times = (0.0,) if self.is_static else check_times
        for t in times:
            v = self.velocity_at(t)
            if v is not None and not v.is_divergence_free(1e-12):
                raise ValueError(f"velocity is not divergence-free at t={t}")
            if v is not None and v.grid != grid:
                raise ValueError("velocity lives on a different grid")

    @property
    def is_static(self):
        return self.velocity is None or isinstance(self.velocity, VectorField)

    def velocity_at(self, t):
        if self.velocity is None or isinstance(self.velocity, VectorField):
            return self.velocity
        return self.velocity(t + self.time_shift)

    def velocity_phys(self, t):
        if self.velocity is None:
            return None
        if self.is_static:
            if self._phys is None:
                self._phys = band_physical(self.grid, self.velocity.coeffs)
            return self._phys
        return band_physical(self.grid, self.velocity_at(t).coeffs)

    def shifted(self, s):
        """Config seen through the time shift t -> t + s (sigma_j v)."""
        if self.is_static:
            return self
        return TDConfig(self.kappa, self.grid, self.velocity, self.time_shift + s, check_times=())

    def max_speed(self, times=(0.0,)):
        if self.velocity is None:
            return 0.0
        out = 0.0
        for t in times:
            vp = self.velocity_at(t).physical(oversample=2)
            out = max(out, float(np.sqrt(np.sum(vp**2, axis=0)).max()))
        return out


@dataclass(frozen=True)
class NSEConfig:
    nu: float
    grid: object

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")


@dataclass(frozen=True)
class NudgeParams:
    """Feedback parameters: mode 'sieve' uses mu, mode 'nudging' uses mu1 and mu2."""

    mode: str
    N: int
    mu: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0

    def __post_init__(self):
        if self.mode not in ("sieve", "nudging"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.N <= 0:
            raise ValueError("N must be positive")
        vals = (self.mu,) if self.mode == "sieve" else (self.mu1, self.mu2)
        if any(v < 0 for v in vals):
            raise ValueError("feedback parameters must be nonnegative")

    @classmethod
    def sieve(cls, mu, N):
        return cls("sieve", N, mu=mu)

    @classmethod
    def nudging(cls, mu1, mu2, N):
        return cls("nudging", N, mu1=mu1, mu2=mu2)


def check_timestep(config, dt, cfl=0.5, times=(0.0,), allow=False):
    """Advective CFL bound.  Feedback terms sit in the exponential part, so
    mu does not restrict dt.  Raises unless ``allow``, in which case it warns."""
    if isinstance(config, NSEConfig):
        return True
    speed = config.max_speed(times)
    if speed == 0.0:
        return True
    limit = cfl * (2 * math.pi / config.grid.n_phys) / speed
    if dt <= limit:
        return True
    msg = f"dt={dt:g} exceeds the advective CFL limit {limit:g}"
    if allow:
        warnings.warn(msg)
        return False
    raise ValueError(msg)


# ----------------------------------------------------------------- time series


class StageLattice:
    """Values at step nodes (n+1) and at the three RK stages of every step (n, 3)."""

    def __init__(self, nodes, stages=None):
        self.nodes = nodes
        self.stages = stages

    def __len__(self):
        return len(self.nodes)

    def get(self, step, sub):
        if sub == 0:
            return self.nodes[step]
        return self.stages[step, sub - 1]

    def shifted(self, m):
        return StageLattice(self.nodes[m:], None if self.stages is None else self.stages[m:])


class ObservationStream:
    """P_N of the truth sampled every dt, optionally with exact time derivatives.

    Arrays hold packed low-mode coefficients (see :func:`spectral.pack_low`).
    ``stage_low``/``stage_rhs`` (shape (n, 3, ...)) carry the RK stage values
    recorded by a lockstep truth run; without them mid-step values are taken
    from cubic Hermite (or Lagrange) interpolation.  A stream with
    ``static=True`` holds one snapshot valid at all times.
    """

    def __init__(self, grid, N_obs, dt, low, rhs_low=None, stage_low=None, stage_rhs=None,
                 vector=False, t0=0.0, static=False):
        self.grid = grid
        self.N_obs = int(N_obs)
        self.dt = float(dt)
        self.low = np.asarray(low)
        self.rhs_low = None if rhs_low is None else np.asarray(rhs_low)
        self.stage_low = None if stage_low is None else np.asarray(stage_low)
        self.stage_rhs = None if stage_rhs is None else np.asarray(stage_rhs)
        self.vector = vector
        self.t0 = float(t0)
        self.static = static
        n_low = len(grid.low_index(self.N_obs))
        if self.low.shape[-1] != n_low:
            raise SupportError("observation snapshots must be packed low modes of |k| <= N_obs")

    def __len__(self):
        return len(self.low)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.low))

    @property
    def n_steps(self):
        return len(self.low) - 1

    def unpack(self, packed):
        return unpack_low(self.grid, packed, self.N_obs)

    def field(self, packed):
        cls = VectorField if self.vector else ScalarField
        return cls._raw(self.grid, self.unpack(packed))

    def snapshot(self, i):
        return self.field(self.low[i])

    def shifted(self, m):
        """Stream as seen by sigma: local sample i is original sample i + m."""
        if self.static:
            return self
        if m < 0 or m >= len(self.low):
            raise ObservationGapError(f"shift by {m} samples leaves no data")
        return ObservationStream(
            self.grid, self.N_obs, self.dt, self.low[m:],
            None if self.rhs_low is None else self.rhs_low[m:],
            None if self.stage_low is None else self.stage_low[m:],
            None if self.stage_rhs is None else self.stage_rhs[m:],
            self.vector, self.t0 + m * self.dt,
        )

    def restricted(self, N):
        """The same stream seen through P_N for N <= N_obs."""
        if N > self.N_obs:
            raise ValueError(f"cannot raise observation rank from {self.N_obs} to {N}")
        if N == self.N_obs:
            return self
        idx = np.searchsorted(self.grid.low_index(self.N_obs), self.grid.low_index(N))
        pick = lambda a: None if a is None else a[..., idx]
        return ObservationStream(self.grid, N, self.dt, pick(self.low), pick(self.rhs_low),
                                 pick(self.stage_low), pick(self.stage_rhs), self.vector, self.t0,
                                 self.static)

    def segment(self, start, stop):
        """Samples start..stop inclusive."""
        s = self.shifted(start)
        n = stop - start + 1
        return ObservationStream(
            self.grid, self.N_obs, self.dt, s.low[:n],
            None if s.rhs_low is None else s.rhs_low[:n],
            None if s.stage_low is None else s.stage_low[: n - 1],
            None if s.stage_rhs is None else s.stage_rhs[: n - 1],
            self.vector, s.t0,
        )

    def _check(self, i, need_next):
        last = len(self.low) - 1
        if i < 0 or i > last or (need_next and i + 1 > last):
            raise ObservationGapError(f"no observation for step {i} (stream has {last} steps)")

    def packed_value(self, tick):
        if self.static:
            return self.low[0]
        i, sub = tick.step, tick.sub
        self._check(i, sub > 0)
        if sub == 0:
            return self.low[i]
        if self.stage_low is not None:
            return self.stage_low[i, sub - 1]
        if sub == 3:
            return self.low[i + 1]
        return self._midpoint(i)

    def packed_derivative(self, tick):
        if self.static:
            return np.zeros_like(self.low[0])
        i, sub = tick.step, tick.sub
        self._check(i, sub > 0)
        if sub == 0:
            return self._node_derivative(i)
        if self.stage_rhs is not None:
            return self.stage_rhs[i, sub - 1]
        if sub == 3:
            return self._node_derivative(i + 1)
        y0, y1 = self.low[i], self.low[i + 1]
        d0, d1 = self._node_derivative(i), self._node_derivative(i + 1)
        return 1.5 * (y1 - y0) / self.dt - 0.25 * (d0 + d1)

    def _node_derivative(self, i):
        if self.rhs_low is not None:
            return self.rhs_low[i]
        return fd_derivative(self.low, i, self.dt)

    def _midpoint(self, i):
        y0, y1 = self.low[i], self.low[i + 1]
        if self.rhs_low is not None:
            return 0.5 * (y0 + y1) + self.dt * (self.rhs_low[i] - self.rhs_low[i + 1]) / 8
        n = len(self.low)
        if n < 4:
            return 0.5 * (y0 + y1)
        j = min(max(i - 1, 0), n - 4)
        # cubic Lagrange through four consecutive samples, evaluated at i + 1/2
        x = i + 0.5 - j
        nodes = np.arange(4.0)
        out = 0.0
        for a in range(4):
            w = np.prod([(x - nodes[b]) / (nodes[a] - nodes[b]) for b in range(4) if b != a])
            out = out + w * self.low[j + a]
        return out

    def value(self, tick):
        return self.unpack(self.packed_value(tick))

    def derivative(self, tick):
        return self.unpack(self.packed_derivative(tick))


_FD_CENTRAL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_FD_ONE_SIDED = {
    0: (0, np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0),
    1: (0, np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0),
}


def fd_derivative(samples, i, dt):
    """Fourth-order finite-difference derivative of uniformly spaced samples at index i."""
    n = len(samples)
    if n < 5:
        raise ValueError("finite differences need at least 5 samples")
    if 2 <= i <= n - 3:
        w = _FD_CENTRAL
        s = i - 2
    elif i < 2:
        s, w = _FD_ONE_SIDED[i]
    else:
        s, w = _FD_ONE_SIDED[n - 1 - i]
        s = n - 5
        w = -w[::-1]
    return sum(wj * samples[s + j] for j, wj in enumerate(w)) / dt


# -------------------------------------------------------------- force providers


class ConstantForce:
    def __init__(self, coeffs):
        self.coeffs = coeffs

    def __call__(self, tick):
        return self.coeffs


class TimeForce:
    """Wraps ``fn(t) -> field or coefficient array`` as a provider."""

    def __init__(self, fn, shift=0.0, leray=False, grid=None):
        self.fn = fn
        self.shift = shift
        self.leray = leray
        self.grid = grid

    def __call__(self, tick):
        v = self.fn(tick.t + self.shift)
        c = v.coeffs if hasattr(v, "coeffs") else np.asarray(v)
        return leray_coeffs(self.grid, c) if self.leray else c


class LatticeForce:
    """Force stored on the stage lattice as packed low modes, completed by a map.

    ``offset`` realises tau: local step i reads stored step i + offset.
    """

    def __init__(self, lattice, grid, N, fmap=None, offset=0, leray=False):
        self.lattice = lattice
        self.grid = grid
        self.N = N
        self.fmap = fmap
        self.offset = offset
        self.leray = leray

    def low(self, tick):
        i = tick.step + self.offset
        if i >= len(self.lattice) or (tick.sub > 0 and i + 1 >= len(self.lattice)):
            raise ObservationGapError(f"force trajectory has no step {i}")
        return unpack_low(self.grid, self.lattice.get(i, tick.sub), self.N)

    def __call__(self, tick):
        l = self.low(tick)
        if self.fmap is None:
            return l
        tail = self.fmap.apply_coeffs(self.grid, l)
        return l + tail

    def shifted(self, m):
        return LatticeForce(self.lattice, self.grid, self.N, self.fmap, self.offset + m, self.leray)


def as_force(g, grid, vector=False, shift=0.0):
    """Normalise a force description to a provider ``tick -> coefficients``."""
    leray = vector
    if g is None:
        shape = ((grid.dim,) if vector else ()) + grid.shape
        return ConstantForce(np.zeros(shape, dtype=complex))
    if isinstance(g, (ConstantForce, TimeForce, LatticeForce)):
        return g
    if isinstance(g, QuasiFiniteForce):
        if g.time_dependent:
            return TimeForce(g.at, shift, leray, grid)
        c = g.at().coeffs
        return ConstantForce(leray_coeffs(grid, c) if leray else c)
    if isinstance(g, (ScalarField, VectorField)):
        return ConstantForce(leray_coeffs(grid, g.coeffs) if leray else g.coeffs)
    if callable(g):
        return TimeForce(g, shift, leray, grid)
    raise TypeError(f"cannot use {type(g).__name__} as a force")


# --------------------------------------------------------------------- systems


class _System:
    """Shared stepping logic; subclasses define ``linear`` and ``nonlinear``."""

    hook = None

    def integrator(self, dt):
        key = float(dt)
        cache = self.__dict__.setdefault("_integrators", {})
        if key not in cache:
            cache[key] = ETDRK4(self.linear, dt)
        return cache[key]

    def advance(self, y, step, dt):
        out = self.integrator(dt).step(y, self.nonlinear, step)
        _check_state(out, (step + 1) * dt)
        return out

    def rhs(self, y, tick):
        """Full time derivative L y + N(y)."""
        return _add(self.linear.apply(y), self.nonlinear(y, tick))

    def _notify(self, y, tick, n):
        if self.hook is not None:
            self.hook(y, tick, n)


class TDSystem(_System):
    def __init__(self, config, g):
        self.config = config
        self.grid = config.grid
        self.g = as_force(g, self.grid)
        self.linear = DiagonalLinear(-config.kappa * self.grid.k2)

    def nonlinear(self, y, tick):
        (phi,) = y
        out = self.g(tick)
        v = self.config.velocity_phys(tick.t)
        if v is not None:
            out = out - advect_coeffs(self.grid, v, phi)
        n = (out,)
        self._notify(y, tick, n)
        return n


class NSESystem(_System):
    def __init__(self, config, g, nonlinear=True):
        self.config = config
        self.grid = config.grid
        self.g = as_force(g, self.grid, vector=True)
        self.use_b = nonlinear
        self.linear = DiagonalLinear(-config.nu * self.grid.k2)

    def nonlinear(self, y, tick):
        (u,) = y
        out = self.g(tick)
        if self.use_b:
            out = out - nse_bilinear_coeffs(self.grid, u, u)
        n = (out,)
        self._notify(y, tick, n)
        return n


class NudgedTDSystem(_System):
    """psi' = -v.grad psi + kappa Lap psi + f + mu P_N obs - mu P_N psi."""

    def __init__(self, config, f, obs, mu, N):
        self.config = config
        self.grid = config.grid
        self.f = as_force(f, self.grid)
        self.obs = obs
        self.mu = float(mu)
        self.N = int(N)
        if obs.N_obs < self.N:
            raise ValueError("observations resolve fewer modes than the nudging rank")
        low = self.grid.low_mask(self.N)
        self.linear = DiagonalLinear(-config.kappa * self.grid.k2 - self.mu * low)

    def observation(self, tick):
        c = self.obs.value(tick)
        if self.obs.N_obs != self.N:
            c = c * self.grid.low_mask(self.N)
        return c

    def nonlinear(self, y, tick):
        (psi,) = y
        out = self.f(tick) + self.mu * self.observation(tick)
        v = self.config.velocity_phys(tick.t)
        if v is not None:
            out = out - advect_coeffs(self.grid, v, psi)
        n = (out,)
        self._notify(y, tick, n)
        return n


class NudgedNSESystem(_System):
    """v' + B(v, v) = -nu A v + f + mu P_N u_obs - mu P_N v."""

    def __init__(self, config, f, obs, mu, N, nonlinear=True):
        self.config = config
        self.grid = config.grid
        self.f = as_force(f, self.grid, vector=True)
        self.obs = obs
        self.mu = float(mu)
        self.N = int(N)
        self.use_b = nonlinear
        low = self.grid.low_mask(self.N)
        self.linear = DiagonalLinear(-config.nu * self.grid.k2 - self.mu * low)

    observation = NudgedTDSystem.observation

    def nonlinear(self, y, tick):
        (v,) = y
        out = self.f(tick) + self.mu * self.observation(tick)
        if self.use_b:
            out = out - nse_bilinear_coeffs(self.grid, v, v)
        n = (out,)
        self._notify(y, tick, n)
        return n


class NudgingTDSystem(_System):
    """Coupled state/force system driven by the spliced field P_N obs + Q_N psi.

    Low modes of (psi, l) evolve under [[-mu1, 1], [-mu2, 0]] exactly; advection,
    diffusion of the observed part, the tail F(l) and the observation forcing
    are explicit.
    """

    def __init__(self, config, fmap, obs, mu1, mu2, N):
        self.config = config
        self.grid = config.grid
        self.fmap = fmap
        self.obs = obs
        self.mu1, self.mu2, self.N = float(mu1), float(mu2), int(N)
        g = self.grid
        self.low = g.low_mask(self.N)
        block = [[-self.mu1, 1.0], [-self.mu2, 0.0]]
        self.linear = PairedLinear(-config.kappa * g.k2, self.low, block)

    observation = NudgedTDSystem.observation

    def nonlinear(self, y, tick):
        psi, l = y
        g = self.grid
        po = self.observation(tick)
        spliced = po + psi * ~self.low
        out = self.config.kappa * (-g.k2) * po + self.mu1 * po
        if self.fmap is not None:
            out = out + self.fmap.apply_coeffs(g, l * self.low)
        v = self.config.velocity_phys(tick.t)
        if v is not None:
            out = out - advect_coeffs(g, v, spliced)
        n = (out, self.mu2 * po)
        self._notify(y, tick, n)
        return n


class NudgingNSESystem(_System):
    """v' + P_N B(w, w) + Q_N B(w, v) = nu Lap w + l + F(l) + mu1 (P_N u_obs - P_N v),
    l' = mu2 (P_N u_obs - P_N v), with w = P_N u_obs + Q_N v."""

    def __init__(self, config, fmap, obs, mu1, mu2, N):
        self.config = config
        self.grid = config.grid
        self.fmap = fmap
        self.obs = obs
        self.mu1, self.mu2, self.N = float(mu1), float(mu2), int(N)
        g = self.grid
        self.low = g.low_mask(self.N)
        block = [[-self.mu1, 1.0], [-self.mu2, 0.0]]
        self.linear = PairedLinear(-config.nu * g.k2, self.low, block)

    observation = NudgedTDSystem.observation

    def nonlinear(self, y, tick):
        v, l = y
        g = self.grid
        po = self.observation(tick)
        w = po + v * ~self.low
        w_phys = band_physical(g, w)
        b_ww = nse_bilinear_coeffs(g, w, w, w_phys)
        b_wv = nse_bilinear_coeffs(g, w, v, w_phys)
        out = -(b_ww * self.low + b_wv * ~self.low)
        out = out + self.config.nu * (-g.k2) * po + self.mu1 * po
        if self.fmap is not None:
            out = out + self.fmap.apply_coeffs(g, l * self.low)
        n = (out, self.mu2 * po)
        self._notify(y, tick, n)
        return n


# ------------------------------------------------------------- step functions


def _tick_step(t, dt):
    k = round(t / dt)
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError("t must be an integer multiple of dt")
    return int(k)


def _obs_local(obs, t, dt):
    """Stream re-indexed so that step round(t/dt) of the caller is sample round((t - t0)/dt)."""
    if obs.static:
        return obs
    if abs(obs.dt - dt) > 1e-12 * dt:
        raise ValueError("observation spacing must equal the solver dt")
    return obs


class _ShiftedObs:
    """View of a stream addressed by global step index."""

    def __init__(self, obs, base):
        self.obs, self.base = obs, base
        self.N_obs, self.static = obs.N_obs, obs.static

    def value(self, tick):
        return self.obs.value(Tick(tick.step - self.base, tick.sub, tick.t))

    def derivative(self, tick):
        return self.obs.derivative(Tick(tick.step - self.base, tick.sub, tick.t))


def _globalise(obs, dt):
    if obs.static:
        return obs
    _obs_local(obs, None, dt)
    return _ShiftedObs(obs, _tick_step(obs.t0, dt))


def step_td(phi, config, g, t, dt):
    """One ETDRK4 step of phi' = -v.grad phi + kappa Lap phi + g."""
    sys_ = TDSystem(config, g)
    (out,) = sys_.advance((phi.coeffs,), _tick_step(t, dt), dt)
    return ScalarField._raw(phi.grid, out)


def step_nse(u, config, g, t, dt, nonlinear=True):
    sys_ = NSESystem(config, g, nonlinear)
    (out,) = sys_.advance((u.coeffs,), _tick_step(t, dt), dt)
    return VectorField._raw(u.grid, out)


def step_nudged_td(psi, config, f, obs, params, t, dt):
    if params.mode != "sieve":
        raise ValueError("step_nudged_td needs sieve-mode parameters")
    sys_ = NudgedTDSystem(config, f, _globalise(obs, dt), params.mu, params.N)
    (out,) = sys_.advance((psi.coeffs,), _tick_step(t, dt), dt)
    return ScalarField._raw(psi.grid, out)


def step_nudged_nse(v, config, f, obs, params, t, dt, nonlinear=True):
    if params.mode != "sieve":
        raise ValueError("step_nudged_nse needs sieve-mode parameters")
    sys_ = NudgedNSESystem(config, f, _globalise(obs, dt), params.mu, params.N, nonlinear)
    (out,) = sys_.advance((v.coeffs,), _tick_step(t, dt), dt)
    return VectorField._raw(v.grid, out)


def _check_low(l, N):
    outside = np.abs(l.coeffs * ~l.grid.low_mask(N)).max(initial=0.0)
    if outside > 1e-12 * max(np.abs(l.coeffs).max(initial=0.0), 1e-300):
        raise SupportError(f"force estimate must be supported in |k| <= {N}")


def step_nudging_td_system(psi, l, config, fmap, obs, params, t, dt):
    if params.mode != "nudging":
        raise ValueError("step_nudging_td_system needs nudging-mode parameters")
    _check_low(l, params.N)
    sys_ = NudgingTDSystem(config, fmap, _globalise(obs, dt), params.mu1, params.mu2, params.N)
    a, b = sys_.advance((psi.coeffs, l.coeffs), _tick_step(t, dt), dt)
    return ScalarField._raw(psi.grid, a), ScalarField._raw(psi.grid, b)


def step_nudging_nse_system(v, l, config, fmap, obs, params, t, dt):
    if params.mode != "nudging":
        raise ValueError("step_nudging_nse_system needs nudging-mode parameters")
    _check_low(l, params.N)
    sys_ = NudgingNSESystem(config, fmap, _globalise(obs, dt), params.mu1, params.mu2, params.N)
    a, b = sys_.advance((v.coeffs, l.coeffs), _tick_step(t, dt), dt)
    return VectorField._raw(v.grid, a), VectorField._raw(v.grid, b)


# ------------------------------------------------------------------ truth runs


@dataclass
class Trajectory:
    """Full states every ``keep_every`` steps (times in ``times``)."""

    grid: object
    dt: float
    keep_every: int
    times: np.ndarray
    states: list
    final: np.ndarray
    vector: bool = False

    def state_at_step(self, i):
        if i % self.keep_every:
            raise KeyError(f"step {i} was not stored (stride {self.keep_every})")
        return self.states[i // self.keep_every]

    def field(self, i):
        cls = VectorField if self.vector else ScalarField
        return cls._raw(self.grid, self.state_at_step(i))


class _Recorder:
    """Hook collecting P_N state and P_N d/dt state at every tick."""

    def __init__(self, system, N, n_steps):
        self.system = system
        self.N = N
        self.grid = system.grid
        self.nodes, self.node_rhs = [], []
        self.stage = [[None] * 3 for _ in range(n_steps)]
        self.stage_rhs = [[None] * 3 for _ in range(n_steps)]

    def __call__(self, y, tick, n):
        (state,) = y
        lin = self.system.linear.apply(y)[0]
        val = pack_low(self.grid, state, self.N)
        der = pack_low(self.grid, lin + n[0], self.N)
        if tick.sub == 0:
            if tick.step == len(self.nodes):
                self.nodes.append(val)
                self.node_rhs.append(der)
        else:
            self.stage[tick.step][tick.sub - 1] = val
            self.stage_rhs[tick.step][tick.sub - 1] = der


def generate_truth(kind, config, g, state0, T, dt, N_obs, keep_every=1, record_stages=True,
                   max_steps=200000, tol=1e-10, check_every=20):
    """Integrate the truth and record its observations.

    kind: 'td', 'nse' or 'td_stationary'.  Returns (Trajectory, ObservationStream).
    """
    grid = config.grid
    vector = kind == "nse"
    if kind == "td":
        system = TDSystem(config, g)
    elif kind == "nse":
        system = NSESystem(config, g)
    elif kind == "td_stationary":
        if not config.is_static or (isinstance(g, QuasiFiniteForce) and g.time_dependent):
            raise ValueError("stationary truth needs time-independent velocity and force")
        return _stationary_truth(config, g, state0, dt, N_obs, max_steps, tol, check_every)
    else:
        raise ValueError(f"unknown truth kind {kind!r}")
    if T <= 0:
        raise ValueError("horizon must be positive")
    if 2 * N_obs > grid.K:
        warnings.warn(f"grid K={grid.K} is below 2*N_obs={2 * N_obs}")
    n_steps = int(round(T / dt))
    y = (np.array(state0.coeffs if state0 is not None else np.zeros(
        ((grid.dim,) if vector else ()) + grid.shape, dtype=complex)),)
    if vector:
        y = (leray_coeffs(grid, y[0]),)
    rec = _Recorder(system, N_obs, n_steps)
    system.hook = rec
    states, times = [y[0]], [0.0]
    for k in range(n_steps):
        y = system.advance(y, k, dt)
        if (k + 1) % keep_every == 0:
            states.append(y[0])
            times.append((k + 1) * dt)
    system.nonlinear(y, Tick(n_steps, 0, n_steps * dt))
    system.hook = None
    stream = ObservationStream(
        grid, N_obs, dt, np.array(rec.nodes), np.array(rec.node_rhs),
        np.array(rec.stage) if record_stages else None,
        np.array(rec.stage_rhs) if record_stages else None,
        vector=vector,
    )
    traj = Trajectory(grid, dt, keep_every, np.array(times), states, y[0], vector)
    return traj, stream


def _stationary_truth(config, g, state0, dt, N_obs, max_steps, tol, check_every):
    grid = config.grid
    system = TDSystem(config, g)
    y = (np.array(state0.coeffs) if state0 is not None else np.zeros(grid.shape, dtype=complex),)
    gnorm = max(np.sqrt(np.sum(np.abs(system.g(Tick(0, 0, 0.0))) ** 2)), 1e-300)
    for k in range(max_steps):
        if k % check_every == 0:
            r = system.rhs(y, Tick(0, 0, 0.0))[0]
            res = np.sqrt(np.sum(np.abs(r) ** 2)) / gnorm
            if res < tol:
                break
        y = system.advance(y, 0, dt)
    else:
        raise ConvergenceError(f"stationary truth did not converge in {max_steps} steps (residual {res:.3e})")
    r = system.rhs(y, Tick(0, 0, 0.0))[0]
    stream = ObservationStream(
        grid, N_obs, dt, pack_low(grid, y[0], N_obs)[None], pack_low(grid, r, N_obs)[None], static=True,
    )
    traj = Trajectory(grid, dt, 1, np.array([k * dt]), [y[0]], y[0])
    return traj, stream
