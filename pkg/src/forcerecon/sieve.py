"""Sieve iterations: synchronise, splice observations, read off the large-scale
force from the balance law, complete it with the enslaving map, repeat.

Stages live on a common integer time lattice (multiples of dt).  Stage j starts
at absolute step s_j and runs until a common end step, so every later stage
finds the force trajectory it needs already computed: stage j + 1 reads the
output of stage j shifted by t_{j+1} (the tau operator) and observations
shifted by s_{j+1} (the sigma operator).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ObservationGapError
from .forcing import QuasiFiniteForce, raise_rank
from .solvers import (
    ConstantForce,
    LatticeForce,
    NudgedNSESystem,
    NudgedTDSystem,
    ObservationStream,
    StageLattice,
    Tick,
    as_force,
)
from .spectral import (
    ScalarField,
    VectorField,
    advect_coeffs,
    band_physical,
    nse_bilinear_coeffs,
    pack_low,
    seminorm_coeffs,
    unpack_low,
)


@dataclass(frozen=True)
class TimeShiftLedger:
    """Stage increments t_1, t_2, ... as whole numbers of steps."""

    dt: float
    increments: tuple

    @classmethod
    def uniform(cls, dt, t_star, stages):
        m = steps_of(t_star, dt)
        return cls(dt, (m,) * stages)

    def shift(self, j):
        """s_j = t_1 + ... + t_j in steps (s_0 = 0)."""
        return sum(self.increments[:j])

    def increment(self, j):
        """t_j in steps (j >= 1)."""
        return self.increments[j - 1]

    def shift_time(self, j):
        return self.shift(j) * self.dt


def steps_of(t, dt):
    m = round(t / dt)
    if m <= 0 or abs(m * dt - t) > 1e-9 * max(t, dt):
        raise ValueError(f"time {t} is not a positive integer multiple of dt={dt}")
    return int(m)


# ------------------------------------------------------------------ recovery


def _recover_td(grid, kappa, N, v_phys, p_obs, d_obs, psi):
    low = grid.low_mask(N)
    phi = p_obs + psi * ~low
    out = d_obs + kappa * grid.k2 * p_obs
    if v_phys is not None:
        out = out + advect_coeffs(grid, v_phys, phi) * low
    return out * low


def _recover_nse(grid, nu, N, p_obs, d_obs, v):
    low = grid.low_mask(N)
    u = p_obs + v * ~low
    out = d_obs + nu * grid.k2 * p_obs + nse_bilinear_coeffs(grid, u, u) * low
    return out * low


def _obs_at(obs, N, tick):
    p = obs.value(tick)
    d = obs.derivative(tick)
    if obs.N_obs != N:
        low = obs.grid.low_mask(N)
        p, d = p * low, d * low
    return p, d


def recover_large_scale_td(obs, psi_high, config, N=None):
    """l^{(j+1)} at every node of ``obs`` given the matching high-mode states.

    ``psi_high`` is a sequence of coefficient arrays or fields aligned with the
    samples of ``obs``; only their Q_N part is used.  The velocity is read at
    the stream's sample times (pass a shifted config for sigma_j v).
    Returns a list of ScalarFields supported in |k| <= N.
    """
    N = obs.N_obs if N is None else N
    grid = config.grid
    out = []
    for i, psi in enumerate(psi_high):
        c = psi.coeffs if hasattr(psi, "coeffs") else psi
        tick = Tick(i, 0, i * obs.dt)
        p, d = _obs_at(obs, N, tick)
        v = config.velocity_phys(i * obs.dt)
        out.append(ScalarField._raw(grid, _recover_td(grid, config.kappa, N, v, p, d, c)))
    return out


def recover_large_scale_nse(obs, v_high, config, N=None):
    """NSE analogue of :func:`recover_large_scale_td`."""
    N = obs.N_obs if N is None else N
    grid = config.grid
    out = []
    for i, v in enumerate(v_high):
        c = v.coeffs if hasattr(v, "coeffs") else v
        p, d = _obs_at(obs, N, Tick(i, 0, i * obs.dt))
        out.append(VectorField._raw(grid, _recover_nse(grid, config.nu, N, p, d, c)))
    return out


def obs_time_derivative(stream, t_index):
    """d/dt P_N obs at sample ``t_index`` (exact when recorded, else 4th-order FD)."""
    if stream.rhs_low is None and not stream.static and len(stream) < 5:
        raise ValueError("stream too short for the finite-difference stencil")
    return stream.field(stream.packed_derivative(Tick(t_index, 0, t_index * stream.dt)))


# -------------------------------------------------------------------- records


@dataclass
class StageRecord:
    stage: int
    start_step: int
    n_steps: int
    force: StageLattice
    terminal: np.ndarray
    handoff: np.ndarray | None
    rows: list = field(default_factory=list)
    sup_model_err: float = math.nan
    sup_model_err_L2: float = math.nan
    sup_sync_err: float = math.nan
    sup_state_err: float = math.nan
    mean_force: np.ndarray | None = None
    force_deviation: float = math.nan


@dataclass
class SieveRun:
    kind: str
    ledger: TimeShiftLedger
    N: int
    mu: float
    t_star: float
    T_win: float
    stages: list = field(default_factory=list)

    def model_errors(self):
        return np.array([s.sup_model_err for s in self.stages])

    def sync_errors(self):
        return np.array([s.sup_sync_err for s in self.stages])

    def state_errors(self):
        return np.array([s.sup_state_err for s in self.stages])

    def ratios(self, which="model"):
        e = {"model": self.model_errors(), "sync": self.sync_errors(), "state": self.state_errors()}[which]
        return e[1:] / e[:-1]

    def force_at(self, stage, step, sub=0):
        """Recovered low-mode force f^{(stage+1)} at a local step of that stage."""
        rec = self.stages[stage]
        return rec.force.get(step, sub)

    def csv_rows(self):
        for s in self.stages:
            for r in s.rows:
                yield {
                    "stage": s.stage,
                    "t": r["t"],
                    "sync_err_L2": r.get("sync_L2", math.nan),
                    "sync_err_H1": r.get("sync_H1", math.nan),
                    "model_err_Hm1": r.get("model_Hm1", math.nan),
                    "model_err_L2": r.get("model_L2", math.nan),
                    "sup_window_model_err": s.sup_model_err,
                }


@dataclass
class TwinTruth:
    """What the twin scores against: the truth trajectory and the true force."""

    trajectory: object = None
    force: object = None


def _true_force(truth, grid, vector):
    if truth is None or truth.force is None:
        return None
    return as_force(truth.force, grid, vector=vector)


# ---------------------------------------------------------------- main driver


def run_sieve(kind, config, fmap, obs, f0, state0, t_star, stages, mu, dt=None, T_win=None,
              truth=None, N=None, nonlinear=True):
    """Run the time-dependent Sieve for 'td' or 'nse'.

    ``obs`` is a lockstep ObservationStream; ``f0`` any force description for
    stage 0 (quasi-finite of the map's rank); ``state0`` the guess for the
    unobserved scales (None for zero).  Returns a :class:`SieveRun`.
    """
    if kind not in ("td", "nse"):
        raise ValueError(f"unknown sieve kind {kind!r}")
    if stages < 1:
        raise ValueError("need at least one stage")
    vector = kind == "nse"
    grid = config.grid
    dt = obs.dt if dt is None else float(dt)
    if abs(dt - obs.dt) > 1e-12 * dt:
        raise ValueError("solver dt must match the observation spacing")
    N = obs.N_obs if N is None else int(N)
    m = steps_of(t_star, dt)
    W = m * 2 if T_win is None else steps_of(T_win, dt)
    if W < m:
        raise ValueError("window must be at least t_star long")
    ledger = TimeShiftLedger(dt, (m,) * stages)
    family = raise_rank(fmap, N) if fmap.rank < N else fmap
    end_step = ledger.shift(stages - 1) + W
    if end_step > obs.n_steps:
        raise ObservationGapError(f"observations cover {obs.n_steps} steps, the sieve needs {end_step}")
    g_true = _true_force(truth, grid, vector)
    traj = None if truth is None else truth.trajectory
    low = grid.low_mask(N)
    run = SieveRun(kind, ledger, N, float(mu), m * dt, W * dt)

    shape = ((grid.dim,) if vector else ()) + grid.shape
    s0 = np.zeros(shape, dtype=complex) if state0 is None else np.asarray(
        state0.coeffs if hasattr(state0, "coeffs") else state0)
    force = as_force(f0, grid, vector=vector)
    y = None
    for j in range(stages):
        start = ledger.shift(j)
        n = end_step - start
        obs_j = obs.shifted(start)
        if kind == "td":
            cfg_j = config.shifted(start * dt)
            system = NudgedTDSystem(cfg_j, force, obs_j, mu, N)
        else:
            system = NudgedNSESystem(config, force, obs_j, mu, N, nonlinear)
        if j == 0:
            p0, _ = _obs_at(obs_j, N, Tick(0, 0, 0.0))
            y = (p0 + s0 * ~low,)
        nodes = np.zeros((n + 1,) + shape[:-grid.dim] + (len(grid.low_index(N)),), dtype=complex)
        stage_vals = np.zeros((n, 3) + nodes.shape[1:], dtype=complex)

        def hook(state, tick, _n, system=system, nodes=nodes, stage_vals=stage_vals):
            (psi,) = state
            p, d = _obs_at(system.obs, N, tick)
            if kind == "td":
                v = system.config.velocity_phys(tick.t)
                l = _recover_td(grid, config.kappa, N, v, p, d, psi)
            else:
                l = _recover_nse(grid, config.nu, N, p, d, psi)
            packed = pack_low(grid, l, N)
            if tick.sub == 0:
                nodes[tick.step] = packed
            else:
                stage_vals[tick.step, tick.sub - 1] = packed

        system.hook = hook
        rec = StageRecord(j, start, n, StageLattice(nodes, stage_vals), None, None)
        for k in range(n):
            if k == m and j + 1 < stages:
                rec.handoff = y[0].copy()
            y_prev = y[0]
            y = system.advance(y, k, dt)
            _score(rec, k, y_prev, nodes[k], start, dt, grid, N, family, g_true, traj, low)
        system.nonlinear(y, Tick(n, 0, n * dt))
        _score(rec, n, y[0], nodes[n], start, dt, grid, N, family, g_true, traj, low)
        rec.terminal = y[0]
        _finalise(rec, m, grid, N, family)
        run.stages.append(rec)
        force = LatticeForce(rec.force, grid, N, family, offset=m)
        if j + 1 < stages:
            y = (rec.handoff,)
    return run


def _score(rec, k, psi, l_packed, start, dt, grid, N, family, g_true, traj, low):
    row = {"t": (start + k) * dt, "local_step": k}
    if traj is not None:
        try:
            truth = traj.state_at_step(start + k)
        except (KeyError, IndexError):
            truth = None
        if truth is not None:
            z = psi - truth
            row["sync_L2"] = seminorm_coeffs(grid, z, 0.0)
            row["sync_H1"] = seminorm_coeffs(grid, z, 1.0)
            row["state_H1"] = seminorm_coeffs(grid, z * ~low, 1.0)
            row["state_L2"] = seminorm_coeffs(grid, z * ~low, 0.0)
    rec.rows.append(row)
    if g_true is None:
        return
    l = unpack_low(grid, l_packed, N)
    f = l + family.apply_coeffs(grid, l)
    g = g_true(Tick(start + k, 0, (start + k) * dt))
    h = f - g
    row["model_Hm1"] = seminorm_coeffs(grid, h, -1.0)
    row["model_L2"] = seminorm_coeffs(grid, h, 0.0)


def _finalise(rec, m, grid, N, family):
    tail = [r for r in rec.rows if r["local_step"] >= m] or rec.rows
    for key, attr in (("model_Hm1", "sup_model_err"), ("model_L2", "sup_model_err_L2"),
                      ("sync_L2", "sup_sync_err"), ("state_H1", "sup_state_err")):
        vals = [r[key] for r in tail if key in r]
        if vals:
            setattr(rec, attr, float(max(vals)))
    nodes = rec.force.nodes[m:] if len(rec.force.nodes) > m else rec.force.nodes
    rec.mean_force = nodes.mean(axis=0)
    dev = np.abs(nodes - rec.mean_force).max() if len(nodes) else 0.0
    scale = np.abs(rec.mean_force).max(initial=0.0)
    rec.force_deviation = float(dev / scale) if scale > 0 else float(dev)


# ---------------------------------------------------------------- stationary


def stationary_sieve(config, fmap, single_obs, f0, stages, mu, t_march, dt, state0=None, tol=None,
                     max_steps=100000, g_true=None, truth_state=None, N=None):
    """Sieve for a steady problem observed once.

    Each stage marches the nudged equation against the fixed observation for
    ``t_march`` (or, with ``tol``, until the relative residual drops below it),
    keeps only the final state, and reads the force off the stationary balance.
    """
    if not config.is_static:
        raise ValueError("stationary sieve needs a time-independent velocity")
    grid = config.grid
    if isinstance(single_obs, ObservationStream):
        obs = single_obs
    else:
        Nobs = fmap.rank if N is None else N
        obs = ObservationStream(grid, Nobs, dt, pack_low(grid, single_obs.coeffs, Nobs)[None], static=True)
    if not obs.static:
        obs = ObservationStream(grid, obs.N_obs, dt, obs.low[:1], static=True)
    N = obs.N_obs if N is None else int(N)
    family = raise_rank(fmap, N) if fmap.rank < N else fmap
    low = grid.low_mask(N)
    p_obs, _ = _obs_at(obs, N, Tick(0, 0, 0.0))
    s0 = np.zeros(grid.shape, dtype=complex) if state0 is None else np.asarray(
        state0.coeffs if hasattr(state0, "coeffs") else state0)
    phi = p_obs + s0 * ~low
    f = as_force(f0, grid)(Tick(0, 0, 0.0))
    v = config.velocity_phys(0.0)
    n_fixed = steps_of(t_march, dt)
    gt = None if g_true is None else as_force(g_true, grid)(Tick(0, 0, 0.0))
    run = SieveRun("td_stationary", TimeShiftLedger(dt, (n_fixed,) * stages), N, float(mu), t_march, t_march)
    for j in range(stages):
        system = NudgedTDSystem(config, ConstantForce(f), obs, mu, N)
        y = (phi,)
        steps = 0
        limit = max_steps if tol is not None else n_fixed
        while steps < limit:
            y = system.advance(y, 0, dt)
            steps += 1
            if tol is not None and steps >= n_fixed and steps % 10 == 0:
                r = system.rhs(y, Tick(0, 0, 0.0))[0]
                scale = max(np.sqrt(np.sum(np.abs(y[0]) ** 2)), 1e-300)
                if np.sqrt(np.sum(np.abs(r) ** 2)) < tol * scale:
                    break
        else:
            if tol is not None:
                raise ConvergenceError(f"synchronisation march of stage {j} did not settle in {limit} steps")
        phi = p_obs + y[0] * ~low
        l = _recover_td(grid, config.kappa, N, v, p_obs, np.zeros_like(p_obs), phi)
        f = l + family.apply_coeffs(grid, l)
        rec = StageRecord(j, 0, steps, StageLattice(pack_low(grid, l, N)[None]), y[0], None)
        if gt is not None:
            h = f - gt
            rec.sup_model_err = seminorm_coeffs(grid, h, -1.0)
            rec.sup_model_err_L2 = seminorm_coeffs(grid, h, 0.0)
            rec.rows.append({"t": 0.0, "local_step": steps, "model_Hm1": rec.sup_model_err,
                             "model_L2": rec.sup_model_err_L2})
        if truth_state is not None:
            ts = truth_state.coeffs if hasattr(truth_state, "coeffs") else truth_state
            rec.sup_sync_err = seminorm_coeffs(grid, y[0] - ts, 0.0)
            rec.sup_state_err = seminorm_coeffs(grid, (phi - ts) * ~low, 1.0)
            if rec.rows:
                rec.rows[-1].update(sync_L2=rec.sup_sync_err, sync_H1=seminorm_coeffs(grid, y[0] - ts, 1.0))
        rec.mean_force = pack_low(grid, l, N)
        rec.force_deviation = 0.0
        run.stages.append(rec)
    return run
