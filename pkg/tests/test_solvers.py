import math

import numpy as np
import pytest
from scipy.linalg import expm

from forcerecon.errors import BlowUpError, ObservationGapError
from forcerecon.forcing import PowerLawTail, QuasiFiniteForce, ZeroMap, raise_rank
from forcerecon.solvers import (
    NSEConfig,
    NudgeParams,
    NudgedTDSystem,
    NudgingNSESystem,
    NudgingTDSystem,
    ObservationStream,
    TDConfig,
    TDSystem,
    Tick,
    check_timestep,
    fd_derivative,
    generate_truth,
    step_nse,
    step_nudged_nse,
    step_nudged_td,
    step_nudging_td_system,
    step_td,
)
from forcerecon.spectral import (
    ScalarField,
    VectorField,
    WaveGrid,
    pack_low,
    project,
    random_scalar,
    random_vector,
    unpack_low,
)


def zero_stream(grid, N, dt, n, vector=False):
    shape = ((grid.dim,) if vector else ()) + (len(grid.low_index(N)),)
    return ObservationStream(grid, N, dt, np.zeros((n + 1,) + shape, complex), vector=vector)


def tg(grid, amp=1.0):
    return VectorField.from_function(grid, lambda x, y: (amp * np.sin(x) * np.cos(y), -amp * np.cos(x) * np.sin(y)))


def test_heat_decay_is_exact(grid8):
    cfg = TDConfig(0.7, grid8)
    f = ScalarField.from_modes(grid8, {(3, 0): 1.0})
    out = step_td(f, cfg, None, 0.0, 0.01)
    assert abs(out.coeffs[8 + 3, 8] - math.exp(-0.7 * 9 * 0.01)) < 1e-12


def test_manufactured_td_solution(grid8):
    kap = 0.5
    v = VectorField.from_function(grid8, lambda x, y: (np.sin(y), 0 * x))
    cfg = TDConfig(kap, grid8, v)

    def exact(t):
        return ScalarField.from_function(grid8, lambda x, y: np.exp(-t) * np.sin(x))

    def g(t):
        return ScalarField.from_function(
            grid8, lambda x, y: np.exp(-t) * ((kap - 1) * np.sin(x) + np.sin(y) * np.cos(x)))

    sys_ = TDSystem(cfg, g)
    y = (exact(0).coeffs,)
    for k in range(50):
        y = sys_.advance(y, k, 0.02)
    assert np.abs(y[0] - exact(1).coeffs).max() < 1e-8


def test_taylor_green_decay(grid8):
    u0 = tg(grid8)
    cfg = NSEConfig(0.5, grid8)
    u = u0
    for k in range(20):
        u = step_nse(u, cfg, None, k * 0.05, 0.05)
    assert np.abs(u.coeffs - math.exp(-2 * 0.5 * 1.0) * u0.coeffs).max() < 1e-14


def test_zero_stays_zero(grid8):
    u = VectorField(grid8, np.zeros((2,) + grid8.shape, complex))
    assert np.abs(step_nse(u, NSEConfig(1.0, grid8), None, 0.0, 0.01).coeffs).max() == 0


def test_nudged_low_mode_decay(grid8):
    cfg = TDConfig(1.0, grid8)
    obs = zero_stream(grid8, 3, 0.01, 4)
    p = NudgeParams.sieve(5.0, 3)
    low = ScalarField.from_modes(grid8, {(2, 0): 1.0})
    high = ScalarField.from_modes(grid8, {(4, 0): 1.0})
    a = step_nudged_td(low, cfg, None, obs, p, 0.0, 0.01)
    b = step_nudged_td(high, cfg, None, obs, p, 0.0, 0.01)
    assert abs(a.coeffs[10, 8] - math.exp(-(4 + 5) * 0.01)) < 1e-12
    assert abs(b.coeffs[12, 8] - math.exp(-16 * 0.01)) < 1e-12


def test_nudged_nse_linear_oracle(grid8):
    obs = zero_stream(grid8, 3, 0.01, 4, vector=True)
    c = np.zeros((2,) + grid8.shape, complex)
    c[1, 10, 8] = c[1, 6, 8] = 1.0
    v = VectorField._raw(grid8, c)
    out = step_nudged_nse(v, NSEConfig(2.0, grid8), None, obs, NudgeParams.sieve(3.0, 3), 0.0, 0.01, nonlinear=False)
    assert abs(out.coeffs[1, 10, 8] - math.exp(-(2.0 * 4 + 3.0) * 0.01)) < 1e-12


def _fixed_point_gap(run, dts=(0.01, 0.005)):
    """Gaps after t = 0.2 for two step sizes; ETDRK4 with a different linear split
    is a different fourth-order scheme, so the gap must shrink like dt^4."""
    return [run(dt) for dt in dts]


def _assert_fourth_order(gaps, tol):
    assert gaps[0] < tol
    assert gaps[0] / gaps[1] > 12


def test_nudged_fixed_point(grid16):
    def run(dt):
        rng = np.random.default_rng(5)
        cfg = TDConfig(1.0, grid16, tg(grid16, 0.3))
        g = random_scalar(grid16, rng, N=3)
        traj, obs = generate_truth("td", cfg, g, random_scalar(grid16, rng, N=5), 0.2, dt, 4)
        sys_ = NudgedTDSystem(cfg, g, obs, 10.0, 4)
        y = (traj.states[0],)
        for k in range(obs.n_steps):
            y = sys_.advance(y, k, dt)
        return np.abs(y[0] - traj.final).max()

    _assert_fourth_order(_fixed_point_gap(run), 1e-6)


def test_nudging_scalar_shadow_matches_matrix_exponential(grid8):
    kap, mu1, mu2, N = 0.8, 6.0, 5.0, 3
    cfg = TDConfig(kap, grid8)
    dt, n = 0.01, 150
    obs = zero_stream(grid8, N, dt, n)
    sys_ = NudgingTDSystem(cfg, ZeroMap(rank=N), obs, mu1, mu2, N)
    psi = ScalarField.from_modes(grid8, {(2, 1): 0.4}).coeffs
    l = ScalarField.from_modes(grid8, {(2, 1): -0.3}).coeffs
    y = (psi, l)
    for k in range(n):
        y = sys_.advance(y, k, dt)
    # low modes of psi are diffused through the observation, so the error pair
    # (p, e) obeys p' = e - mu1 p, e' = -mu2 p
    A = np.array([[-mu1, 1.0], [-mu2, 0.0]])
    want = expm(A * n * dt) @ np.array([0.4, -0.3])
    assert abs(y[0][10, 9] - want[0]) < 1e-8
    assert abs(y[1][10, 9] - want[1]) < 1e-8


def test_nudging_pure_heat_when_unforced(grid8):
    cfg = TDConfig(1.0, grid8)
    obs = zero_stream(grid8, 2, 0.01, 5)
    psi = ScalarField.from_modes(grid8, {(3, 1): 1.0})
    l = ScalarField(grid8, np.zeros(grid8.shape, complex))
    a, b = step_nudging_td_system(psi, l, cfg, ZeroMap(rank=2), obs, NudgeParams.nudging(1.0, 1e-12, 2), 0.0, 0.01)
    assert abs(a.coeffs[11, 9] - math.exp(-10 * 0.01)) < 1e-12
    assert np.abs(b.coeffs).max() == 0


def test_nudging_fixed_point_td(grid16):
    fm = PowerLawTail(rank=2, exponent=2.0)

    def run(dt):
        rng = np.random.default_rng(6)
        cfg = TDConfig(1.0, grid16, tg(grid16, 0.3))
        g = QuasiFiniteForce(random_scalar(grid16, rng, N=2), fm)
        traj, obs = generate_truth("td", cfg, g, random_scalar(grid16, rng, N=5), 0.2, dt, 2)
        sys_ = NudgingTDSystem(cfg, fm, obs, 20.0, 64.0, 2)
        l0 = project(g.at(), 2, "low").coeffs
        y = (traj.states[0], l0)
        for k in range(obs.n_steps):
            y = sys_.advance(y, k, dt)
        return max(np.abs(y[0] - traj.final).max(), np.abs(y[1] - l0).max())

    _assert_fourth_order(_fixed_point_gap(run), 1e-6)


def test_nudging_fixed_point_nse(grid16):
    fm = PowerLawTail(rank=2, exponent=2.0)

    def run(dt):
        rng = np.random.default_rng(7)
        cfg = NSEConfig(1.0, grid16)
        g = QuasiFiniteForce(random_vector(grid16, rng, N=2), fm)
        traj, obs = generate_truth("nse", cfg, g, random_vector(grid16, rng, N=4), 0.2, dt, 3)
        sys_ = NudgingNSESystem(cfg, raise_rank(fm, 3), obs, 20.0, 64.0, 3)
        l0 = project(g.at(), 3, "low").coeffs
        y = (traj.states[0], l0)
        for k in range(obs.n_steps):
            y = sys_.advance(y, k, dt)
        return max(np.abs(y[0] - traj.final).max(), np.abs(y[1] - l0).max())

    _assert_fourth_order(_fixed_point_gap(run), 1e-5)


def test_unforced_truth_has_zero_observations(grid8):
    traj, obs = generate_truth("td", TDConfig(1.0, grid8), None, None, 0.05, 0.01, 3)
    assert np.abs(obs.low).max() == 0 and np.abs(obs.rhs_low).max() == 0


def test_heat_truth_rhs_identity(grid16, rng):
    kap = 0.6
    traj, obs = generate_truth("td", TDConfig(kap, grid16), None, random_scalar(grid16, rng), 0.1, 0.01, 5)
    k2 = pack_low(grid16, grid16.k2, 5)
    assert np.abs(obs.rhs_low + kap * k2 * obs.low).max() < 1e-12


def test_stationary_truth_closed_form(grid16, rng):
    kap = 0.5
    g = random_scalar(grid16, rng, N=4)
    traj, obs = generate_truth("td_stationary", TDConfig(kap, grid16), g, None, 0.0, 0.05, 4, tol=1e-13)
    want = pack_low(grid16, g.coeffs * grid16.inv_k2 / kap, 4)
    assert np.abs(obs.low[0] - want).max() < 1e-10
    assert obs.static


def test_fd_derivative_order():
    errs = []
    for dt in (0.02, 0.01):
        t = dt * np.arange(9)
        s = np.exp(-3 * t)
        errs.append(abs(fd_derivative(s, 4, dt) + 3 * np.exp(-3 * t[4])))
    assert math.log2(errs[0] / errs[1]) > 3.7
    assert fd_derivative(np.ones(6), 0, 0.1) == pytest.approx(0, abs=1e-12)


def test_stream_derivative_without_rhs_matches_heat(grid8):
    kap, dt = 1.0, 0.005
    f = ScalarField.from_modes(grid8, {(2, 0): 1.0})
    traj, obs = generate_truth("td", TDConfig(kap, grid8), None, f, 0.05, dt, 2)
    bare = ObservationStream(grid8, 2, dt, obs.low)
    d = bare.derivative(Tick(5, 0, 5 * dt))
    assert abs(d[10, 8] + 4 * kap * obs.value(Tick(5, 0, 0))[10, 8]) < 1e-7
    # recorded derivative is returned verbatim
    assert np.array_equal(obs.packed_derivative(Tick(3, 0, 0)), obs.rhs_low[3])


def test_stream_restriction_and_shift(grid16, rng):
    traj, obs = generate_truth("td", TDConfig(1.0, grid16), random_scalar(grid16, rng, N=3),
                               random_scalar(grid16, rng), 0.05, 0.01, 6)
    r = obs.restricted(3)
    for i in range(len(obs)):
        assert np.array_equal(r.value(Tick(i, 0, 0)), project(obs.snapshot(i), 3, "low").coeffs)
    s = obs.shifted(2)
    assert np.array_equal(s.low[0], obs.low[2]) and s.t0 == pytest.approx(0.02)
    with pytest.raises(ObservationGapError):
        obs.shifted(10)
    with pytest.raises(ObservationGapError):
        obs.value(Tick(5, 1, 0.0))
    with pytest.raises(ValueError):
        obs.restricted(7)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_detected(grid8):
    cfg = NSEConfig(1e-6, grid8)
    u = VectorField._raw(grid8, random_vector(grid8, np.random.default_rng(0)).coeffs * 1e150)
    with pytest.raises(BlowUpError):
        for k in range(50):
            u = step_nse(u, cfg, None, k, 1.0)


def test_cfl_check(grid16):
    cfg = TDConfig(1.0, grid16, tg(grid16, 50.0))
    with pytest.raises(ValueError):
        check_timestep(cfg, 0.1)
    with pytest.warns(UserWarning):
        assert not check_timestep(cfg, 0.1, allow=True)
    assert check_timestep(cfg, 1e-4)


def test_velocity_must_be_solenoidal(grid8):
    v = VectorField.from_function(grid8, lambda x, y: (np.sin(x), 0 * y))
    with pytest.raises(ValueError):
        TDConfig(1.0, grid8, v)


def test_time_dependent_velocity_shift(grid8):
    base = tg(grid8)
    cfg = TDConfig(1.0, grid8, lambda t: VectorField._raw(grid8, math.cos(t) * base.coeffs))
    sh = cfg.shifted(math.pi)
    assert np.allclose(sh.velocity_at(0.0).coeffs, -base.coeffs)


def test_truth_keep_every(grid8, rng):
    traj, obs = generate_truth("td", TDConfig(1.0, grid8), None, random_scalar(grid8, rng), 0.1, 0.01, 2, keep_every=5)
    assert len(traj.states) == 3 and np.allclose(traj.times, [0, 0.05, 0.1])
    with pytest.raises(KeyError):
        traj.state_at_step(3)
    assert obs.n_steps == 10
    assert np.allclose(unpack_low(grid8, obs.low[10], 2), project(ScalarField._raw(grid8, traj.final), 2, "low").coeffs)


def test_three_dimensional_transport(rng):
    g = WaveGrid(3, 6)
    v = VectorField.from_function(g, lambda x, y, z: (np.sin(z) + np.cos(y), np.sin(x) + np.cos(z), np.sin(y) + np.cos(x)))
    cfg = TDConfig(1.0, g, VectorField._raw(g, 0.2 * v.coeffs))
    phi = random_scalar(g, rng, N=3)
    e0 = float(np.sum(np.abs(phi.coeffs) ** 2))
    for k in range(5):
        phi = step_td(phi, cfg, None, k * 0.01, 0.01)
    assert float(np.sum(np.abs(phi.coeffs) ** 2)) < e0
