import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oscillab import sde
from oscillab.errors import InvalidParameters, NonFinite, RejectionRateExceeded, StepFailure
from oscillab.sde import RiccatiState, SystemParams


def test_noise_increment_moments():
    rng = np.random.default_rng(7)
    dt = 0.01
    draws = np.array([sde.white_noise_increment(dt, rng) for _ in range(10**6)])
    assert abs(draws.mean()) <= 3 * math.sqrt(dt / 1e6)
    assert draws.var() == pytest.approx(dt, rel=0.01)


def test_noise_increment_deterministic():
    a = [sde.white_noise_increment(0.1, np.random.default_rng(3)) for _ in range(5)]
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    s1 = [sde.white_noise_increment(0.1, r1) for _ in range(50)]
    s2 = [sde.white_noise_increment(0.1, r2) for _ in range(50)]
    assert s1 == s2
    assert len(set(a)) == 1


def test_params_validation():
    with pytest.raises(InvalidParameters):
        SystemParams(omega0=0.0, epsilon=1.0)
    with pytest.raises(InvalidParameters):
        SystemParams(omega0=1.0, epsilon=-1.0)
    with pytest.raises(InvalidParameters):
        SystemParams(omega0=1.0, epsilon=1.0, dt=0.0)
    with pytest.raises(InvalidParameters):
        SystemParams(omega0=1.0, epsilon=1.0, t_end=0.0)
    assert math.isinf(SystemParams(omega0=1.0, epsilon=0.0).lam)


@given(st.floats(0.05, 50.0), st.floats(0.01, 10.0))
def test_lambda_consistent(omega0, eps):
    p = SystemParams(omega0=omega0, epsilon=eps)
    assert p.lam == pytest.approx((omega0 / eps ** (1 / 3)) ** 2, rel=1e-12)


def test_from_lambda_exact():
    p = SystemParams.from_lambda(10.0)
    assert p.lam == 10.0
    assert p.epsilon == 1.0


def test_step_fixed_point():
    p = SystemParams(omega0=1.0, epsilon=0.0)
    s = sde.step_riccati(RiccatiState(0.0, 0.0, 0.0), p, 0.01, 0.37)
    assert (s.u1, s.log_u2) == (0.0, 0.0)
    assert s.t == 0.01


def test_step_by_hand():
    p = SystemParams(omega0=1.0, epsilon=0.0)
    s = sde.step_riccati(RiccatiState(0.1, 0.0, 0.0), p, 0.01, 0.0)
    assert s.u1 == pytest.approx(0.0999, abs=1e-15)
    assert s.log_u2 == pytest.approx(-0.002, abs=1e-15)


def test_step_nonfinite():
    p = SystemParams(omega0=1.0, epsilon=1.0)
    with pytest.raises(NonFinite):
        sde.step_riccati(RiccatiState(1e200, 0.0, 0.0), p, 1.0, 0.0)


def _em_path(p, dw_fine, refine):
    """Euler path on a Brownian path coarsened by ``refine``."""
    dw = dw_fine.reshape(-1, refine).sum(axis=1)
    h = p.dt * refine
    s = RiccatiState(0.0, math.log(p.omega0), 0.0)
    for w in dw:
        s = sde.step_riccati(s, p, h, w)
    return s.u1


def test_strong_convergence_on_fixed_paths():
    p = SystemParams(omega0=1.0, epsilon=1.0, dt=2.0**-12, t_end=1.0)
    rng = np.random.default_rng(2024)
    levels = (2**7, 2**6, 2**5, 2**4)
    errs = np.zeros(len(levels))
    for _ in range(20):
        dw = rng.normal(0.0, math.sqrt(p.dt), 2**12)
        ref = _em_path(p, dw, 1)
        errs += [abs(_em_path(p, dw, k) - ref) for k in levels]
    ratios = errs[:-1] / errs[1:]
    # additive noise: Euler is strong order 1, so each halving halves the error
    assert np.all(ratios > 1.6) and np.all(ratios < 2.6)
    order = np.log2(ratios).mean()
    assert order >= 0.5


@pytest.mark.parametrize("scheme", sorted(sde.SCHEMES))
def test_noiseless_trajectory(scheme):
    p = SystemParams(omega0=2.0, epsilon=0.0, t_end=5.0, dt=1e-2)
    tr = sde.integrate_trajectory(p, 1, [0.0, 1.0, 2.5, 5.0], scheme=scheme)
    np.testing.assert_allclose(tr.u1, 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.u2, 2.0, rtol=1e-12)
    np.testing.assert_allclose(tr.int_u1, 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.int_u2, 2.0 * tr.save_times, rtol=1e-12)
    r, gamma = sde.reconstruct_xi(tr)
    np.testing.assert_allclose(r, 1.0, rtol=1e-12)
    np.testing.assert_allclose(gamma, 2.0 * tr.save_times, rtol=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**32), st.floats(0.2, 20.0), st.sampled_from(["linear", "euler"]))
def test_positivity_and_wronskian(seed, lam, scheme):
    p = SystemParams.from_lambda(lam, t_end=3.0, dt=1e-2)
    tr = sde.integrate_trajectory(p, seed, np.linspace(0.1, 3.0, 30), scheme=scheme)
    assert np.all(tr.u2 > 0)
    assert np.all(np.diff(tr.int_u2) >= 0)
    r, _ = sde.reconstruct_xi(tr)
    np.testing.assert_allclose(r**2 * tr.u2, p.omega0, rtol=1e-13)


def test_log_wronskian_exact_for_linear_scheme():
    p = SystemParams.from_lambda(1.0, t_end=20.0, dt=1e-3)
    tr = sde.integrate_trajectory(p, 5, np.arange(1.0, 21.0))
    # |xi|**2 u2 = omega0 with |xi|**2 = exp(2 int u1)
    np.testing.assert_allclose(tr.log_u2 + 2 * tr.int_u1, math.log(p.omega0), atol=1e-9)


def test_dgamma_dt_matches_u2():
    p = SystemParams.from_lambda(1.0, t_end=10.0, dt=1e-3)
    ts = np.round(np.arange(1, 10001) * 1e-3, 12)
    tr = sde.integrate_trajectory(p, 3, ts)
    r, gamma = sde.reconstruct_xi(tr)
    rate = np.diff(gamma) / 1e-3
    mid = 0.5 * (tr.u2[1:] + tr.u2[:-1])
    rel = np.abs(rate - mid) / mid
    assert np.median(rel) < 1e-3
    # Omega0 / r**2 is u2 by construction
    np.testing.assert_allclose(p.omega0 / r**2, tr.u2, rtol=1e-13)


def test_functional_noiseless_values():
    ts = [0.5, 2.0]
    one = sde.integrate_trajectory(SystemParams(omega0=1.0, epsilon=0.0, t_end=2.0), 0, ts)
    four = sde.integrate_trajectory(SystemParams(omega0=4.0, epsilon=0.0, t_end=2.0), 0, ts)
    for t in ts:
        for a in (-0.5, 0.0, 1.3):
            assert sde.functional_I_alpha(one, a, t) == pytest.approx(1.0, abs=1e-12)
        assert sde.functional_I_alpha(four, 0.0, t) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_functional_alpha_derivative(seed):
    p = SystemParams.from_lambda(1.0, t_end=2.0, dt=1e-3)
    tr = sde.integrate_trajectory(p, seed, [2.0])
    d = 1e-4
    fd = (sde.functional_I_alpha(tr, d, 2.0) - sde.functional_I_alpha(tr, -d, 2.0)) / (2 * d)
    an = sde.functional_I_alpha_derivative(tr, 2.0)
    i0 = sde.functional_I_alpha(tr, 0.0, 2.0)
    # central difference: delta**2 / 6 times the third alpha-derivative, plus roundoff
    bound = d**2 / 6 * abs(tr.int_u1[0]) ** 3 * i0 + 1e-10 * i0
    assert abs(fd - an) <= 2 * bound


def test_save_time_validation():
    p = SystemParams.from_lambda(1.0, t_end=2.0)
    for bad in ([], [1.0, 0.5], [3.0]):
        with pytest.raises(InvalidParameters):
            sde.integrate_trajectory(p, 0, bad)
    with pytest.raises(InvalidParameters):
        sde.integrate_trajectory(p, 0, [1.0], scheme="rk4")


def test_single_trajectory_ensemble_matches_direct():
    p = SystemParams.from_lambda(1.0, t_end=3.0, dt=1e-3, n_traj=1, seed=9)
    ens = sde.ensemble_run(p, [1.0, 3.0])
    tr = sde.integrate_trajectory(p, sde.derive_seed(9, 0), [1.0, 3.0])
    for name in ("u1", "log_u2", "int_u1", "int_u2"):
        assert np.array_equal(getattr(ens, name)[0], getattr(tr, name))
    assert ens[0].seed_used == tr.seed_used


def test_ensemble_deterministic_and_thread_independent():
    p = SystemParams.from_lambda(1.0, t_end=2.0, dt=1e-3, n_traj=200, seed=4)
    a = sde.ensemble_run(p, [1.0, 2.0], threads=1)
    b = sde.ensemble_run(p, [1.0, 2.0], threads=1)
    c = sde.ensemble_run(p, [1.0, 2.0], threads=3)
    for name in ("u1", "log_u2", "int_u1", "int_u2", "status"):
        x = getattr(a, name)
        assert x.tobytes() == getattr(b, name).tobytes() == getattr(c, name).tobytes()
    # distinct streams per trajectory
    assert len(np.unique(a.u1[:, 0])) == 200


def test_ensemble_table_rows():
    p = SystemParams.from_lambda(1.0, t_end=1.0, n_traj=3)
    ens = sde.ensemble_run(p, [0.5, 1.0])
    rows = sde.ensemble_table(ens)
    assert len(rows) == 6
    assert rows[1]["t"] == 1.0 and rows[1]["traj"] == 0


def test_reject_scheme_fails_near_caustics():
    p = SystemParams.from_lambda(1.0, t_end=20.0, dt=1e-2, n_traj=100, seed=1)
    ens = sde.ensemble_run(p, [20.0], scheme="euler-reject", max_reject_rate=1.0)
    assert ens.n_rejected > 0
    bad = int(np.flatnonzero(~ens.accepted)[0])
    with pytest.raises(StepFailure) as exc:
        sde.integrate_trajectory(p, sde.derive_seed(1, bad), [20.0], scheme="euler-reject")
    assert exc.value.trajectory.rejected
    tr = sde.integrate_trajectory(p, sde.derive_seed(1, bad), [20.0], strict=False,
                                  scheme="euler-reject")
    assert tr.reason == "step halving reached dt_min"
    with pytest.raises(RejectionRateExceeded):
        sde.ensemble_run(p, [20.0], scheme="euler-reject")


def test_default_scheme_has_no_rejections():
    p = SystemParams.from_lambda(1.0, t_end=20.0, dt=1e-2, n_traj=100, seed=1)
    ens = sde.ensemble_run(p, [20.0])
    assert ens.n_rejected == 0


@pytest.mark.slow
def test_mean_u2_matches_density_moment():
    from oscillab import fpe
    from oscillab.observables import weighted_moment
    p = SystemParams(omega0=1.0, epsilon=1.0, t_end=10.0, dt=1e-3, n_traj=100_000, seed=42)
    u2 = sde.ensemble_run(p, [10.0]).at(10.0)[1]
    se = u2.std(ddof=1) / math.sqrt(u2.size)
    q, _ = fpe.evolve(1.0, grid=fpe.build_grid(), times=[10.0], kind="P0")[0]
    pde = weighted_moment(q, 0, 1.0)
    assert abs(u2.mean() - pde) <= 3 * math.hypot(se, 0.0)
