import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_hermite

from oscillab import quantum as qs
from oscillab.errors import NonPositiveTrace, NotHermitian
from oscillab.quantum import OscState
from oscillab.sde import SystemParams, ensemble_run


def hermite_sum(n, y):
    # explicit sum: n! sum_m (-1)**m (2y)**(n-2m) / (m! (n-2m)!)
    return math.factorial(n) * sum(
        (-1) ** m * (2 * y) ** (n - 2 * m) / (math.factorial(m) * math.factorial(n - 2 * m))
        for m in range(n // 2 + 1))


@pytest.fixture(scope="module")
def noisy_states():
    out = []
    for lam in (0.5, 1.0, 2.0):
        p = SystemParams.from_lambda(lam, t_end=6.0, dt=1e-3, n_traj=4, seed=17)
        ens = ensemble_run(p, [0.7, 2.9, 6.0])
        for tr in ens:
            out.extend(OscState.from_trajectory(tr, t) for t in (0.7, 2.9, 6.0))
    return out


def test_hermite_base_cases():
    assert qs.hermite_h(0, 0.3) == 1.0
    assert qs.hermite_h(1, 0.3) == pytest.approx(0.6)
    assert qs.hermite_h(2, 3.0) == 34.0
    with pytest.raises(ValueError):
        qs.hermite_h(61, 0.0)


def test_hermite_ten_against_sum():
    assert qs.hermite_h(10, 1.7) == pytest.approx(hermite_sum(10, 1.7), rel=1e-10)


@given(st.integers(0, 30), st.floats(-4, 4))
def test_hermite_matches_scipy(n, y):
    ref = eval_hermite(n, y)
    assert qs.hermite_h(n, y) == pytest.approx(ref, rel=1e-10, abs=1e-10 * 2.0**n)


def test_hermite_vectorised():
    y = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(qs.hermite_h(5, y), eval_hermite(5, y), rtol=1e-12)


@pytest.mark.parametrize("n", [0, 1, 2, 5])
def test_noiseless_state_is_eigenfunction(n):
    om, t = 1.7, 0.9
    s = OscState.noiseless(om, t)
    x = np.linspace(-4, 4, 41)
    phi = ((om / math.pi) ** 0.25 / math.sqrt(2.0**n * math.factorial(n))
           * np.exp(-om * x * x / 2) * eval_hermite(n, math.sqrt(om) * x))
    np.testing.assert_allclose(qs.psi_stc(n, x, s), np.exp(-1j * (n + 0.5) * om * t) * phi,
                               atol=1e-14)


def test_psi_at_origin_is_prefactor(noisy_states):
    s = noisy_states[4]
    v = qs.psi_stc(0, 0.0, s)
    assert abs(v) == pytest.approx((s.u2 / math.pi) ** 0.25, rel=1e-14)


def test_ground_density_integrates_to_one(noisy_states):
    for s in noisy_states[::5]:
        X = 12 / math.sqrt(s.u2)
        x = np.linspace(-X, X, 4001)
        rho = np.abs(qs.psi_stc(0, x, s)) ** 2
        assert np.sum(qs.trapezoid_weights(x) * rho) == pytest.approx(1.0, abs=1e-10)


def test_gram_noiseless_identity():
    G = qs.gram_matrix(OscState.noiseless(1.0, 3.0), 12)
    np.testing.assert_allclose(G, np.eye(13), atol=1e-10)
    assert qs.gram_matrix(OscState.noiseless(1.0), 0) == pytest.approx(np.array([[1.0]]))


def test_gram_noisy_identity(noisy_states):
    for s in noisy_states:
        np.testing.assert_allclose(qs.gram_matrix(s, 8), np.eye(9), atol=1e-8)


def test_gram_detects_bad_extent():
    from oscillab.errors import QuadratureNotConverged
    s = OscState.noiseless(1.0)
    G = qs.gram_matrix(s, 4, extent=1.0)
    assert abs(G[0, 0] - 1) > 1e-3
    with pytest.raises(QuadratureNotConverged):
        qs.gram_matrix(s, 40, tol=1e-30)


@settings(max_examples=30)
@given(st.integers(0, 8), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 5.0),
       st.floats(-5, 5), st.floats(0.05, 5.0), st.floats(-10, 10))
def test_closed_form_kernel_matches_product(m, x, xp, om, u1, u2, gamma):
    s = OscState.from_riccati(om, u1, u2, gamma)
    a = qs.density_kernel_partial(m, x, xp, s)
    b = qs.density_kernel_closed_form(m, x, xp, s)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_closed_form_two_times(noisy_states):
    s, sp = noisy_states[0], noisy_states[1]
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(qs.density_kernel_closed_form(3, x, x[::-1], s, sp),
                               qs.density_kernel_partial(3, x, x[::-1], s, sp), atol=1e-13)


def test_noiseless_ground_kernel_diagonal():
    om = 2.0
    s = OscState.noiseless(om, 1.3)
    x = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(qs.density_kernel_partial(0, x, x, s),
                               math.sqrt(om / math.pi) * np.exp(-om * x * x), rtol=1e-14)


def test_kernel_hermitian_and_trace(noisy_states):
    for s in noisy_states[::4]:
        X = 14 / math.sqrt(s.u2)
        x = np.linspace(-X, X, 301)
        K = qs.density_kernel_partial(2, x[:, None], x[None, :], s)
        np.testing.assert_allclose(K, K.conj().T, atol=1e-15)
        assert np.real(np.sum(qs.trapezoid_weights(x) * np.diag(K))) == pytest.approx(1.0,
                                                                                    abs=1e-10)


def test_averaged_noiseless_is_pure():
    p = SystemParams(omega0=1.0, epsilon=0.0, t_end=2.0, n_traj=1)
    ens = ensemble_run(p, [2.0])
    K = qs.averaged_density(ens, 0, np.linspace(-8, 8, 201), 2.0)
    assert K.trace == pytest.approx(1.0, abs=1e-10)
    e = qs.von_neumann_entropy(K)
    assert e.normalized == pytest.approx(0.0, abs=1e-10)
    assert e.raw == pytest.approx(0.0, abs=1e-10)


@pytest.fixture(scope="module")
def noisy_kernel():
    p = SystemParams.from_lambda(1.0, t_end=2.0, dt=1e-3, n_traj=2000, seed=5)
    ens = ensemble_run(p, [2.0])
    return ens, qs.averaged_density(ens, 0, None, 2.0)


def test_averaged_kernel_properties(noisy_kernel):
    ens, K = noisy_kernel
    np.testing.assert_allclose(K.values, K.values.conj().T, atol=1e-12)
    ev = K.eigenvalues()
    assert ev.min() >= -1e-10 * ev.max()
    # the mean of the per-realisation quadrature traces on the same grid
    u1, u2, _, g = ens.at(2.0)
    w = qs.trapezoid_weights(K.x_nodes)
    per = [np.sum(w * np.abs(qs.psi_stc(0, K.x_nodes, OscState.from_riccati(1.0, a, b, c))) ** 2)
           for a, b, c in zip(u1, u2, g)]
    assert K.trace == pytest.approx(np.mean(per), rel=1e-12)
    # each realisation has unit trace; the shared grid resolves the narrowest ones coarsely
    assert K.trace == pytest.approx(1.0, abs=1e-2)
    e = qs.von_neumann_entropy(K)
    assert e.normalized > 0.0
    assert e.trace == pytest.approx(K.trace, rel=1e-8)


def test_averaged_kernel_is_schedule_independent(noisy_kernel):
    ens, K = noisy_kernel
    again = qs.averaged_density(ens, 0, K.x_nodes, 2.0, chunk=1024)
    assert again.values.tobytes() == K.values.tobytes()


def test_kernel_grid_extent(noisy_kernel):
    ens, K = noisy_kernel
    u2 = ens.at(2.0)[1]
    assert K.x_nodes[-1] == pytest.approx(6 * np.max(np.sqrt(1.0 / u2)), rel=1e-12)
    assert K.x_nodes.size == 257


def _diag_kernel(p):
    x = np.arange(len(p), dtype=float)
    return qs.DensityKernel(x, np.diag(p).astype(complex), np.ones(len(p)), 0.0)


def test_entropy_simple_spectra():
    assert qs.von_neumann_entropy(_diag_kernel([0.3, 0.0, 0.0])).normalized == 0.0
    e = qs.von_neumann_entropy(_diag_kernel([0.4, 0.4]))
    assert e.normalized == pytest.approx(math.log(2.0), rel=1e-14)
    assert e.raw == pytest.approx(-math.log(0.4), rel=1e-14)
    with pytest.raises(NonPositiveTrace):
        qs.von_neumann_entropy(_diag_kernel([0.0, 0.0]))
    bad = qs.DensityKernel(np.arange(2.0), np.array([[1, 1j], [1j, 1]]), np.ones(2), 0.0)
    with pytest.raises(NotHermitian):
        qs.von_neumann_entropy(bad)


def test_mixed_density():
    a, b = _diag_kernel([1.0, 0.0]), _diag_kernel([0.0, 1.0])
    m = qs.mixed_density([a, b], [0.5, 0.5])
    assert qs.von_neumann_entropy(m).normalized == pytest.approx(math.log(2.0))
    with pytest.raises(ValueError):
        qs.mixed_density([a, b], [0.5, 0.6])


def test_state_validation():
    with pytest.raises(ValueError):
        OscState(1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        OscState(-1.0, 1.0, 0.0, 0.0)
    s = OscState.from_riccati(2.0, 0.3, 8.0, 1.0)
    assert s.r == pytest.approx(0.5) and s.u2 == pytest.approx(8.0)
