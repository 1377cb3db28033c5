import numpy as np
import pytest

from deepwiener.discretization import SingularDiscretizationError, discretize, discretize_dense


def test_zoh_near_integrator_limit():
    lam_d, b_d = discretize(np.array([-1e-12 + 0j]), np.array([[2.0 + 0j]]), 1.0, 0.1, "zoh")
    assert abs(complex(lam_d[0]) - (1 - 1e-13)) < 1e-16
    assert complex(b_d[0, 0]) == pytest.approx(0.2, rel=1e-10)


def test_zoh_rejects_non_hurwitz():
    with pytest.raises(ValueError):
        discretize(np.array([0j]), np.ones((1, 1), complex), 1.0, 0.1, "zoh")
    with pytest.raises(ValueError):
        discretize(np.array([0.1 + 1j]), np.ones((1, 1), complex), 1.0, 0.1, "bilinear")


def test_bilinear_maps_minus_two_over_tau_to_origin():
    tau = 0.25
    lam_d, _ = discretize(np.array([-2 / tau + 0j]), np.ones((1, 1), complex), 1.0, tau, "bilinear")
    assert abs(complex(lam_d[0])) < 1e-15


def test_zoh_scalar_exponential():
    lam_d, _ = discretize(np.array([-1 + 2j]), np.ones((1, 1), complex), 1.0, 0.5, "zoh")
    z = complex(lam_d[0])
    assert z == pytest.approx(np.exp(-0.5 + 1j), abs=1e-15)
    assert z.real == pytest.approx(0.32770, abs=1e-5)
    assert z.imag == pytest.approx(0.51038, abs=1e-5)


def test_zoh_input_formula_and_gamma_scaling():
    lam = np.array([-2 + 3j, -0.5 + 0.1j])
    b = np.array([[1 + 1j], [2 - 1j]])
    gamma = np.array([1.5, 0.5])
    lam_d, b_d = discretize(lam, b, gamma, 0.1, "zoh")
    lp = gamma * lam
    np.testing.assert_allclose(lam_d, np.exp(0.1 * lp), rtol=1e-15)
    np.testing.assert_allclose(b_d, ((np.exp(0.1 * lp) - 1) / lp)[:, None] * gamma[:, None] * b, rtol=1e-13)


def test_bilinear_input_formula():
    lam, tau = np.array([-1 + 4j]), 0.2
    lam_d, b_d = discretize(lam, np.array([[3.0 + 0j]]), 1.0, tau, "bilinear")
    den = 1 - tau * lam / 2
    np.testing.assert_allclose(lam_d, (1 + tau * lam / 2) / den, rtol=1e-15)
    np.testing.assert_allclose(b_d, (3 * tau / den)[:, None], rtol=1e-15)


def test_forward_euler_requires_override():
    lam, b = np.array([-1 + 1j]), np.ones((1, 1), complex)
    with pytest.raises(ValueError):
        discretize(lam, b, 1.0, 0.1, "forward_euler")
    lam_d, b_d = discretize(lam, b, 1.0, 0.1, "forward_euler", allow_forward_euler=True)
    assert complex(lam_d[0]) == pytest.approx(1 + 0.1 * (-1 + 1j))
    assert complex(b_d[0, 0]) == pytest.approx(0.1)


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        discretize(np.array([-1 + 0j]), np.ones((1, 1), complex), 1.0, 0.0)


def test_bilinear_dense_pole_is_singular():
    tau = 0.5
    a = np.array([[2 / tau]], complex)
    with pytest.raises(SingularDiscretizationError):
        discretize_dense(a, np.ones((1, 1), complex), tau, "bilinear")


@pytest.mark.parametrize("lam", [-1 + 2j, -0.3 + 5j, -4 + 0.5j])
def test_zoh_and_bilinear_agree_to_second_order(lam):
    def gap(tau):
        a, _ = discretize(np.array([lam]), np.ones((1, 1), complex), 1.0, tau, "zoh")
        b, _ = discretize(np.array([lam]), np.ones((1, 1), complex), 1.0, tau, "bilinear")
        return abs(complex(a[0]) - complex(b[0]))

    tau = 1e-2
    ratio = gap(tau) / gap(tau / 2)
    # leading term of the disagreement is cubic per step; the criterion is >= quadratic (ratio ~4 or more)
    assert ratio >= 4 * 0.8


@pytest.mark.parametrize("method", ["zoh", "bilinear"])
def test_dense_matches_diagonal_on_diagonal_input(method, rng):
    lam = -rng.uniform(0.1, 2, 4) + 1j * rng.uniform(0, 5, 4)
    b = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    lam_d, b_d = discretize(lam, b, 1.0, 0.1, method)
    a_d, bd_dense = discretize_dense(np.diag(lam), b, 0.1, method)
    np.testing.assert_allclose(np.diag(np.asarray(a_d)), lam_d, rtol=1e-12)
    np.testing.assert_allclose(bd_dense, b_d, rtol=1e-11)
