"""Continuous-to-discrete maps for diagonal and dense half systems."""
from __future__ import annotations

import enum

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np


class DiscretizationMethod(str, enum.Enum):
    ZOH = "zoh"
    BILINEAR = "bilinear"
    FORWARD_EULER = "forward_euler"


class SingularDiscretizationError(ArithmeticError):
    pass


def _concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


def _cexpm1(z):
    # exp(z) - 1 without cancellation for |z| << 1
    x, y = jnp.real(z), jnp.imag(z)
    re = jnp.expm1(x) * jnp.cos(y) - 2.0 * jnp.sin(0.5 * y) ** 2
    im = jnp.exp(x) * jnp.sin(y)
    return re + 1j * im


def _check_method(method, allow_forward_euler: bool) -> DiscretizationMethod:
    method = DiscretizationMethod(method)
    if method is DiscretizationMethod.FORWARD_EULER and not allow_forward_euler:
        raise ValueError(
            "forward Euler does not map Hurwitz to Schur in general; "
            "pass allow_forward_euler=True to use it anyway"
        )
    return method


def discretize(lambda_c, b_c, gamma, tau: float, method="zoh", *, allow_forward_euler: bool = False):
    """Discretize a diagonal continuous half system with timescale ``gamma``.

    Returns ``(lambda_d, b_d)``. ``gamma`` may be a scalar or one entry per
    eigenvalue; it scales both the eigenvalues and the rows of ``b_c``.
    """
    method = _check_method(method, allow_forward_euler)
    if tau <= 0:
        raise ValueError(f"sampling time must be positive, got {tau}")
    gamma = jnp.broadcast_to(jnp.asarray(gamma, dtype=jnp.float64), jnp.shape(lambda_c))
    lam = gamma * jnp.asarray(lambda_c, dtype=jnp.complex128)
    b = gamma[:, None] * jnp.asarray(b_c, dtype=jnp.complex128)

    if method is not DiscretizationMethod.FORWARD_EULER and _concrete(lam):
        if np.any(np.real(np.asarray(lam)) >= 0):
            raise ValueError("ZOH/bilinear discretization requires Re(gamma * lambda_c) < 0")

    if method is DiscretizationMethod.ZOH:
        lambda_d = jnp.exp(tau * lam)
        zero = lam == 0
        safe = jnp.where(zero, 1.0, lam)
        coeff = jnp.where(zero, tau, _cexpm1(tau * safe) / safe)
        return lambda_d, coeff[:, None] * b
    if method is DiscretizationMethod.BILINEAR:
        den = 1.0 - 0.5 * tau * lam
        if _concrete(den) and np.any(np.asarray(den) == 0):
            raise SingularDiscretizationError("bilinear pole: 1 - tau * lambda / 2 = 0")
        lambda_d = (1.0 + 0.5 * tau * lam) / den
        return lambda_d, (tau / den)[:, None] * b
    return 1.0 + tau * lam, tau * b


def discretize_dense(a_c, b_c, tau: float, method="bilinear", *, allow_forward_euler: bool = False):
    """Matrix counterparts of :func:`discretize` for an already scaled (A, B)."""
    method = _check_method(method, allow_forward_euler)
    a_c = jnp.asarray(a_c, dtype=jnp.complex128)
    b_c = jnp.asarray(b_c, dtype=jnp.complex128)
    eye = jnp.eye(a_c.shape[0], dtype=a_c.dtype)
    if method is DiscretizationMethod.ZOH:
        a_d = jsl.expm(tau * a_c)
        return a_d, jnp.linalg.solve(a_c, (a_d - eye) @ b_c)
    if method is DiscretizationMethod.BILINEAR:
        m = eye - 0.5 * tau * a_c
        if _concrete(m) and np.linalg.cond(np.asarray(m)) > 1.0 / np.finfo(float).eps:
            raise SingularDiscretizationError("I - tau * A / 2 is singular")
        return jnp.linalg.solve(m, eye + 0.5 * tau * a_c), jnp.linalg.solve(m, tau * b_c)
    return eye + tau * a_c, tau * b_c
