"""Learnable layer parametrizations and their realization as discrete half systems.

Parameter containers are JAX pytrees: array fields are learnable leaves,
everything else (sampling time, epsilon) is static. A ``None`` skip matrix
means F is fixed to the identity and carries no parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Any, Union

import jax
import jax.numpy as jnp
import numpy as np

from deepwiener.core import DiscreteLti, Structure
from deepwiener.discretization import DiscretizationMethod, _concrete, discretize, discretize_dense
from deepwiener.engines import TransferHandle


def _skip(f, n_y: int, n_u: int):
    return jnp.eye(n_y, n_u) if f is None else jnp.asarray(f, dtype=jnp.float64)


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["mu", "theta", "b_check", "c_tilde", "d", "f"],
    meta_fields=[],
)
@dataclass(frozen=True)
class LruParams:
    """Discrete diagonal layer: lambda_j = exp(-exp(mu_j) + i exp(theta_j))."""

    mu: Any
    theta: Any
    b_check: Any
    c_tilde: Any
    d: Any
    f: Any = None

    @property
    def n_lambda(self) -> int:
        return self.b_check.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.b_check.shape[1], self.c_tilde.shape[0]

    def eigenvalues(self):
        return jnp.exp(-jnp.exp(self.mu) + 1j * jnp.exp(self.theta))


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["alpha_re", "alpha_im", "b_c", "c_c", "log_gamma", "f"],
    meta_fields=["tau"],
)
@dataclass(frozen=True)
class CtDiagParams:
    """Continuous diagonal layer: lambda_j = -exp(alpha_re_j) + i exp(alpha_im_j).

    ``log_gamma`` is a scalar or one entry per eigenvalue.
    """

    alpha_re: Any
    alpha_im: Any
    b_c: Any
    c_c: Any
    log_gamma: Any
    f: Any = None
    tau: float = 1.0

    @property
    def n_lambda(self) -> int:
        return self.b_c.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.b_c.shape[1], self.c_c.shape[0]

    def eigenvalues(self):
        return -jnp.exp(self.alpha_re) + 1j * jnp.exp(self.alpha_im)


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["alpha_re", "alpha_im", "p", "q", "b_c", "c_c", "log_gamma", "f"],
    meta_fields=["tau", "epsilon"],
)
@dataclass(frozen=True)
class DplrParams:
    """Continuous diagonal-plus-low-rank layer, A_c = diag(lambda) - P Q^*.

    lambda_j = -phi(alpha_re_j) + i alpha_im_j with phi(a) = max(0, a) + epsilon.
    ``q=None`` ties Q to P, which makes the Hermitian part of A_c negative definite.
    """

    alpha_re: Any
    alpha_im: Any
    p: Any
    q: Any
    b_c: Any
    c_c: Any
    log_gamma: Any
    f: Any = None
    tau: float = 1.0
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def q_equals_p(self) -> bool:
        return self.q is None

    @property
    def n_lambda(self) -> int:
        return self.b_c.shape[0]

    @property
    def n_r(self) -> int:
        return self.p.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.b_c.shape[1], self.c_c.shape[0]

    def eigenvalues(self):
        return -(jnp.maximum(0.0, self.alpha_re) + self.epsilon) + 1j * self.alpha_im

    def low_rank(self):
        return self.p, (self.p if self.q is None else self.q)


SslParams = Union[LruParams, CtDiagParams, DplrParams]


def lru_realize(p: LruParams) -> DiscreteLti:
    lam = p.eigenvalues()
    gamma = jnp.sqrt(1.0 - jnp.abs(lam) ** 2)
    n_u, n_y = p.dims
    return DiscreteLti(
        a_tilde=lam,
        b_tilde=gamma[:, None] * p.b_check,
        c_tilde=jnp.asarray(p.c_tilde, dtype=jnp.complex128),
        d=jnp.asarray(p.d, dtype=jnp.float64),
        f=_skip(p.f, n_y, n_u),
        structure=Structure.DIAGONAL,
    )


def ct_diag_realize(p: CtDiagParams, method="zoh", **kwargs) -> DiscreteLti:
    lam_d, b_d = discretize(p.eigenvalues(), p.b_c, jnp.exp(p.log_gamma), p.tau, method, **kwargs)
    n_u, n_y = p.dims
    return DiscreteLti(
        a_tilde=lam_d,
        b_tilde=b_d,
        c_tilde=jnp.asarray(p.c_c, dtype=jnp.complex128),
        d=jnp.zeros((n_y, n_u)),
        f=_skip(p.f, n_y, n_u),
        structure=Structure.DIAGONAL,
    )


def _dplr_scaled(p: DplrParams):
    lam = p.eigenvalues()
    gamma = jnp.broadcast_to(jnp.exp(p.log_gamma), lam.shape)
    pp, qq = p.low_rank()
    a_c = gamma[:, None] * (jnp.diag(lam) - pp @ jnp.conj(qq).T)
    return a_c, gamma[:, None] * p.b_c


def dplr_realize(p: DplrParams, method="bilinear", *, transfer: bool = False, **kwargs):
    """Dense discrete realization, or an unrealized :class:`TransferHandle`.

    The handle path is tied to the bilinear map since the frequency-domain
    engine evaluates the transfer function at its image.
    """
    method = DiscretizationMethod(method)
    n_u, n_y = p.dims
    f = _skip(p.f, n_y, n_u)
    d = jnp.zeros((n_y, n_u))
    if transfer:
        if method is not DiscretizationMethod.BILINEAR:
            raise ValueError("the transfer-function path requires bilinear discretization")
        pp, qq = p.low_rank()
        return TransferHandle(
            lambda_c=p.eigenvalues(), p=pp, q=qq, b_c=jnp.asarray(p.b_c), c_c=jnp.asarray(p.c_c),
            gamma=jnp.exp(p.log_gamma), d=d, f=f, tau=p.tau,
        )
    pp, qq = p.low_rank()
    if _concrete(pp) and not np.any(np.asarray(pp)) and not np.any(np.asarray(qq)):
        # zero low-rank term: exactly the diagonal realization, stored densely
        lam_d, b_d = discretize(p.eigenvalues(), p.b_c, jnp.exp(p.log_gamma), p.tau, method, **kwargs)
        a_d = jnp.diag(lam_d)
    else:
        a_c, b_c = _dplr_scaled(p)
        a_d, b_d = discretize_dense(a_c, b_c, p.tau, method, **kwargs)
    return DiscreteLti(a_d, b_d, jnp.asarray(p.c_c, dtype=jnp.complex128), d, f, Structure.DENSE)


def realize(p: SslParams, method="zoh", **kwargs) -> DiscreteLti:
    if isinstance(p, LruParams):
        return lru_realize(p)
    if isinstance(p, CtDiagParams):
        return ct_diag_realize(p, method, **kwargs)
    if isinstance(p, DplrParams):
        return dplr_realize(p, method, **kwargs)
    raise TypeError(f"unknown parametrization {type(p).__name__}")


@dataclass(frozen=True)
class SpectrumRow:
    lambda_c: complex | None
    lambda_d: complex
    modulus: float
    phase: float
    beyond_nyquist: bool


def continuous_spectrum(p: SslParams) -> np.ndarray | None:
    """Eigenvalues of the timescaled continuous matrix, or None for LRU layers."""
    if isinstance(p, LruParams):
        return None
    if isinstance(p, CtDiagParams):
        gamma = np.broadcast_to(np.exp(np.asarray(p.log_gamma)), (p.n_lambda,))
        return gamma * np.asarray(p.eigenvalues())
    a_c, _ = _dplr_scaled(p)
    return np.linalg.eigvals(np.asarray(a_c))


def spectrum_report(p: SslParams, tau: float | None = None, method="zoh") -> list[SpectrumRow]:
    """Per-eigenvalue table with the aliasing flag |Im(gamma lambda_c)| > pi / tau."""
    lam_c = continuous_spectrum(p)
    if lam_c is None:
        lam_d = np.asarray(lru_realize(p).a_tilde)
        return [SpectrumRow(None, complex(z), float(abs(z)), float(np.angle(z)), False) for z in lam_d]
    tau = p.tau if tau is None else tau
    method = DiscretizationMethod(method)
    if method is DiscretizationMethod.ZOH:
        lam_d = np.exp(tau * lam_c)
    elif method is DiscretizationMethod.BILINEAR:
        lam_d = (1 + 0.5 * tau * lam_c) / (1 - 0.5 * tau * lam_c)
    else:
        lam_d = 1 + tau * lam_c
    nyquist = np.pi / tau
    return [
        SpectrumRow(complex(c), complex(z), float(abs(z)), float(np.angle(z)), bool(abs(c.imag) > nyquist))
        for c, z in zip(lam_c, lam_d)
    ]
