"""Layer/model types and the reference single-step semantics.

Every layer stores only the upper block of its conjugate-pair realization
(the "half system"): the full state is ``[x; conj(x)]`` so every real-valued
output is obtained as ``2 * Re(C x) + D u``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import partial
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np


class NumericError(ArithmeticError):
    """Non-finite values met during simulation, realization or training."""

    def __init__(self, message: str, index: Any = None):
        super().__init__(message)
        self.index = index


class DimensionError(ValueError):
    pass


class UnsupportedStructureError(ValueError):
    pass


class ActivationKind(str, enum.Enum):
    TANH = "tanh"
    ELU = "elu"
    SWISH = "swish"


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind = ActivationKind.ELU
    elu_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind(self.kind))

    def __call__(self, x):
        if self.kind is ActivationKind.TANH:
            return jnp.tanh(x)
        if self.kind is ActivationKind.ELU:
            return jax.nn.elu(x, self.elu_alpha)
        return jax.nn.silu(x)

    @property
    def lipschitz(self) -> float:
        if self.kind is ActivationKind.ELU:
            return max(1.0, self.elu_alpha)
        if self.kind is ActivationKind.SWISH:
            return 1.1  # analytic bound is ~1.0998
        return 1.0


class Structure(str, enum.Enum):
    DIAGONAL = "diagonal"
    DENSE = "dense"


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["a_tilde", "b_tilde", "c_tilde", "d", "f"],
    meta_fields=["structure"],
)
@dataclass(frozen=True)
class DiscreteLti:
    """Half-system realization consumed by all simulation engines.

    ``a_tilde`` is a vector of eigenvalues for ``Structure.DIAGONAL`` and a
    square matrix for ``Structure.DENSE``.
    """

    a_tilde: Any
    b_tilde: Any
    c_tilde: Any
    d: Any
    f: Any
    structure: Structure = Structure.DIAGONAL

    @property
    def n_lambda(self) -> int:
        return self.b_tilde.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_tilde.shape[1]

    @property
    def n_y(self) -> int:
        return self.c_tilde.shape[0]

    @property
    def a_matrix(self):
        if self.structure is Structure.DIAGONAL:
            return jnp.diag(self.a_tilde)
        return self.a_tilde

    def eigenvalues(self) -> np.ndarray:
        a = np.asarray(self.a_tilde)
        if self.structure is Structure.DIAGONAL:
            return a
        return np.linalg.eigvals(a)

    def spectral_radius(self) -> float:
        ev = self.eigenvalues()
        return float(np.max(np.abs(ev))) if ev.size else 0.0

    def check(self) -> None:
        n, n_u = self.b_tilde.shape
        expected_a = (n,) if self.structure is Structure.DIAGONAL else (n, n)
        if tuple(self.a_tilde.shape) != expected_a:
            raise DimensionError(f"a_tilde has shape {self.a_tilde.shape}, expected {expected_a}")
        if self.c_tilde.ndim != 2 or self.c_tilde.shape[1] != n:
            raise DimensionError(f"c_tilde has shape {self.c_tilde.shape}, expected (n_y, {n})")
        n_y = self.c_tilde.shape[0]
        for name in ("d", "f"):
            shape = tuple(getattr(self, name).shape)
            if shape != (n_y, n_u):
                raise DimensionError(f"{name} has shape {shape}, expected {(n_y, n_u)}")


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["lti"],
    meta_fields=["activation", "skip_identity"],
)
@dataclass(frozen=True)
class SsLayer:
    """One Wiener block: LTI half-system, static activation and skip connection.

    ``lti`` is a :class:`DiscreteLti` or, for DPLR layers meant for the FFT
    engine, a :class:`deepwiener.engines.TransferHandle`.
    """

    lti: Any
    activation: Activation = field(default_factory=Activation)
    skip_identity: bool = False

    @property
    def n_u(self) -> int:
        return self.lti.n_u

    @property
    def n_y(self) -> int:
        return self.lti.n_y

    def check(self) -> None:
        if hasattr(self.lti, "check"):
            self.lti.check()
        if self.skip_identity:
            f = np.asarray(self.lti.f)
            if self.n_u != self.n_y or not np.array_equal(f, np.eye(self.n_u)):
                raise DimensionError("skip_identity requires n_u == n_y and f == I")


@partial(jax.tree_util.register_dataclass, data_fields=["layers"], meta_fields=[])
@dataclass(frozen=True)
class SsModel:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [(layer.n_u, layer.n_y) for layer in self.layers]

    def check(self) -> None:
        if not self.layers:
            raise DimensionError("model has no layers")
        for layer in self.layers:
            layer.check()
        dims = self.dims
        for i in range(len(dims) - 1):
            if dims[i][1] != dims[i + 1][0]:
                raise DimensionError(
                    f"layer {i} outputs {dims[i][1]} channels but layer {i + 1} expects {dims[i + 1][0]}"
                )


def assemble_conjugate(half: DiscreteLti) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full real-equivalent (A, B, C) of a half system, n_x = 2 n_lambda."""
    half.check()
    a = np.asarray(half.a_matrix)
    b = np.asarray(half.b_tilde)
    c = np.asarray(half.c_tilde)
    n = a.shape[0]
    full_a = np.zeros((2 * n, 2 * n), dtype=np.result_type(a, np.complex128))
    full_a[:n, :n] = a
    full_a[n:, n:] = np.conj(a)
    full_b = np.concatenate([b, np.conj(b)], axis=0)
    full_c = np.concatenate([c, np.conj(c)], axis=1)
    return full_a, full_b, full_c


def pre_activation(lti: DiscreteLti, x, u):
    """eta = 2 Re(C x) + D u; D is real and applied once."""
    return 2.0 * jnp.real(x @ lti.c_tilde.T) + u @ lti.d.T


def layer_output(layer: SsLayer, eta, u):
    return layer.activation(eta) + u @ layer.lti.f.T


def _require_finite(name: str, value) -> None:
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        raise NumericError(f"non-finite entry in {name} at {tuple(bad[0])}", tuple(bad[0]))


def ssl_step(layer: SsLayer, x, u):
    """Advance one layer by one sample, returning ``(x_next, y)``."""
    lti = layer.lti
    _require_finite("state", x)
    _require_finite("input", u)
    x = jnp.asarray(x, dtype=jnp.complex128)
    u = jnp.asarray(u, dtype=jnp.float64)
    if lti.structure is Structure.DIAGONAL:
        x_next = lti.a_tilde * x + lti.b_tilde @ u
    else:
        x_next = lti.a_tilde @ x + lti.b_tilde @ u
    eta = pre_activation(lti, x, u)
    return x_next, layer_output(layer, eta, u)
