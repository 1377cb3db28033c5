"""Four interchangeable ways of simulating a structured state-space layer.

All engines start from a zero state, accept inputs shaped ``(..., T, n_u)``
and return ``(eta, y)`` shaped ``(..., T, n_y)``. The sequential recurrence is
the reference; the others must agree with it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np

from deepwiener.core import (
    DimensionError,
    DiscreteLti,
    NumericError,
    SsLayer,
    SsModel,
    Structure,
    UnsupportedStructureError,
    layer_output,
    pre_activation,
)
from deepwiener.discretization import discretize_dense

ENGINES = ("sequential", "scan", "conv", "fft")


class SingularMatrixError(NumericError):
    pass


# --------------------------------------------------------------------------
# state trajectories: x_0 = x0 (default zero), returned as x_0 .. x_{T-1}


def _shift_states(x_next, x0=None):
    first = jnp.zeros_like(x_next[..., :1, :]) if x0 is None else jnp.broadcast_to(
        jnp.asarray(x0, x_next.dtype)[..., None, :], x_next[..., :1, :].shape
    )
    return jnp.concatenate([first, x_next[..., :-1, :]], axis=-2)


def _drive(lti: DiscreteLti, u):
    return u.astype(jnp.complex128) @ lti.b_tilde.T


def sequential_states(lti: DiscreteLti, u, x0=None):
    bu = jnp.moveaxis(_drive(lti, u), -2, 0)
    x = jnp.zeros(bu.shape[1:], jnp.complex128) if x0 is None else jnp.broadcast_to(
        jnp.asarray(x0, jnp.complex128), bu.shape[1:]
    )
    if lti.structure is Structure.DIAGONAL:
        def step(x, b):
            return lti.a_tilde * x + b, x
    else:
        def step(x, b):
            return x @ lti.a_tilde.T + b, x
    _, xs = jax.lax.scan(step, x, bu)
    return jnp.moveaxis(xs, 0, -2)


def combine(e1, e2):
    """Compose two affine maps x -> a x + b, applying ``e1`` first."""
    a1, b1 = e1
    a2, b2 = e2
    return a2 * a1, a2 * b1 + b2


def _pad_time(x, n: int, value=0.0):
    pad = [(0, 0)] * (x.ndim - 2) + [(0, n - x.shape[-2]), (0, 0)]
    return jnp.pad(x, pad, constant_values=value)


def _merge(even, odd):
    out = jnp.stack([even, odd], axis=-2)
    return out.reshape(even.shape[:-2] + (2 * even.shape[-2], even.shape[-1]))


def _pairs(x):
    p = x.reshape(x.shape[:-2] + (x.shape[-2] // 2, 2, x.shape[-1]))
    return p[..., 0, :], p[..., 1, :]


def _scan_pow2(a, b):
    n = b.shape[-2]
    if n == 1:
        return a, b
    (ea, oa), (eb, ob) = _pairs(a), _pairs(b)
    odd_a, odd_b = _scan_pow2(*combine((ea, eb), (oa, ob)))
    # the prefix ending at even index 2k >= 2 extends the one ending at 2k - 1
    ca, cb = combine((odd_a[..., :-1, :], odd_b[..., :-1, :]), (ea[..., 1:, :], eb[..., 1:, :]))
    even_a = jnp.concatenate([ea[..., :1, :], ca], axis=-2)
    even_b = jnp.concatenate([eb[..., :1, :], cb], axis=-2)
    return _merge(even_a, odd_a), _merge(even_b, odd_b)


def associative_scan(a, b):
    """Inclusive scan of :func:`combine` along axis -2.

    The sequence is padded with identity maps to a power of two; each round
    composes neighbouring pairs, recurses on the half-length sequence and
    fills in the even prefixes: O(T) combines in O(log T) rounds.
    """
    T = b.shape[-2]
    n = _next_pow2(T)
    a = jnp.broadcast_to(a, b.shape)
    ra, rb = _scan_pow2(_pad_time(a, n, 1.0), _pad_time(b, n))
    return ra[..., :T, :], rb[..., :T, :]


def _lti_scan_pow2(lam, b):
    n = b.shape[-2]
    if n == 1:
        return b
    e, o = _pairs(b)
    odd = _lti_scan_pow2(lam * lam, lam * e + o)
    even = jnp.concatenate([e[..., :1, :], lam * odd[..., :-1, :] + e[..., 1:, :]], axis=-2)
    return _merge(even, odd)


def lti_scan(lam, b):
    """Right component of :func:`associative_scan` when every multiplier equals ``lam``.

    A time-invariant layer composes pairs with the same multiplier, so only
    its square per round is tracked instead of a full multiplier sequence.
    """
    T = b.shape[-2]
    return _lti_scan_pow2(lam, _pad_time(b, _next_pow2(T)))[..., :T, :]


SCAN_BLOCK = 32


def blocked_lti_scan(lam, b, block: int = SCAN_BLOCK):
    """Same result as :func:`lti_scan`, organized as reduce-then-scan over blocks.

    Every block of ``block`` steps is swept in lockstep with all the others,
    the block-final states are joined by :func:`lti_scan`, and each block is
    then corrected by lam^(k+1) times the incoming state. Memory is touched a
    constant number of times instead of once per doubling round.
    """
    T, c = b.shape[-2], b.shape[-1]
    nb = -(-T // block)
    blocks = _pad_time(b, nb * block).reshape(b.shape[:-2] + (nb, block, c))
    steps = jnp.moveaxis(blocks, -2, 0)

    def step(x, bt):
        x = lam * x + bt
        return x, x

    last, within = jax.lax.scan(step, jnp.zeros(steps.shape[1:], b.dtype), steps)
    carry = lti_scan(lam ** block, last)
    incoming = _shift_states(carry)
    powers = lam ** jnp.arange(1, block + 1)[:, None]
    x = within + powers.reshape((block,) + (1,) * (incoming.ndim - 1) + (c,)) * incoming[None]
    x = jnp.moveaxis(x, 0, -2).reshape(b.shape[:-2] + (nb * block, c))
    return x[..., :T, :]


def scan_states(lti: DiscreteLti, u):
    if lti.structure is not Structure.DIAGONAL:
        raise UnsupportedStructureError(
            "parallel scan is implemented for diagonal layers only; dense combines cost O(n^3)"
        )
    return _shift_states(blocked_lti_scan(lti.a_tilde, _drive(lti, u)))


def _finish(layer: SsLayer, x, u):
    eta = pre_activation(layer.lti, x, u)
    return eta, layer_output(layer, eta, u)


# The output stage is compiled separately: fused into the state kernel, XLA
# produced code about 1.6x slower at T = 2^16 on a single-core host.
_output_kernel = jax.jit(layer_output)


@jax.jit
def _sequential_eta(layer, u, x0):
    return pre_activation(layer.lti, sequential_states(layer.lti, u, x0), u)


@jax.jit
def _scan_eta(layer, u):
    return pre_activation(layer.lti, scan_states(layer.lti, u), u)


def _sequential_kernel(layer, u, x0):
    eta = _sequential_eta(layer, u, x0)
    return eta, _output_kernel(layer, eta, u)


def _scan_kernel(layer, u):
    eta = _scan_eta(layer, u)
    return eta, _output_kernel(layer, eta, u)


def _prepare(layer: SsLayer, u_seq):
    u = jnp.asarray(u_seq, dtype=jnp.float64)
    if u.ndim < 2:
        raise DimensionError("input must be shaped (..., T, n_u)")
    if u.shape[-2] == 0:
        raise DimensionError("input sequence is empty")
    if u.shape[-1] != layer.n_u:
        raise DimensionError(f"layer expects {layer.n_u} input channels, got {u.shape[-1]}")
    return u


def _check_output(eta, y):
    for name, arr in (("eta", eta), ("y", y)):
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            t = int(np.argwhere(~np.isfinite(a))[0][-2])
            raise NumericError(f"non-finite {name} at time step {t}", t)
    return eta, y


def _dense_layer(layer: SsLayer) -> SsLayer:
    if isinstance(layer.lti, TransferHandle):
        return SsLayer(layer.lti.realize_dense(), layer.activation, layer.skip_identity)
    return layer


def simulate_sequential(layer: SsLayer, u_seq, x0=None):
    """Reference recurrence; ``x0`` defaults to the zero half-state."""
    layer = _dense_layer(layer)
    u = _prepare(layer, u_seq)
    if x0 is not None:
        x0 = jnp.asarray(x0, dtype=jnp.complex128)
    return _check_output(*_sequential_kernel(layer, u, x0))


def simulate_scan(layer: SsLayer, u_seq):
    if isinstance(layer.lti, TransferHandle) or layer.lti.structure is not Structure.DIAGONAL:
        raise UnsupportedStructureError(
            "parallel scan is implemented for diagonal layers only; dense combines cost O(n^3)"
        )
    u = _prepare(layer, u_seq)
    return _check_output(*_scan_kernel(layer, u))


# --------------------------------------------------------------------------
# convolutional form


@dataclass(frozen=True)
class ConvFilter:
    """Truncated impulse response ``[A^{r-1} B, ..., A B, B]`` stacked on axis 0."""

    blocks: Any
    r: int
    tail_radius: float


def build_filter(lti: DiscreteLti, r_max: int, tol: float = 1e-8) -> ConvFilter:
    if r_max < 1:
        raise ValueError("r_max must be at least 1")
    rho = lti.spectral_radius()
    if rho == 0.0:
        r = 1
    elif tol > 0 and rho < 1.0:
        r = math.ceil(math.log(tol) / math.log(rho))
        if rho ** r >= tol:
            r += 1
        r = max(1, min(r, r_max))
    else:
        r = r_max

    a = np.asarray(lti.a_tilde)
    h = np.empty((r,) + tuple(lti.b_tilde.shape), dtype=np.complex128)
    h[0] = np.asarray(lti.b_tilde)
    for k in range(1, r):
        h[k] = a[:, None] * h[k - 1] if lti.structure is Structure.DIAGONAL else a @ h[k - 1]
    return ConvFilter(blocks=h[::-1].copy(), r=r, tail_radius=float(rho ** r))


def _next_pow2(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def simulate_convolutional(layer: SsLayer, u_seq, filt: ConvFilter):
    layer = _dense_layer(layer)
    u = _prepare(layer, u_seq)
    if tuple(filt.blocks.shape[1:]) != tuple(layer.lti.b_tilde.shape):
        raise DimensionError(
            f"filter blocks {filt.blocks.shape[1:]} do not match layer B {layer.lti.b_tilde.shape}"
        )
    T = u.shape[-2]
    h = jnp.asarray(filt.blocks[::-1])  # h[k] = A^k B
    n = _next_pow2(T + filt.r - 1)
    hf = jnp.fft.fft(h, n, axis=0)
    uf = jnp.fft.fft(u.astype(jnp.complex128), n, axis=-2)
    x_next = jnp.fft.ifft(jnp.einsum("kij,...kj->...ki", hf, uf), axis=-2)[..., :T, :]
    return _check_output(*_finish(layer, _shift_states(x_next), u))


# --------------------------------------------------------------------------
# DPLR transfer function and FFT simulation


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["lambda_c", "p", "q", "b_c", "c_c", "gamma", "d", "f"],
    meta_fields=["tau"],
)
@dataclass(frozen=True)
class TransferHandle:
    """Continuous DPLR half system ``gamma (diag(lambda_c) - p q^*)``, kept unrealized."""

    lambda_c: Any
    p: Any
    q: Any
    b_c: Any
    c_c: Any
    gamma: Any
    d: Any
    f: Any
    tau: float

    @property
    def n_lambda(self) -> int:
        return self.b_c.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_c.shape[1]

    @property
    def n_y(self) -> int:
        return self.c_c.shape[0]

    @property
    def n_r(self) -> int:
        return self.p.shape[1]

    def scaled(self):
        """(lambda', P', Q, B') with the timescale folded in."""
        g = np.broadcast_to(np.asarray(self.gamma, dtype=float), (self.n_lambda,))
        lam = g * np.asarray(self.lambda_c)
        return lam, g[:, None] * np.asarray(self.p), np.asarray(self.q), g[:, None] * np.asarray(self.b_c)

    def continuous_matrix(self) -> np.ndarray:
        lam, p, q, _ = self.scaled()
        return np.diag(lam) - p @ q.conj().T

    def realize_dense(self) -> DiscreteLti:
        _, _, _, b = self.scaled()
        a_d, b_d = discretize_dense(self.continuous_matrix(), b, self.tau, "bilinear")
        return DiscreteLti(a_d, b_d, jnp.asarray(self.c_c), jnp.asarray(self.d), jnp.asarray(self.f), Structure.DENSE)

    def check(self) -> None:
        self.realize_dense().check()


def _low_rank_solve(diag, u_mat, v_mat, rhs):
    """Apply (diag(d) + U V^*)^{-1} to ``rhs`` batched over the leading axis.

    ``diag`` is (K, n); ``u_mat`` is (K, n, r) or (n, r); ``v_mat`` is (n, r);
    ``rhs`` is (n, m). Only the r x r core is inverted.
    """
    inv_d = 1.0 / diag
    u_mat = np.broadcast_to(u_mat, diag.shape + (v_mat.shape[1],))
    dr = inv_d[:, :, None] * rhs[None]
    du = inv_d[:, :, None] * u_mat
    vh = v_mat.conj().T
    core = np.eye(v_mat.shape[1])[None] + vh[None] @ du
    cond = np.linalg.cond(core)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1.0 / np.finfo(float).eps):
        raise SingularMatrixError("low-rank core matrix I + Q^* W P is singular")
    return dr - du @ np.linalg.solve(core, vh[None] @ dr)


def dplr_frequency_response(h: TransferHandle, omegas) -> np.ndarray:
    """Continuous transfer function at the bilinear image of ``exp(i omega tau)``.

    Evaluates ``C (s I - A)^{-1} B`` with ``s = 2/tau (z-1)/(z+1)`` using the
    Woodbury identity, so the only inverse is the n_r x n_r core. Returns an
    array shaped ``(len(omegas), n_y, n_u)``.
    """
    z = np.exp(1j * np.asarray(omegas, dtype=float) * h.tau)
    if np.any(np.abs(1.0 + z) < 1e-12):
        raise ValueError("z = -1 is a singular point of the bilinear map")
    s = (2.0 / h.tau) * (z - 1.0) / (z + 1.0)
    lam, p, q, b = h.scaled()
    # (s - lam) + P Q^*  ==  s I - A
    x = _low_rank_solve(s[:, None] - lam[None, :], p, q, b)
    return np.asarray(h.c_c)[None] @ x


def realized_frequency_response(h: TransferHandle, omegas) -> np.ndarray:
    """Frequency response of the dense bilinear realization (strictly proper, D = 0).

    Equals ``2 / (1 + z)`` times :func:`dplr_frequency_response`, written as
    ``tau C ((z-1) I - (z+1) tau A / 2)^{-1} B`` so it stays finite at z = -1.
    """
    z = np.exp(1j * np.asarray(omegas, dtype=float) * h.tau)
    lam, p, q, b = h.scaled()
    diag = (z - 1.0)[:, None] - (0.5 * h.tau) * (z + 1.0)[:, None] * lam[None, :]
    u_mat = (0.5 * h.tau) * (z + 1.0)[:, None, None] * p[None]
    x = _low_rank_solve(diag, u_mat, q, b)
    return h.tau * (np.asarray(h.c_c)[None] @ x)


def _bilinear_radius(h: TransferHandle) -> float:
    mu = np.linalg.eigvals(h.continuous_matrix())
    return float(np.max(np.abs((1 + 0.5 * h.tau * mu) / (1 - 0.5 * h.tau * mu))))


def simulate_fft(layer: SsLayer, u_seq, *, n_fft: int | None = None, tol: float = 1e-8):
    """Simulate a DPLR layer through its frequency response.

    The input is zero-padded to a power of two at least ``2 T`` (and long
    enough for the impulse response to decay below ``tol``), so the product
    realizes a linear rather than circular convolution.
    """
    h = layer.lti
    if not isinstance(h, TransferHandle):
        raise UnsupportedStructureError("FFT engine needs a DPLR layer realized as a TransferHandle")
    u = np.asarray(_prepare(layer, u_seq))
    T = u.shape[-2]
    if n_fft is None:
        rho = _bilinear_radius(h)
        tail = math.ceil(math.log(tol) / math.log(rho)) if 0 < rho < 1 else T
        n_fft = _next_pow2(max(2 * T, T + min(tail, 64 * T)))
    elif n_fft < T:
        raise ValueError("n_fft must be at least the sequence length")
    omegas = 2.0 * np.pi * np.arange(n_fft) / (n_fft * h.tau)
    resp = realized_frequency_response(h, omegas)
    uf = np.fft.fft(u, n_fft, axis=-2)
    eta_half = np.fft.ifft(np.einsum("kij,...kj->...ki", resp, uf), axis=-2)[..., :T, :]
    eta = 2.0 * np.real(eta_half) + u @ np.asarray(h.d).T
    eta = jnp.asarray(eta)
    return _check_output(eta, layer_output(layer, eta, jnp.asarray(u)))


# --------------------------------------------------------------------------


def simulate_layer(layer: SsLayer, u, engine: str = "sequential", *, tol: float = 1e-8, r_max: int | None = None):
    if engine == "sequential":
        return simulate_sequential(layer, u)
    if engine == "scan":
        return simulate_scan(layer, u)
    if engine == "conv":
        dense = _dense_layer(layer)
        u = _prepare(dense, u)
        return simulate_convolutional(dense, u, build_filter(dense.lti, r_max or u.shape[-2], tol))
    if engine == "fft":
        return simulate_fft(layer, u, tol=tol)
    raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")


def ssm_forward(model: SsModel, u_seq, engine: str = "sequential", **kwargs):
    """Simulate the layer stack from zero state, feeding each output to the next layer."""
    model.check()
    y = u_seq
    for layer in model.layers:
        _, y = simulate_layer(layer, y, engine, **kwargs)
    return y
