"""Weight initialization: eigenvalue rings, HiPPO-LegS, Xavier and the Nyquist guard."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_TINY = np.finfo(float).tiny


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-layer generators, reproducible regardless of call order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass(frozen=True)
class RingSpec:
    r_min: float
    r_max: float
    theta_min: float
    theta_max: float
    seed: int = 0


def init_lru_ring(n_lambda: int, spec: RingSpec, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Sample (mu, theta) so eigenvalues land in the crown sector of ``spec``.

    ``mu`` is uniform on [log(-log r_max), log(-log r_min)]; the realized
    phase exp(theta) is uniform on [theta_min, theta_max].
    """
    if not (0.0 <= spec.r_min <= spec.r_max < 1.0):
        raise ValueError(f"discrete ring needs 0 <= r_min <= r_max < 1, got ({spec.r_min}, {spec.r_max})")
    if spec.r_max <= 0.0:
        raise ValueError("r_max must be positive")
    if not (0.0 <= spec.theta_min <= spec.theta_max <= 2 * np.pi):
        raise ValueError(
            f"discrete ring needs 0 <= theta_min <= theta_max <= 2 pi, got ({spec.theta_min}, {spec.theta_max})"
        )
    rng = make_rng(spec.seed if rng is None else rng)
    lo = math.log(-math.log(spec.r_max))
    hi = math.log(-math.log(max(spec.r_min, _TINY)))
    mu = rng.uniform(lo, hi, n_lambda)
    phase = rng.uniform(spec.theta_min, spec.theta_max, n_lambda)
    theta = np.log(np.maximum(phase, _TINY))
    return mu, theta


class NyquistMode(str, enum.Enum):
    WARN = "warn"
    RESCALE = "rescale"


def init_ct_ring(n_lambda: int, spec: RingSpec, tau: float, *, clamp: bool = False, rng=None):
    """Sample continuous eigenvalues r exp(i theta) and return (alpha_re, alpha_im).

    The sector must lie strictly in the open second quadrant. With
    ``clamp=True`` a theta_min at or below pi/2 is raised to pi/2 + 0.01 and
    logged rather than rejected.
    """
    nyquist = np.pi / tau
    if not (0.0 < spec.r_min <= spec.r_max <= nyquist * (1 + 1e-12)):
        raise ValueError(f"continuous ring needs 0 < r_min <= r_max <= pi/tau = {nyquist:.6g}")
    theta_min = spec.theta_min
    if theta_min <= np.pi / 2:
        if not clamp:
            raise ValueError(
                f"theta_min = {theta_min:.6g} <= pi/2 would give eigenvalues with Re >= 0"
            )
        theta_min = np.pi / 2 + 0.01
        log.warning("continuous ring: theta_min %.6g clamped to pi/2 + 0.01", spec.theta_min)
    if not (theta_min <= spec.theta_max <= np.pi):
        raise ValueError(f"continuous ring needs theta_min <= theta_max <= pi, got {spec.theta_max}")
    rng = make_rng(spec.seed if rng is None else rng)
    r = rng.uniform(spec.r_min, spec.r_max, n_lambda)
    theta = rng.uniform(theta_min, spec.theta_max, n_lambda)
    lam = r * np.exp(1j * theta)
    if np.any(lam.real >= 0) or np.any(lam.imag <= 0):
        raise ValueError("sampled eigenvalue left the open second quadrant")
    return np.log(-lam.real), np.log(lam.imag)


def hippo_legs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Normal part of HiPPO-LegS and its rank-one term, A_LegS = a_normal - p p'."""
    if n < 1:
        raise ValueError("n must be at least 1")
    idx = np.arange(1, n + 1) - 0.5
    outer = np.sqrt(np.outer(idx, idx))
    a_normal = np.where(np.less.outer(idx, idx), outer, -outer)
    np.fill_diagonal(a_normal, -0.5)
    return a_normal, np.sqrt(idx)


@dataclass(frozen=True)
class HippoFactors:
    lambda_c: np.ndarray
    p_proj: np.ndarray
    q_proj: np.ndarray
    b_c: np.ndarray
    v: np.ndarray


def hippo_dplr_init(n_lambda: int, n_u: int = 1, *, half: bool = False, project_b: bool = True) -> HippoFactors:
    """Eigenprojection of HiPPO-LegS onto diag(lambda) - p_proj q_proj^*.

    With ``half=True`` the matrix of size 2 n_lambda is decomposed and only
    the eigenvalues with positive imaginary part are kept, as needed by the
    conjugate-pair half system.
    """
    size = 2 * n_lambda if half else n_lambda
    a_normal, p = hippo_legs(size)
    skew = a_normal + 0.5 * np.eye(size)
    # i * skew is Hermitian, so eigh gives a unitary eigenbasis
    w, v = np.linalg.eigh(1j * skew)
    lam = -0.5 - 1j * w
    order = np.argsort(lam.imag, kind="stable")
    lam, v = lam[order], v[:, order]
    if half:
        keep = lam.imag > 0
        if keep.sum() != n_lambda:
            raise np.linalg.LinAlgError("HiPPO spectrum did not split into conjugate pairs")
        lam, v = lam[keep], v[:, keep]
    b_raw = np.repeat(np.sqrt(2.0 * np.arange(size) + 1.0)[:, None], n_u, axis=1)
    p_proj = (v.conj().T @ p)[:, None]
    b_c = v.conj().T @ b_raw if project_b else b_raw.astype(complex)
    return HippoFactors(lambda_c=lam, p_proj=p_proj, q_proj=p_proj.copy(), b_c=b_c, v=v)


def hippo_diag_init(n_lambda: int, n_u: int = 1, *, half: bool = False, project_b: bool = True):
    h = hippo_dplr_init(n_lambda, n_u, half=half, project_b=project_b)
    return h.lambda_c, h.b_c


def xavier_init(rows: int, cols: int, complex: bool = False, seed=None) -> np.ndarray:
    """Normal entries with variance 1/cols, split evenly between real and imaginary parts."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    rng = make_rng(seed)
    if not complex:
        return rng.normal(0.0, math.sqrt(1.0 / cols), (rows, cols))
    sd = math.sqrt(0.5 / cols)
    return rng.normal(0.0, sd, (rows, cols)) + 1j * rng.normal(0.0, sd, (rows, cols))


def nyquist_guard(lambda_c, gamma, tau: float, mode="warn") -> tuple[np.ndarray, list[str]]:
    """Flag or shrink the timescale so continuous eigenvalues stay inside pi/tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    mode = NyquistMode(mode)
    lam = np.asarray(lambda_c, dtype=complex)
    gamma = np.asarray(gamma, dtype=float)
    g = np.broadcast_to(gamma, lam.shape)
    nyquist = np.pi / tau
    freq = np.abs((g * lam).imag)
    if mode is NyquistMode.WARN:
        warnings = [
            f"eigenvalue {j}: |Im(gamma lambda)| = {f:.6g} exceeds pi/tau = {nyquist:.6g}"
            for j, f in enumerate(freq)
            if f > nyquist
        ]
        for w in warnings:
            log.warning(w)
        return gamma, warnings
    top = freq.max() if freq.size else 0.0
    scale = min(1.0, 0.95 * nyquist / top) if top > 0 else 1.0
    warnings = [] if scale == 1.0 else [f"timescale rescaled by {scale:.6g} to respect pi/tau"]
    return gamma * scale, warnings


def log_uniform(low: float, high: float, size, rng) -> np.ndarray:
    return np.exp(rng.uniform(math.log(low), math.log(high), size))
