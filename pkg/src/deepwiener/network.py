"""Parametrized layer stacks: architecture description, initialization, forward pass."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from deepwiener import initialization as ini
from deepwiener.core import Activation, SsLayer, SsModel, Structure, pre_activation
from deepwiener.discretization import DiscretizationMethod
from deepwiener.engines import scan_states, sequential_states
from deepwiener.parametrizations import CtDiagParams, DplrParams, LruParams, realize

log = logging.getLogger(__name__)

KINDS = ("lru", "ct_diag", "dplr")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_u: int
    n_y: int
    n_lambda: int
    n_r: int = 1
    gamma_mode: str = "diagonal"
    q_equals_p: bool = True
    tau: float = 1.0
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parametrization {self.kind!r}; choose from {KINDS}")
        if self.gamma_mode not in ("scalar", "diagonal"):
            raise ValueError("gamma_mode must be 'scalar' or 'diagonal'")
        if self.kind == "dplr" and not 1 <= self.n_r <= self.n_lambda / 2:
            raise ValueError(f"low-rank width n_r={self.n_r} must satisfy 1 <= n_r <= n_lambda/2")

    @property
    def skip_identity(self) -> bool:
        return self.n_u == self.n_y


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerSpec, ...]
    activation: Activation = field(default_factory=Activation)
    method: DiscretizationMethod = DiscretizationMethod.ZOH

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "method", DiscretizationMethod(self.method))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_y != b.n_u:
                raise ValueError("consecutive layer dimensions do not chain")

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(s) for s in self.layers],
            "activation": {"kind": self.activation.kind.value, "elu_alpha": self.activation.elu_alpha},
            "method": self.method.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            layers=tuple(LayerSpec(**s) for s in d["layers"]),
            activation=Activation(**d["activation"]),
            method=d["method"],
        )


def dimension_plan(n_u: int, n_y: int, n_layers: int, hidden: int) -> list[tuple[int, int]]:
    """(n_u, n_y) per layer with every intermediate output of size ``hidden``."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    outs = [hidden] * (n_layers - 1) + [n_y]
    ins = [n_u] + outs[:-1]
    return list(zip(ins, outs))


@partial(jax.tree_util.register_dataclass, data_fields=["layers"], meta_fields=["arch"])
@dataclass(frozen=True)
class WienerNet:
    layers: tuple
    arch: Architecture

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def realize(self, *, transfer: bool = False) -> SsModel:
        out = []
        for spec, p in zip(self.arch.layers, self.layers):
            if transfer and isinstance(p, DplrParams):
                lti = realize(p, DiscretizationMethod.BILINEAR, transfer=True)
            else:
                lti = realize(p, self.arch.method)
            out.append(SsLayer(lti, self.arch.activation, spec.skip_identity))
        return SsModel(tuple(out))

    def spectral_radii(self) -> list[float]:
        return [realize(p, self.arch.method).spectral_radius() for p in self.layers]

    def __call__(self, u):
        return forward(self, u)


def forward(net: WienerNet, u):
    """Differentiable free-run simulation; scan for diagonal layers, recurrence for dense ones."""
    y = jnp.asarray(u, dtype=jnp.float64)
    for p in net.layers:
        lti = realize(p, net.arch.method)
        if lti.structure is Structure.DIAGONAL:
            x = scan_states(lti, y)
        else:
            x = sequential_states(lti, y)
        eta = pre_activation(lti, x, y)
        y = net.arch.activation(eta) + y @ lti.f.T
    return y


# --------------------------------------------------------------------------
# initialization


@dataclass(frozen=True)
class InitOptions:
    """How to initialize every layer of an architecture.

    ``strategy`` is ``"ring"`` or ``"hippo"``. Ring bounds for continuous
    layers are absolute moduli unless ``ring_units == "nyquist"``, in which
    case they are fractions of pi / tau. ``gamma`` is a constant or a
    (low, high) pair sampled log-uniformly.
    """

    strategy: str = "ring"
    r_min: float = 0.5
    r_max: float = 0.95
    theta_min: float = 0.0
    theta_max: float = np.pi
    ring_units: str = "absolute"
    clamp_phase: bool = True
    gamma: float | tuple[float, float] = 1.0
    nyquist: str = "warn"
    project_b: bool = True
    low_rank_scale: float = 0.1


def _gamma(spec: LayerSpec, opts: InitOptions, rng) -> np.ndarray:
    size = () if spec.gamma_mode == "scalar" else (spec.n_lambda,)
    if isinstance(opts.gamma, (tuple, list)):
        lo, hi = opts.gamma
        return ini.log_uniform(lo, hi, size, rng)
    return np.full(size, float(opts.gamma))


def _skip_init(spec: LayerSpec, rng):
    return None if spec.skip_identity else ini.xavier_init(spec.n_y, spec.n_u, seed=rng)


def _ct_eigs(spec: LayerSpec, opts: InitOptions, rng):
    """Continuous half-system eigenvalues and input matrix for the chosen strategy."""
    if opts.strategy == "hippo":
        return ini.hippo_diag_init(spec.n_lambda, spec.n_u, half=True, project_b=opts.project_b)
    scale = np.pi / spec.tau if opts.ring_units == "nyquist" else 1.0
    ring = ini.RingSpec(opts.r_min * scale, opts.r_max * scale, opts.theta_min, opts.theta_max)
    a_re, a_im = ini.init_ct_ring(spec.n_lambda, ring, spec.tau, clamp=opts.clamp_phase, rng=rng)
    lam = -np.exp(a_re) + 1j * np.exp(a_im)
    return lam, ini.xavier_init(spec.n_lambda, spec.n_u, complex=True, seed=rng)


def init_layer(spec: LayerSpec, opts: InitOptions, rng):
    rng = ini.make_rng(rng)
    if spec.kind == "lru":
        ring = ini.RingSpec(opts.r_min, opts.r_max, opts.theta_min, opts.theta_max)
        mu, theta = ini.init_lru_ring(spec.n_lambda, ring, rng=rng)
        return LruParams(
            mu=jnp.asarray(mu),
            theta=jnp.asarray(theta),
            b_check=jnp.asarray(ini.xavier_init(spec.n_lambda, spec.n_u, complex=True, seed=rng)),
            c_tilde=jnp.asarray(ini.xavier_init(spec.n_y, spec.n_lambda, complex=True, seed=rng)),
            d=jnp.zeros((spec.n_y, spec.n_u)),
            f=None if spec.skip_identity else jnp.asarray(_skip_init(spec, rng)),
        )

    lam, b_c = _ct_eigs(spec, opts, rng)
    c_c = ini.xavier_init(spec.n_y, spec.n_lambda, complex=True, seed=rng)
    f = _skip_init(spec, rng)
    gamma = _gamma(spec, opts, rng)
    if opts.nyquist != "off":
        gamma, _ = ini.nyquist_guard(lam, gamma, spec.tau, opts.nyquist)
    f = None if f is None else jnp.asarray(f)

    if spec.kind == "ct_diag":
        return CtDiagParams(
            alpha_re=jnp.log(-lam.real), alpha_im=jnp.log(lam.imag), b_c=jnp.asarray(b_c),
            c_c=jnp.asarray(c_c), log_gamma=jnp.log(jnp.asarray(gamma)), f=f, tau=spec.tau,
        )

    if opts.strategy == "hippo":
        h = ini.hippo_dplr_init(spec.n_lambda, spec.n_u, half=True, project_b=opts.project_b)
        p = np.zeros((spec.n_lambda, spec.n_r), dtype=complex)
        p[:, :1] = h.p_proj
    else:
        p = opts.low_rank_scale * ini.xavier_init(spec.n_lambda, spec.n_r, complex=True, seed=rng)
    q = None if spec.q_equals_p else jnp.asarray(p.copy())
    # phi(alpha) = max(0, alpha) + epsilon reproduces -Re(lambda) exactly when it exceeds epsilon
    alpha_re = np.maximum(-lam.real - spec.epsilon, 0.0)
    return DplrParams(
        alpha_re=jnp.asarray(alpha_re), alpha_im=jnp.asarray(lam.imag), p=jnp.asarray(p), q=q,
        b_c=jnp.asarray(b_c), c_c=jnp.asarray(c_c), log_gamma=jnp.log(jnp.asarray(gamma)), f=f,
        tau=spec.tau, epsilon=spec.epsilon,
    )


def init_network(arch: Architecture, opts: InitOptions | dict | None = None, seed: int = 0) -> WienerNet:
    if opts is None:
        opts = InitOptions()
    elif isinstance(opts, dict):
        opts = InitOptions(**opts)
    rngs = ini.spawn_rngs(seed, len(arch.layers))
    return WienerNet(tuple(init_layer(s, opts, r) for s, r in zip(arch.layers, rngs)), arch)


def template(arch: Architecture) -> WienerNet:
    """Zero-valued parameters with the right shapes, used to restore checkpoints."""
    layers = []
    for s in arch.layers:
        n, nu, ny = s.n_lambda, s.n_u, s.n_y
        zc = lambda *shape: jnp.zeros(shape, jnp.complex128)  # noqa: E731
        f = None if s.skip_identity else jnp.zeros((ny, nu))
        g = jnp.zeros(() if s.gamma_mode == "scalar" else (n,))
        if s.kind == "lru":
            layers.append(LruParams(jnp.zeros(n), jnp.zeros(n), zc(n, nu), zc(ny, n), jnp.zeros((ny, nu)), f))
        elif s.kind == "ct_diag":
            layers.append(CtDiagParams(jnp.zeros(n), jnp.zeros(n), zc(n, nu), zc(ny, n), g, f, s.tau))
        else:
            q = None if s.q_equals_p else zc(n, s.n_r)
            layers.append(DplrParams(jnp.zeros(n), jnp.zeros(n), zc(n, s.n_r), q, zc(n, nu), zc(ny, n), g, f, s.tau, s.epsilon))
    return WienerNet(tuple(layers), arch)
