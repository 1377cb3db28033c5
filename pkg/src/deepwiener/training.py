"""Simulation-error minimization: loss, gradients, Adam, plateau schedule, early stopping."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np

from deepwiener.core import DimensionError, NumericError, SsModel
from deepwiener.engines import ssm_forward
from deepwiener.network import Architecture, WienerNet, forward, template

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deepwiener-checkpoint"


class TrainingError(NumericError):
    pass


# --------------------------------------------------------------------------
# flat parameter vector (complex leaves split into real and imaginary parts)


class ParamLayout:
    """Maps a parameter pytree to a flat real vector and back."""

    def __init__(self, tree):
        with_path, self.treedef = jax.tree_util.tree_flatten_with_path(tree)
        self.entries = []
        offset = 0
        for path, leaf in with_path:
            arr = np.asarray(leaf)
            cplx = np.iscomplexobj(arr)
            size = arr.size * (2 if cplx else 1)
            self.entries.append((jax.tree_util.keystr(path), arr.shape, cplx, offset, size))
            offset += size
        self.size = offset

    def flatten(self, tree) -> np.ndarray:
        parts = []
        for leaf in jax.tree_util.tree_leaves(tree):
            arr = np.asarray(leaf)
            if np.iscomplexobj(arr):
                parts += [arr.real.ravel(), arr.imag.ravel()]
            else:
                parts.append(arr.ravel().astype(np.float64))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, theta):
        leaves = []
        for _, shape, cplx, offset, size in self.entries:
            chunk = theta[offset:offset + size]
            if cplx:
                half = size // 2
                leaves.append((chunk[:half] + 1j * chunk[half:]).reshape(shape))
            else:
                leaves.append(chunk.reshape(shape))
        return jax.tree_util.tree_unflatten(self.treedef, leaves)

    def block_of(self, index: int) -> str:
        for name, _, cplx, offset, size in self.entries:
            if offset <= index < offset + size:
                if cplx:
                    return name + (".real" if index < offset + size // 2 else ".imag")
                return name
        raise IndexError(index)

    def key(self):
        return self.treedef, tuple((s, c) for _, s, c, _, _ in self.entries)


_compiled: dict = {}


def _functions(layout: ParamLayout):
    """Jitted (loss, loss-and-grad) of the flat parameter vector, cached per layout."""
    key = layout.key()
    if key not in _compiled:
        def loss(theta, u, y):
            return jnp.mean((forward(layout.unflatten(theta), u) - y) ** 2)

        _compiled[key] = (jax.jit(loss), jax.jit(jax.value_and_grad(loss)))
    return _compiled[key]


def _as_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 3:
        u, y = batch
    else:
        def col(a):
            a = np.asarray(a, dtype=float)
            return a[:, None] if a.ndim == 1 else a

        pairs = list(batch)
        u = np.stack([col(p[0]) for p in pairs])
        y = np.stack([col(p[1]) for p in pairs])
    return jnp.asarray(u, dtype=jnp.float64), jnp.asarray(y, dtype=jnp.float64)


def _check_dims(model, u, y):
    layers = model.arch.layers if isinstance(model, WienerNet) else model.layers
    n_u, n_y = layers[0].n_u, layers[-1].n_y
    if u.shape[-1] != n_u or y.shape[-1] != n_y or u.shape[:-1] != y.shape[:-1]:
        raise DimensionError(
            f"batch shapes {u.shape} / {y.shape} do not match model ({n_u} in, {n_y} out)"
        )


def mse_loss(model, batch) -> float:
    """Mean over sequences of the mean squared free-run simulation error."""
    u, y = _as_batch(batch)
    _check_dims(model, u, y)
    if isinstance(model, SsModel):
        return float(jnp.mean((ssm_forward(model, u) - y) ** 2))
    layout = ParamLayout(model)
    loss, _ = _functions(layout)
    return float(loss(jnp.asarray(layout.flatten(model)), u, y))


def grad(model: WienerNet, batch) -> np.ndarray:
    """Reverse-mode gradient of :func:`mse_loss`, aligned with ``ParamLayout(model).flatten``."""
    u, y = _as_batch(batch)
    _check_dims(model, u, y)
    layout = ParamLayout(model)
    _, loss_grad = _functions(layout)
    _, g = loss_grad(jnp.asarray(layout.flatten(model)), u, y)
    g = np.asarray(g)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericError(f"non-finite gradient in {layout.block_of(int(bad[0]))}", int(bad[0]))
    return g


@dataclass
class GradientReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_gap: np.ndarray
    roundoff: np.ndarray
    names: list = field(default_factory=list)

    @property
    def max_gap(self) -> float:
        return float(self.rel_gap.max()) if self.rel_gap.size else 0.0

    @property
    def median_gap(self) -> float:
        return float(np.median(self.rel_gap)) if self.rel_gap.size else 0.0

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.rel_gap, q)) if self.rel_gap.size else 0.0


def check_gradient(fun: Callable, analytic: np.ndarray, theta: np.ndarray, *, step: float = 1e-5,
                   sample_count: int | None = None, seed: int = 0) -> GradientReport:
    """Central-difference audit of ``analytic`` against ``fun`` at ``theta``.

    Each coordinate moves by ``step * max(1, |theta_i|)``. Gaps are relative
    to max(|analytic|, |numeric|, 1e-7 * max|analytic|) so coordinates that
    are zero on both sides score zero. A coordinate is flagged as roundoff
    dominated when the cancellation error bound of the difference quotient
    exceeds 1% of that scale.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    n = theta.size
    if sample_count is None or sample_count >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, sample_count, replace=False))
    f0 = abs(float(fun(theta)))
    numeric = np.empty(idx.size)
    hs = step * np.maximum(1.0, np.abs(theta[idx]))
    for k, (i, h) in enumerate(zip(idx, hs)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        numeric[k] = (float(fun(tp)) - float(fun(tm))) / (2 * h)
    a = analytic[idx]
    floor = 1e-7 * max(float(np.max(np.abs(analytic))) if analytic.size else 0.0, np.finfo(float).tiny)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    roundoff = 4 * np.finfo(float).eps * max(f0, 1.0) / hs > 1e-2 * scale
    return GradientReport(idx, a, numeric, np.abs(a - numeric) / scale, roundoff)


def finite_diff_check(model: WienerNet, batch, step: float = 1e-5, sample_count: int | None = None,
                      seed: int = 0) -> GradientReport:
    u, y = _as_batch(batch)
    layout = ParamLayout(model)
    loss, _ = _functions(layout)
    theta = layout.flatten(model)
    report = check_gradient(lambda t: loss(jnp.asarray(t), u, y), grad(model, (u, y)), theta,
                            step=step, sample_count=sample_count, seed=seed)
    report.names = [layout.block_of(int(i)) for i in report.indices]
    return report


# --------------------------------------------------------------------------
# optimizer state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 40
    lr0: float = 0.003
    plateau_patience: int = 30
    plateau_factor: float = 0.8
    early_stop_patience: int = 150
    max_epochs: int = 2750
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        for name in ("plateau_patience", "early_stop_patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass(frozen=True)
class TrainState:
    theta: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    lr: float
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    best_theta: np.ndarray | None = None
    best_epoch: int = -1
    epochs_since_improve: int = 0
    best_train_loss: float = math.inf
    plateau_count: int = 0
    stopped_early: bool = False
    history: tuple = ()

    @classmethod
    def initial(cls, theta, lr: float) -> "TrainState":
        theta = np.asarray(theta, dtype=float)
        return cls(theta=theta.copy(), adam_m=np.zeros_like(theta), adam_v=np.zeros_like(theta), lr=lr,
                   best_theta=theta.copy())


def adam_update(state: TrainState, g, config: TrainConfig = TrainConfig()) -> TrainState:
    g = np.asarray(g, dtype=float)
    if g.shape != state.theta.shape:
        raise DimensionError(f"gradient length {g.size} does not match {state.theta.size} parameters")
    t = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * state.adam_m + (1 - b1) * g
    v = b2 * state.adam_v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = state.theta - state.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return dataclasses.replace(state, theta=theta, adam_m=m, adam_v=v, step=t)


def plateau_scheduler(state: TrainState, config: TrainConfig = TrainConfig()) -> TrainState:
    """Shrink the learning rate once the training loss has stalled for ``plateau_patience`` epochs."""
    if not state.history:
        raise ValueError("scheduler needs at least one epoch of history")
    loss = state.history[-1].train_loss
    if loss < state.best_train_loss * (1 - 1e-12) or not math.isfinite(state.best_train_loss):
        return dataclasses.replace(state, best_train_loss=loss, plateau_count=0)
    count = state.plateau_count + 1
    if count >= config.plateau_patience:
        return dataclasses.replace(state, lr=state.lr * config.plateau_factor, plateau_count=0)
    return dataclasses.replace(state, plateau_count=count)


def early_stopping(state: TrainState, config: TrainConfig = TrainConfig()) -> TrainState:
    """Track the best validation snapshot; flag a stop after ``early_stop_patience`` idle epochs."""
    rec = state.history[-1]
    if rec.val_loss < state.best_val_loss:
        return dataclasses.replace(state, best_val_loss=rec.val_loss, best_theta=state.theta.copy(),
                                   best_epoch=rec.epoch, epochs_since_improve=0)
    since = state.epochs_since_improve + 1
    return dataclasses.replace(state, epochs_since_improve=since,
                               stopped_early=since >= config.early_stop_patience)


def record_epoch(state: TrainState, train_loss: float, val_loss: float) -> TrainState:
    rec = EpochRecord(state.epoch, float(train_loss), float(val_loss), state.lr)
    return dataclasses.replace(state, history=state.history + (rec,))


def train(model: WienerNet, dataset, config: TrainConfig = TrainConfig(), *,
          callback: Callable[[TrainState], None] | None = None, log_every: int = 0):
    """Epoch/batch loop; returns the best-validation model and the final state."""
    u_tr, y_tr = dataset.arrays("train")
    u_va, y_va = dataset.arrays("val")
    if len(u_tr) == 0 or len(u_va) == 0:
        raise ValueError("training needs non-empty train and val roles")
    _check_dims(model, jnp.asarray(u_tr), jnp.asarray(y_tr))
    layout = ParamLayout(model)
    loss_fn, loss_grad = _functions(layout)
    state = TrainState.initial(layout.flatten(model), config.lr0)
    if config.max_epochs == 0:
        return model, state

    u_tr, y_tr = jnp.asarray(u_tr), jnp.asarray(y_tr)
    u_va, y_va = jnp.asarray(u_va), jnp.asarray(y_va)
    rng = np.random.default_rng(config.seed)
    n = u_tr.shape[0]
    for epoch in range(config.max_epochs):
        state = dataclasses.replace(state, epoch=epoch)
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            loss, g = loss_grad(jnp.asarray(state.theta), u_tr[idx], y_tr[idx])
            loss, g = float(loss), np.asarray(g)
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {b}", (epoch, b))
            state = adam_update(state, g, config)
            total += loss * idx.size
        val = float(loss_fn(jnp.asarray(state.theta), u_va, y_va))
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", (epoch, None))
        radii = layout.unflatten(jnp.asarray(state.theta)).spectral_radii()
        if max(radii) >= 1.0:
            raise TrainingError(f"layer lost Schur stability at epoch {epoch}: {radii}", (epoch, None))
        state = record_epoch(state, total / n, val)
        state = plateau_scheduler(state, config)
        state = early_stopping(state, config)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, total / n, val, state.lr)
        if callback is not None:
            callback(state)
        if state.stopped_early:
            break
    state = dataclasses.replace(state, epoch=state.epoch + 1)
    best = layout.unflatten(jnp.asarray(state.best_theta))
    return best, state


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: WienerNet
    state: TrainState | None
    config: dict
    norm: dict | None
    meta: dict


def save_checkpoint(path, model: WienerNet, state: TrainState | None = None, *, config: dict | None = None,
                    norm: dict | None = None) -> None:
    layout = ParamLayout(model)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "architecture": model.arch.to_dict(),
        "parametrizations": [s.kind for s in model.arch.layers],
        "blocks": [name for name, *_ in layout.entries],
        "config": config or {},
        "norm": norm,
    }
    arrays = {"theta": layout.flatten(model)}
    if state is not None:
        meta["state"] = {
            "lr": state.lr, "step": state.step, "epoch": state.epoch, "best_val_loss": state.best_val_loss,
            "best_epoch": state.best_epoch, "epochs_since_improve": state.epochs_since_improve,
            "best_train_loss": state.best_train_loss, "plateau_count": state.plateau_count,
            "stopped_early": state.stopped_early,
            "history": [dataclasses.asdict(r) for r in state.history],
        }
        arrays.update(state_theta=state.theta, adam_m=state.adam_m, adam_v=state.adam_v,
                      best_theta=state.best_theta)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        arch = Architecture.from_dict(meta["architecture"])
        layout = ParamLayout(template(arch))
        model = layout.unflatten(jnp.asarray(z["theta"]))
        state = None
        if "state" in meta:
            s = dict(meta["state"])
            history = tuple(EpochRecord(**r) for r in s.pop("history"))
            state = TrainState(theta=z["state_theta"], adam_m=z["adam_m"], adam_v=z["adam_v"],
                               best_theta=z["best_theta"], history=history, **s)
    return Checkpoint(model=model, state=state, config=meta["config"], norm=meta["norm"], meta=meta)
