"""Datasets, normalization, subsequence windows, RMSE/FIT metrics and a synthetic Wiener generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")


class DataError(ValueError):
    pass


class ColumnCountError(DataError):
    pass


@dataclass(frozen=True)
class Sequence:
    u: np.ndarray
    y: np.ndarray
    role: str | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        y = np.asarray(self.y, dtype=float)
        u = u[:, None] if u.ndim == 1 else u
        y = y[:, None] if y.ndim == 1 else y
        if u.ndim != 2 or y.ndim != 2 or u.shape[0] != y.shape[0]:
            raise DataError(f"input {u.shape} and output {y.shape} must be [T x channels] with equal T")
        if self.role is not None and self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    @property
    def length(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class NormalizationStats:
    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def u(self, u):
        return (np.asarray(u) - self.u_mean) / self.u_std

    def y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_std

    def inverse_u(self, u):
        return np.asarray(u) * self.u_std + self.u_mean

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass(frozen=True)
class Dataset:
    sequences: tuple
    tau: float
    norm: NormalizationStats | None = None

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if not self.tau > 0:
            raise DataError(f"sampling time must be positive, got {self.tau}")
        for role in ROLES:
            lengths = {s.length for s in self.role(role)}
            if len(lengths) > 1:
                raise DataError(f"sequences in role {role!r} have different lengths {sorted(lengths)}")

    def __len__(self):
        return len(self.sequences)

    def role(self, role: str) -> list[Sequence]:
        return [s for s in self.sequences if s.role == role]

    def arrays(self, role: str) -> tuple[np.ndarray, np.ndarray]:
        seqs = self.role(role)
        if not seqs:
            return np.zeros((0, 0, 0)), np.zeros((0, 0, 0))
        return np.stack([s.u for s in seqs]), np.stack([s.y for s in seqs])

    @property
    def n_u(self) -> int:
        return self.sequences[0].u.shape[1]

    @property
    def n_y(self) -> int:
        return self.sequences[0].y.shape[1]


def load_csv(path, n_u: int, n_y: int, tau: float) -> Dataset:
    """Read one sample table (u columns, then y columns) as an untagged single-sequence dataset."""
    path = Path(path)
    width = n_u + n_y
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if not rows and lineno == 1:
                    log.info("%s: skipping header line %r", path, ",".join(row))
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if len(values) != width:
                raise ColumnCountError(f"{path}:{lineno}: expected {width} columns, found {len(values)}")
            bad = [j for j, v in enumerate(values) if not math.isfinite(v)]
            if bad:
                raise DataError(f"{path}:{lineno}: non-finite value in column {bad[0] + 1}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    table = np.asarray(rows)
    return Dataset((Sequence(table[:, :n_u], table[:, n_u:]),), tau)


def window_starts(total: int, length: int, count: int, policy: str = "disjoint", *, seed=None,
                  stride: float | None = None) -> np.ndarray:
    """Start indices of ``count`` windows of ``length`` samples inside ``total`` samples.

    ``disjoint`` packs windows back to back and fails when they do not fit;
    ``even`` spreads them with a constant (possibly fractional) stride that
    defaults to the one landing the last window on the end; ``random``
    draws starts uniformly with the given seed.
    """
    if length < 1 or count < 0:
        raise DataError("window length must be positive and count non-negative")
    if length > total:
        raise DataError(f"window length {length} exceeds sequence length {total}")
    span = total - length
    if policy == "disjoint":
        if count * length > total:
            raise DataError(f"{count} disjoint windows of {length} do not fit in {total} samples")
        return np.arange(count) * length
    if policy == "even":
        if stride is None:
            stride = span / (count - 1) if count > 1 else 0.0
        starts = np.floor(np.arange(count) * stride + 1e-9).astype(int)
        if count and starts[-1] > span:
            raise DataError(f"stride {stride} places window {count - 1} past the end")
        return starts
    if policy == "random":
        return np.sort(np.random.default_rng(seed).integers(0, span + 1, count))
    raise DataError(f"unknown window policy {policy!r}")


def extract_subsequences(seq: Sequence, length: int, count: int, seed=None, stride: float | None = None,
                         policy: str = "disjoint", role: str | None = None) -> list[Sequence]:
    starts = window_starts(seq.length, length, count, policy, seed=seed, stride=stride)
    role = seq.role if role is None else role
    return [Sequence(seq.u[s:s + length], seq.y[s:s + length], role) for s in starts]


def normalize(dataset: Dataset, stats: NormalizationStats | None = None) -> tuple[Dataset, NormalizationStats]:
    """z-score every role with statistics of the train role (or the ones given)."""
    if stats is None:
        train = dataset.role("train")
        if not train:
            raise DataError("normalization needs a non-empty train role")
        u = np.concatenate([s.u for s in train])
        y = np.concatenate([s.y for s in train])
        stats = NormalizationStats(u.mean(0), u.std(0), y.mean(0), y.std(0))
        for name, std in (("input", stats.u_std), ("output", stats.y_std)):
            zero = np.flatnonzero(std == 0)
            if zero.size:
                raise DataError(f"{name} channel {int(zero[0])} has zero variance in the train role")
    seqs = [Sequence(stats.u(s.u), stats.y(s.y), s.role) for s in dataset.sequences]
    return Dataset(seqs, dataset.tau, stats), stats


def denormalize_y(y, stats: NormalizationStats | None):
    return np.asarray(y) if stats is None else stats.inverse_y(y)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    fit: float
    window: tuple[int, int]
    label: str = ""


def parse_window(spec: str, total: int) -> tuple[int, int]:
    """``full``, ``first-N`` or ``start:end`` to sample bounds; out-of-range requests are errors."""
    if spec == "full":
        return 0, total
    if spec.startswith("first-"):
        bounds = (0, int(spec[len("first-"):]))
    elif ":" in spec:
        a, b = spec.split(":", 1)
        bounds = (int(a) if a else 0, int(b) if b else total)
    else:
        raise ValueError(f"unknown window {spec!r}; use full, first-N or start:end")
    if not 0 <= bounds[0] < bounds[1] <= total:
        raise ValueError(f"window {spec!r} = {bounds} is outside the {total} available samples")
    return bounds


def metrics(y_true, y_pred, window: tuple[int, int] | None = None, scale: float = 1.0,
            label: str = "") -> MetricsReport:
    """RMSE (times ``scale``, e.g. 1000 for volts to mV) and FIT percent over a sample window."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    y_true = y_true.reshape(len(y_true), -1)
    y_pred = y_pred.reshape(len(y_pred), -1)
    total = len(y_true)
    start, end = (0, total) if window is None else window
    if not 0 <= start < end <= total:
        raise ValueError(f"window {(start, end)} outside [0, {total}]")
    yt, yp = y_true[start:end], y_pred[start:end]
    spread = np.linalg.norm(yt - yt.mean(0))
    if spread == 0:
        raise ValueError("constant reference output: FIT is undefined")
    err = np.linalg.norm(yt - yp)
    rmse = float(np.sqrt(np.mean((yt - yp) ** 2))) * scale
    return MetricsReport(rmse, float(100.0 * (1.0 - err / spread)), (int(start), int(end)), label)


def write_metrics(path, reports: list[MetricsReport], extra: dict | None = None) -> str:
    lines = [f"{k}={v}" for k, v in (extra or {}).items()]
    for r in reports:
        lines.append(
            f"window={r.label or f'{r.window[0]}:{r.window[1]}'} start={r.window[0]} end={r.window[1]} "
            f"rmse={r.rmse:.17g} fit={r.fit:.17g}"
        )
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def read_metrics(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("window="):
            rows.append(dict(kv.split("=", 1) for kv in line.split()))
    return rows


def write_residuals(path, y_true, y_pred) -> None:
    y_true = np.asarray(y_true, dtype=float).reshape(len(y_true), -1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(len(y_pred), -1)
    n = y_true.shape[1]
    names = ["y_true", "y_pred", "error"]
    header = ["t"] + (names if n == 1 else [f"{c}_{k}" for k in range(n) for c in names])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(len(y_true)):
            row = [t]
            for k in range(n):
                a, b = float(y_true[t, k]), float(y_pred[t, k])
                row += [repr(a), repr(b), repr(a - b)]
            w.writerow(row)


# --------------------------------------------------------------------------
# synthetic Wiener systems

NONLINEARITIES = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "cubic": lambda x: x + 0.1 * x ** 3,
}


@dataclass(frozen=True)
class WienerTruth:
    """Ground truth of a generated dataset: unit-DC-gain LTI filter then a static map."""

    poles: np.ndarray
    b: np.ndarray
    a: np.ndarray
    nonlinearity: str
    noise_std: float

    def simulate(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        lin = signal.lfilter(self.b, self.a, u, axis=0)
        return NONLINEARITIES[self.nonlinearity](lin)


def _default_poles(order: int) -> np.ndarray:
    pairs = [0.95 * np.exp(1j * w) for w in np.linspace(0.25, 0.9, max(order // 2, 1))][: order // 2]
    poles = [p for z in pairs for p in (z, np.conj(z))]
    if order % 2:
        poles.append(0.8)
    return np.asarray(poles, dtype=complex)


def synth_wiener(order: int = 2, nonlinearity: str = "tanh", T: int = 512, n_seq: int = 64,
                 noise_std: float | None = 0.0, seed: int = 0, *, n_val: int = 16, n_test: int = 1,
                 poles=None, snr_db: float | None = None, excitation: str = "noise",
                 amplitude: float = 1.0, tau: float = 1.0) -> tuple[Dataset, WienerTruth]:
    """Simulate a known Wiener system on ``n_seq`` train, ``n_val`` val and ``n_test`` test sequences.

    ``snr_db`` overrides ``noise_std`` with the noise level giving that
    signal-to-noise ratio on the noise-free train outputs. The first
    ``order`` output samples are kept, so sequences start from rest.
    """
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"nonlinearity must be one of {sorted(NONLINEARITIES)}")
    poles = _default_poles(order) if poles is None else np.asarray(poles, dtype=complex)
    if len(poles) != order:
        raise ValueError(f"{len(poles)} poles given for order {order}")
    if np.any(np.abs(poles) >= 1):
        raise ValueError(f"unstable pole requested: {poles[np.abs(poles) >= 1][0]}")
    a = np.real(np.poly(poles))
    # one-sample delay and unit DC gain
    b = np.concatenate([[0.0], [a.sum()]])
    rng = np.random.default_rng(seed)
    n_total = n_seq + n_val + n_test
    if excitation == "noise":
        u = amplitude * rng.standard_normal((n_total, T, 1))
    elif excitation == "multisine":
        k = np.arange(1, T // 4)
        phases = rng.uniform(0, 2 * np.pi, (n_total, k.size))
        t = np.arange(T)
        u = np.stack([np.cos(2 * np.pi * np.outer(t, k) / T + ph).sum(1) for ph in phases])
        u = amplitude * (u / u.std(axis=1, keepdims=True))[..., None]
    else:
        raise ValueError("excitation must be 'noise' or 'multisine'")
    truth = WienerTruth(poles, b, a, nonlinearity, 0.0)
    clean = np.stack([truth.simulate(ui) for ui in u])
    if snr_db is not None:
        power = np.mean(clean[:n_seq] ** 2)
        noise_std = float(np.sqrt(power / 10 ** (snr_db / 10)))
    noise_std = float(noise_std or 0.0)
    y = clean + noise_std * rng.standard_normal(clean.shape)
    truth = replace(truth, noise_std=noise_std)
    roles = ["train"] * n_seq + ["val"] * n_val + ["test"] * n_test
    seqs = [Sequence(u[i], y[i], r) for i, r in enumerate(roles)]
    return Dataset(seqs, tau), truth
