"""Command-line entry point: train, eval, bench, inspect, synth.

Exit codes: 0 success, 2 configuration or dimension error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import jax
import numpy as np
import yaml

from deepwiener._threads import ENV as THREADS_ENV
from deepwiener.config import ConfigError, RunConfig, dump_config, load_config
from deepwiener.core import DimensionError, NumericError, UnsupportedStructureError
from deepwiener.data import (
    ColumnCountError,
    DataError,
    Dataset,
    MetricsReport,
    NormalizationStats,
    Sequence,
    extract_subsequences,
    load_csv,
    metrics,
    normalize,
    parse_window,
    synth_wiener,
    write_metrics,
    write_residuals,
)
from deepwiener.engines import ENGINES, ssm_forward
from deepwiener.network import WienerNet, forward, init_network
from deepwiener.parametrizations import spectrum_report
from deepwiener.training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("deepwiener")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_WINDOWS = ("first-25000", "full")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# data assembly


def _experiments(path: str, n_u: int, n_y: int, tau: float, length: int | None) -> list[Sequence]:
    seq = load_csv(path, n_u, n_y, tau).sequences[0]
    if length is None:
        return [seq]
    count = seq.length // length
    if count == 0:
        raise DataError(f"{path}: {seq.length} samples cannot hold one experiment of {length}")
    return [Sequence(seq.u[k * length:(k + 1) * length], seq.y[k * length:(k + 1) * length])
            for k in range(count)]


def build_dataset(cfg: RunConfig) -> Dataset:
    """Windows for train/val from the configured files plus the full-length test record, normalized."""
    d, m = cfg.data, cfg.model
    if not d.train_paths:
        raise DataError("no training data configured (data.train_paths is empty)")
    train_exp = [e for p in d.train_paths for e in _experiments(p, m.n_u, m.n_y, d.tau, d.experiment_length)]
    val_exp = [e for p in d.val_paths for e in _experiments(p, m.n_u, m.n_y, d.tau, d.experiment_length)]
    if not val_exp and d.val_experiments:
        if d.val_experiments >= len(train_exp):
            raise DataError(f"val_experiments={d.val_experiments} leaves no training experiment")
        train_exp, val_exp = train_exp[:-d.val_experiments], train_exp[-d.val_experiments:]
    if not val_exp:
        # hold out the tail of every experiment
        cut = [int(round(e.length * (1 - d.val_fraction))) for e in train_exp]
        val_exp = [Sequence(e.u[c:], e.y[c:]) for e, c in zip(train_exp, cut)]
        train_exp = [Sequence(e.u[:c], e.y[:c]) for e, c in zip(train_exp, cut)]
    seqs = []
    for k, (role, group) in enumerate((("train", train_exp), ("val", val_exp))):
        for j, e in enumerate(group):
            seqs += extract_subsequences(e, d.window_length, d.windows_per_experiment, seed=d.window_seed + 1000 * k + j,
                                         stride=d.window_stride, policy=d.window_policy, role=role)
    if d.test_path:
        t = load_csv(d.test_path, m.n_u, m.n_y, d.tau).sequences[0]
        seqs.append(Sequence(t.u, t.y, "test"))
    ds, _ = normalize(Dataset(seqs, d.tau))
    return ds


_jit_forward = jax.jit(forward)


def predict(net: WienerNet, u_raw, norm) -> np.ndarray:
    """Free-run simulation in native units for raw inputs shaped (T, n_u) or (N, T, n_u)."""
    u = np.asarray(u_raw, dtype=float)
    if norm is not None:
        u = norm.u(u)
    y = np.asarray(_jit_forward(net, u))
    return y if norm is None else norm.inverse_y(y)


def evaluate(net, norm, u_raw, y_raw, windows, scale: float, *, explicit: bool) -> tuple[list[MetricsReport], np.ndarray]:
    y_hat = predict(net, u_raw, norm)
    total = len(y_raw)
    reports = []
    for w in windows:
        try:
            bounds = parse_window(w, total)
        except ValueError as err:
            if explicit:
                raise CliError(EXIT_CONFIG, str(err)) from None
            log.info("skipping window %s: %s", w, err)
            continue
        reports.append(metrics(y_raw, y_hat, bounds, scale, label=w))
    return reports, y_hat


# --------------------------------------------------------------------------
# verbs


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if args.seed is not None:
        overrides += [f"init.seed={args.seed}", f"train.seed={args.seed}"]
    return load_config(args.config, overrides)


def _network(cfg: RunConfig) -> WienerNet:
    try:
        return init_network(cfg.architecture(), cfg.init_options(), cfg.init.seed)
    except ValueError as err:
        raise ConfigError(f"init: {err}") from None


def _write_history(path: Path, state) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in state.history:
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)), repr(float(r.lr))])


def _write_spectrum(path: Path, net: WienerNet) -> list[list]:
    rows = []
    for layer, (spec, p) in enumerate(zip(net.arch.layers, net.layers)):
        for j, r in enumerate(spectrum_report(p, spec.tau, net.arch.method)):
            lc = r.lambda_c
            rows.append([layer, j, "" if lc is None else repr(lc.real), "" if lc is None else repr(lc.imag),
                         repr(r.lambda_d.real), repr(r.lambda_d.imag), repr(r.modulus), repr(r.phase),
                         int(r.beyond_nyquist)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "index", "lambda_c_re", "lambda_c_im", "lambda_d_re", "lambda_d_im", "modulus",
                    "phase", "beyond_nyquist"])
        w.writerows(rows)
    return rows


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    dump_config(cfg, out / "config.yaml")
    ds = build_dataset(cfg)
    net = _network(cfg)
    best, state = train(net, ds, cfg.train_config(), log_every=args.log_every)
    norm = ds.norm
    save_checkpoint(out / "checkpoint.npz", best, state, config=cfg.resolved(), norm=norm.to_dict())
    _write_history(out / "history.csv", state)
    _write_spectrum(out / "spectrum.csv", best)
    scale = cfg.data.output_scale
    test = ds.role("test")
    if test:
        u_raw, y_raw = norm.inverse_u(test[0].u), norm.inverse_y(test[0].y)
        reports, y_hat = evaluate(best, norm, u_raw, y_raw, DEFAULT_WINDOWS, scale, explicit=False)
    else:
        u_va, y_va = ds.arrays("val")
        u_raw, y_raw = norm.inverse_u(u_va), norm.inverse_y(y_va)
        y_hat = predict(best, u_raw, norm)
        y_raw, y_hat = y_raw.reshape(-1, ds.n_y), y_hat.reshape(-1, ds.n_y)
        reports = [metrics(y_raw, y_hat, None, scale, label="val")]
    text = write_metrics(out / "metrics.txt", reports, {"unit": cfg.data.output_unit or "native",
                                                       "best_epoch": state.best_epoch, "epochs": state.epoch})
    write_residuals(out / "residuals.csv", y_raw, y_hat)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ck = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(EXIT_CONFIG, f"cannot read checkpoint {args.checkpoint}: {err}") from None
    arch = ck.model.arch
    n_u, n_y = arch.layers[0].n_u, arch.layers[-1].n_y
    data_cfg = ck.config.get("data", {})
    try:
        seq = load_csv(args.data, n_u, n_y, float(data_cfg.get("tau", 1.0))).sequences[0]
    except ColumnCountError as err:
        raise CliError(EXIT_CONFIG, f"dimension mismatch: {err}") from None
    norm = None if ck.norm is None else NormalizationStats.from_dict(ck.norm)
    windows = args.window or list(DEFAULT_WINDOWS)
    scale = float(data_cfg.get("output_scale", 1.0)) if args.scale is None else args.scale
    reports, y_hat = evaluate(ck.model, norm, seq.u, seq.y, windows, scale, explicit=bool(args.window))
    if not reports:
        raise CliError(EXIT_CONFIG, "no evaluation window fits the data")
    out = _out_dir(args)
    text = write_metrics(out / "metrics.txt", reports, {"unit": data_cfg.get("output_unit") or "native"})
    write_residuals(out / "residuals.csv", seq.y, y_hat)
    sys.stdout.write(text)
    return EXIT_OK


def _time(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm-up, includes compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    med = float(np.median(times))
    return med, float(np.median(np.abs(times - med)))


def run_bench(net: WienerNet, lengths, engines, repeats: int = 5, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    n_u = net.arch.layers[0].n_u
    rows = []
    for engine in engines:
        model = net.realize(transfer=engine == "fft")
        for T in lengths:
            u = rng.standard_normal((T, n_u))
            try:
                med, mad = _time(lambda: np.asarray(ssm_forward(model, u, engine)), repeats)
                rows.append({"engine": engine, "T": T, "median_s": med, "mad_s": mad, "status": "ok"})
            except UnsupportedStructureError:
                rows.append({"engine": engine, "T": T, "median_s": "", "mad_s": "", "status": "unsupported"})
    return rows


def cmd_bench(args) -> int:
    cfg = _config(args)
    engines = args.engines.split(",")
    unknown = [e for e in engines if e not in ENGINES]
    if unknown:
        raise ConfigError(f"unknown engine {unknown[0]!r}; choose from {ENGINES}")
    lengths = [int(x) for x in args.lengths.split(",")]
    if args.repeats < 5:
        raise ConfigError("bench needs at least 5 repeats")
    rows = run_bench(_network(cfg), lengths, engines, args.repeats, cfg.init.seed)
    out = _out_dir(args)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["engine", "T", "median_s", "mad_s", "status"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(",".join(str(r[k]) for k in ("engine", "T", "median_s", "mad_s", "status")))
    return EXIT_OK


def cmd_inspect(args) -> int:
    target = Path(args.target)
    if target.suffix == ".npz":
        try:
            net = load_checkpoint(target).model
        except (OSError, ValueError, KeyError) as err:
            raise CliError(EXIT_CONFIG, f"cannot read checkpoint {target}: {err}") from None
    else:
        args.config = args.target
        net = _network(_config(args))
    out = _out_dir(args)
    rows = _write_spectrum(out / "spectrum.csv", net)
    for k, rho in enumerate(net.spectral_radii()):
        flags = sum(r[-1] for r in rows if r[0] == k)
        print(f"layer={k} spectral_radius={rho:.17g} beyond_nyquist={flags}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ds, truth = synth_wiener(args.order, args.nonlinearity, args.length, args.n_seq, args.noise_std,
                             seed=0 if args.seed is None else args.seed, n_val=args.n_val, n_test=args.n_test,
                             snr_db=args.snr_db, excitation=args.excitation)
    out = _out_dir(args)
    for role in ("train", "val", "test"):
        seqs = ds.role(role)
        if seqs:
            table = np.concatenate([np.hstack([s.u, s.y]) for s in seqs])
            np.savetxt(out / f"{role}.csv", table, delimiter=",", fmt="%.17g", header="u,y", comments="")
    (out / "truth.json").write_text(json.dumps({
        "poles_re": truth.poles.real.tolist(), "poles_im": truth.poles.imag.tolist(), "b": truth.b.tolist(),
        "a": truth.a.tolist(), "nonlinearity": truth.nonlinearity, "noise_std": truth.noise_std,
    }, indent=2))
    doc = {
        "model": {"parametrization": "lru", "n_layers": 2, "n_lambda": 8, "hidden": 4},
        "init": {"strategy": "ring", "r_min": 0.5, "r_max": 0.99},
        "train": {"batch_size": 16, "lr0": 0.01, "max_epochs": 500},
        "data": {"tau": 1.0, "train_paths": ["train.csv"], "val_paths": ["val.csv"],
                 "test_path": "test.csv" if args.n_test else None, "experiment_length": args.length,
                 "window_length": args.length, "windows_per_experiment": 1, "window_policy": "disjoint"},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    print(f"wrote {out}/train.csv, val.csv, test.csv, truth.json and config.yaml")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepwiener", description="Deep Wiener state-space model toolkit.")
    p.add_argument("--seed", type=int, default=None, help="override init and training seeds")
    p.add_argument("--threads", type=int, default=None,
                   help=f"CPU threads for numerics (default from ${THREADS_ENV})")
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model from a config file or preset")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.max_epochs=5")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a CSV record")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--window", action="append", help="full, first-N or start:end (repeatable)")
    e.add_argument("--scale", type=float, default=None, help="unit factor applied to RMSE")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time simulation engines")
    b.add_argument("config")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--lengths", default=",".join(str(2 ** k) for k in range(10, 17)))
    b.add_argument("--engines", default=",".join(ENGINES))
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="eigenvalue table of a checkpoint or an initialized config")
    i.add_argument("target")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("synth", help="generate a synthetic Wiener dataset and a matching config")
    s.add_argument("--order", type=int, default=2)
    s.add_argument("--nonlinearity", default="tanh", choices=["identity", "tanh", "cubic"])
    s.add_argument("--length", type=int, default=512)
    s.add_argument("--n-seq", type=int, default=64)
    s.add_argument("--n-val", type=int, default=16)
    s.add_argument("--n-test", type=int, default=1)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--snr-db", type=float, default=None)
    s.add_argument("--excitation", default="noise", choices=["noise", "multisine"])
    s.set_defaults(func=cmd_synth)
    return p


def _reexec_with_threads(n: int, argv: list[str]) -> None:
    # pools are sized when numpy and XLA start, so a new value needs a fresh process
    if os.environ.get(THREADS_ENV) != str(n):
        os.environ[THREADS_ENV] = str(n)
        os.execv(sys.executable, [sys.executable, "-m", "deepwiener.cli", *argv])


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    logging.getLogger("jax").setLevel(logging.WARNING)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be positive")
        _reexec_with_threads(args.threads, argv)
    try:
        return args.func(args)
    except CliError as err:
        log.error("%s", err)
        return err.code
    except (ConfigError, DimensionError) as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
