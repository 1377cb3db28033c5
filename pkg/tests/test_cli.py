import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from deepwiener.cli import main
from deepwiener.data import read_metrics, synth_wiener


def silverbox_like(root, n_exp=1, test_len=30000):
    """Stand-in files with the shipped presets' layout: an oscillator-like Wiener system under noise."""
    d = root / "silverbox"
    d.mkdir()
    poles = [0.97 * np.exp(0.3j), 0.97 * np.exp(-0.3j)]
    ds, truth = synth_wiener(2, "cubic", T=8192 * n_exp, n_seq=1, n_val=0, n_test=0, poles=poles, seed=0,
                             amplitude=0.1)
    s = ds.sequences[0]
    np.savetxt(d / "multisine.csv", np.hstack([s.u, s.y]), delimiter=",", fmt="%.17g")
    u = 0.1 * np.random.default_rng(1).standard_normal((test_len, 1))
    np.savetxt(d / "test.csv", np.hstack([u, truth.simulate(u)]), delimiter=",", fmt="%.17g")
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("sb")
    silverbox_like(root)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        code = main(["--out", str(root / "run"), "train", "lru-silverbox", "--set", "train.max_epochs=5",
                     "--set", "data.val_experiments=0", "--set", "data.windows_per_experiment=8"])
    finally:
        os.chdir(cwd)
    return root, code


def test_train_writes_artifacts(trained):
    root, code = trained
    assert code == 0
    run = root / "run"
    for name in ("config.yaml", "checkpoint.npz", "history.csv", "spectrum.csv", "metrics.txt", "residuals.csv"):
        assert (run / name).is_file(), name
    rows = list(csv.DictReader(open(run / "history.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1", "2", "3", "4"]
    assert [m["window"] for m in read_metrics(run / "metrics.txt")] == ["first-25000", "full"]
    assert "max_epochs: 5" in (run / "config.yaml").read_text()


def test_eval_reproduces_training_metrics(trained, tmp_path, capsys):
    root, _ = trained
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    args = [str(root / "run" / "checkpoint.npz"), str(root / "silverbox" / "test.csv")]
    assert main(["--out", str(out1), "eval", *args]) == 0
    assert main(["--out", str(out2), "eval", *args]) == 0
    assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
    assert (out1 / "residuals.csv").read_bytes() == (out2 / "residuals.csv").read_bytes()
    stored = read_metrics(root / "run" / "metrics.txt")
    again = read_metrics(out1 / "metrics.txt")
    for a, b in zip(stored, again):
        assert a["window"] == b["window"]
        assert abs(float(a["rmse"]) - float(b["rmse"])) <= 1e-10
        assert abs(float(a["fit"]) - float(b["fit"])) <= 1e-10


def test_eval_window_out_of_range(trained, tmp_path):
    root, _ = trained
    code = main(["--out", str(tmp_path), "eval", str(root / "run" / "checkpoint.npz"),
                 str(root / "silverbox" / "test.csv"), "--window", "first-99999"])
    assert code == 2


def test_eval_column_mismatch(trained, tmp_path):
    root, _ = trained
    bad = tmp_path / "three.csv"
    np.savetxt(bad, np.ones((10, 3)), delimiter=",")
    assert main(["--out", str(tmp_path), "eval", str(root / "run" / "checkpoint.npz"), str(bad)]) == 2


def test_inspect_trained_checkpoint(trained, tmp_path, capsys):
    root, _ = trained
    assert main(["--out", str(tmp_path), "inspect", str(root / "run" / "checkpoint.npz")]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith("layer=")]
    assert len(lines) == 4
    for line in lines:
        fields = dict(kv.split("=") for kv in line.split())
        assert float(fields["spectral_radius"]) < 1.0
        assert fields["beyond_nyquist"] == "0"


def test_config_error_exit_code(tmp_path, caplog):
    code = main(["--out", str(tmp_path), "train", "lru-silverbox", "--set", "train.plateau_factor=1.5"])
    assert code == 2
    assert "plateau_factor" in caplog.text


def test_missing_data_exit_code(tmp_path):
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        assert main(["--out", str(tmp_path / "run"), "train", "lru-silverbox"]) == 3
    finally:
        os.chdir(cwd)


def test_inspect_presets(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "s5"), "inspect", "s5-silverbox"]) == 0
    s5 = capsys.readouterr().out
    assert main(["--out", str(tmp_path / "lru"), "inspect", "lru-silverbox"]) == 0
    lru = capsys.readouterr().out

    def flags(text):
        return [int(dict(kv.split("=") for kv in line.split())["beyond_nyquist"])
                for line in text.splitlines() if line.startswith("layer=")]

    assert sum(flags(s5)) >= 1
    assert flags(lru) == [0, 0, 0, 0]
    rows = list(csv.DictReader(open(tmp_path / "s5" / "spectrum.csv")))
    assert len(rows) == 40 and {"lambda_c_re", "modulus", "beyond_nyquist"} <= set(rows[0])


def test_bench_marks_unsupported(tmp_path):
    code = main(["--out", str(tmp_path), "bench", "s4-silverbox", "--lengths", "64,128", "--engines", "scan,fft"])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert list(rows[0]) == ["engine", "T", "median_s", "mad_s", "status"]
    status = {(r["engine"], r["T"]): r["status"] for r in rows}
    assert status[("scan", "64")] == "unsupported"
    assert status[("fft", "128")] == "ok"


def test_bench_rejects_few_repeats(tmp_path):
    assert main(["--out", str(tmp_path), "bench", "lru-silverbox", "--repeats", "2"]) == 2


def test_synth_then_train(tmp_path):
    out = tmp_path / "syn"
    assert main(["--out", str(out), "--seed", "3", "synth", "--length", "64", "--n-seq", "8", "--n-val", "2"]) == 0
    for name in ("train.csv", "val.csv", "test.csv", "truth.json", "config.yaml"):
        assert (out / name).is_file()
    assert (out / "train.csv").read_text().startswith("u,y\n")
    run = tmp_path / "run"
    code = main(["--out", str(run), "train", str(out / "config.yaml"), "--set", "train.max_epochs=2"])
    assert code == 0
    assert (run / "checkpoint.npz").is_file()


def test_synth_is_reproducible(tmp_path):
    for k in (1, 2):
        assert main(["--out", str(tmp_path / str(k)), "--seed", "5", "synth", "--length", "32", "--n-seq", "2"]) == 0
    assert (tmp_path / "1" / "train.csv").read_bytes() == (tmp_path / "2" / "train.csv").read_bytes()


def test_threads_flag_runs_in_fresh_process(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "deepwiener.cli", "--threads", "1", "--out", str(tmp_path),
                           "inspect", "lru-silverbox"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("layer=") == 4
