import json

import numpy as np
import pytest

from ardode import io
from ardode.cli import main

TINY = """[data]
generator = harmonic
L = 24
K = 40
seed = 3
[train]
epochs = 3
batch_size = 8
clip_norm = 1000
[encoder]
dense_width = 8
conv_channels = 4
conv_layers = 2
[reidentify]
iterations = 3
starts = 2
[evaluate]
samples_per_signal = 2
frequencies = 3.0, 4.0
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.ini").write_text(TINY)
    return tmp_path


def run(workdir, *args):
    return main([a.format(d=workdir) for a in args])


def test_generate_writes_dataset(workdir):
    assert run(workdir, "generate", "--config", "{d}/c.ini", "-o", "{d}/d.npz",
               "--csv", "{d}/d.csv") == 0
    ds = io.load_dataset(workdir / "d.npz")
    assert len(ds) == 24 and ds.obs_dim == 1
    assert run(workdir, "generate", "--generator", "lotka_volterra", "--set", "data.L=3",
               "--set", "data.window_len=20", "-o", "{d}/lv.npz") == 0
    assert io.load_dataset(workdir / "lv.npz").obs_dim == 2


def test_usage_errors_exit_1(workdir, capsys):
    assert run(workdir, "generate", "--generator", "sawtooth", "-o", "{d}/x.npz") == 1
    assert run(workdir, "train", "--data", "{d}/missing.npz", "-o", "{d}/c.npz") == 1
    assert run(workdir, "generate", "--set", "train.nope=1", "-o", "{d}/x.npz") == 1
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1


def test_numerical_failure_exit_2(workdir):
    run(workdir, "generate", "--config", "{d}/c.ini", "-o", "{d}/d.npz")
    # a huge initial NAU scale makes every training solve diverge, and the
    # substituted constant loss is not finite
    code = run(workdir, "train", "--config", "{d}/c.ini", "--data", "{d}/d.npz",
               "-o", "{d}/c.npz", "-q", "--set", "train.nau_init_scale=1e3",
               "--set", "train.divergence_loss=inf")
    assert code == 2


def test_train_is_reproducible_and_resumable(workdir):
    run(workdir, "generate", "--config", "{d}/c.ini", "-o", "{d}/d.npz")
    common = ["--config", "{d}/c.ini", "--data", "{d}/d.npz", "-q"]
    assert run(workdir, "train", *common, "-o", "{d}/a.npz") == 0
    assert run(workdir, "train", *common, "-o", "{d}/b.npz") == 0
    assert (workdir / "a.npz").read_bytes() == (workdir / "b.npz").read_bytes()
    assert (workdir / "a.log.csv").read_bytes() == (workdir / "b.log.csv").read_bytes()
    header, _ = io.load_checkpoint(workdir / "a.npz")
    assert header["epoch"] == 3 and header["architecture"] == "nau:3x3"
    assert len(header["config_hash"]) == 16
    assert run(workdir, "train", *common, "-o", "{d}/more.npz", "--resume", "{d}/a.npz",
               "--epochs", "5") == 0
    log = io.read_training_log(workdir / "more.log.csv")
    np.testing.assert_array_equal(log["epoch"], np.arange(5))
    assert io.load_checkpoint(workdir / "more.npz")[0]["epoch"] == 5


def test_ard_off_fixes_prior(workdir):
    run(workdir, "generate", "--config", "{d}/c.ini", "-o", "{d}/d.npz")
    assert run(workdir, "train", "--config", "{d}/c.ini", "--data", "{d}/d.npz", "-q",
               "-o", "{d}/o.npz", "--ard", "off") == 0
    header, arrays = io.load_checkpoint(workdir / "o.npz")
    assert header["train"]["ard_enabled"] is False
    np.testing.assert_array_equal(arrays["log_lambda_z"], np.zeros(12))


def test_evaluate_reidentify_extract_plot(workdir):
    run(workdir, "generate", "--config", "{d}/c.ini", "-o", "{d}/d.npz")
    run(workdir, "train", "--config", "{d}/c.ini", "--data", "{d}/d.npz", "-q", "-o", "{d}/c.npz")
    ck = ["--config", "{d}/c.ini", "--checkpoint", "{d}/c.npz", "--data", "{d}/d.npz"]
    assert run(workdir, "evaluate", *ck, "--out-dir", "{d}/rep") == 0
    rep = json.loads((workdir / "rep" / "report.json").read_text())
    header, _ = io.load_checkpoint(workdir / "c.npz")
    assert rep["config_hash"] == header["config_hash"]
    assert len(rep["mask"]) == 12 and rep["popcount"] == sum(rep["mask"])
    assert [s["label"] for s in rep["signals"]] == ["3", "4", "noise", "square"]
    for s in rep["signals"]:
        assert s["median_reidentified_mse"] <= s["median_encoder_mse"] + 1e-9
    assert run(workdir, "reidentify", *ck, "--samples", "0:4", "-o", "{d}/r.csv") == 0
    rows = (workdir / "r.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].startswith("sample_id,encoder_mse,reidentified_mse")
    assert run(workdir, "extract", *ck, "--samples", "1", "-o", "{d}/x.json") == 0
    x = json.loads((workdir / "x.json").read_text())["samples"][0]
    assert x["equation"].startswith("ds1/dt =") and "omega_hat" in x and "omega_true" in x
    assert run(workdir, "plot", "--report", "{d}/rep", "--log", "{d}/c.log.csv",
               "--checkpoint", "{d}/c.npz", "--data", "{d}/d.npz", "--out-dir", "{d}/fig") == 0
    names = sorted(p.name for p in (workdir / "fig").iterdir())
    assert names == ["lambda_heatmap.svg", "latent_boxes.svg", "scores.svg",
                     "training.svg", "trajectory_0.svg"]
    assert run(workdir, "plot", "--out-dir", "{d}/none") == 1
