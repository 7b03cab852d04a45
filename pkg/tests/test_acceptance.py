"""End-to-end acceptance criteria.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts.  Criteria 5 to 8 train models and take tens of minutes on one
core; set ``ARDODE_ACCEPTANCE_CACHE=<dir>`` to keep trained checkpoints
between runs (keyed by the training config hash).
"""
from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ardode import io
from ardode import tensor as T
from ardode.arithmetic import (NauLayer, NmuLayer, model_from_weights, nau_forward, nmu_forward,
                               render_expressions)
from ardode.cli import main as cli_main
from ardode.config import EvalOptions
from ardode.datagen import gen_double_harmonic, gen_harmonic, gen_lotka_volterra
from ardode.encoder import EncoderConfig
from ardode.experiments import (Trained, harmonic_frequencies, harmonic_sweep, load_trained,
                                lv_fits, mask_for, run_training, save_trained,
                                state_trajectories)
from ardode.extract import decoupled_pair
from ardode.reidentify import ReidOptions, reidentify_batch
from ardode.solver import TimeGrid, solve
from ardode.vae import PosteriorState, TrainConfig, elbo_loss, kl_ard, make_decoder
from conftest import record_criterion

pytestmark = pytest.mark.acceptance


def _cached_training(ds, cfg: TrainConfig, tag: str) -> Trained:
    cache = os.environ.get("ARDODE_ACCEPTANCE_CACHE")
    key = io.config_hash({"train": cfg.to_dict(), "data": [ds.generator, ds.seed, ds.options]})
    path = Path(cache) / f"{tag}-{key}.npz" if cache else None
    if path is not None and path.exists():
        return load_trained(path)
    trained, _ = run_training(ds, cfg)
    if path is not None:
        save_trained(path, trained)
    return trained


# ------------------------------------------------------------ criterion 1

def _coordinate_check(loss_fn, arrays: dict, names, rng, per_array=3) -> float:
    """Worst relative error between tape and central differences, sampled
    at a few coordinates of each named array (scaled by the array's
    largest tape gradient)."""
    with T.Tape() as tape:
        params = {k: tape.watch(v) for k, v in arrays.items()}
        loss = loss_fn(params)
        grads = tape.gradient(loss, [params[n] for n in names])
    worst = 0.0
    eps = 1e-6
    for n, g in zip(names, grads):
        scale = max(float(np.max(np.abs(g))), 1e-8)
        for flat in rng.choice(g.size, size=min(per_array, g.size), replace=False):
            idx = np.unravel_index(flat, g.shape)
            vals = []
            for sgn in (1, -1):
                a = {k: v.copy() for k, v in arrays.items()}
                a[n][idx] += sgn * eps
                vals.append(float(loss_fn({k: T.Tensor(v) for k, v in a.items()}).data))
            fd = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, abs(fd - g[idx]) / scale)
    return worst


def _random_configuration(c: int):
    rng = np.random.default_rng([2024, c])
    n = int(rng.integers(1, 4))
    if rng.random() < 0.5:
        arch = f"nau:{n}x{n}"
    else:
        h = int(rng.integers(1, 4))
        arch = f"nmu:{h}x{n}|nau:{n}x{h}"
    steps = int(rng.integers(1, 21))
    Tn = steps + 1
    d = int(rng.integers(1, n + 1))
    H = np.zeros((d, n))
    H[np.arange(d), rng.permutation(n)[:d]] = 1.0
    obs = ";".join(",".join(f"{v:g}" for v in row) for row in H)
    enc = EncoderConfig(init_steps=min(4, Tn), dense_width=4, conv_channels=3,
                        conv_layers=min(2, (Tn - 1) // 2))
    cfg = TrainConfig(model_arch=arch, observation=obs, encoder=enc, nau_init_scale=0.5,
                      ard_enabled=bool(rng.random() < 0.8), seed=c)
    X = rng.normal(scale=0.5, size=(3, d, Tn))
    return cfg, TimeGrid(0.1, steps), X, rng


def test_criterion_1_gradients():
    t0 = time.time()
    worst_model, worst_layer = 0.0, 0.0
    for c in range(50):
        cfg, grid, X, rng = _random_configuration(c)
        state = PosteriorState.initial(cfg, X.shape[1], np.random.default_rng(c))
        dec = make_decoder(cfg, grid)
        arrays = state.arrays()
        # zero biases put dead ReLU units exactly on the kink; move off it
        for k in arrays:
            if k.endswith(".b") and k != "encoder.theta_out.b":
                arrays[k] = arrays[k] + rng.normal(scale=0.1, size=arrays[k].shape)

        def loss_fn(params):
            return elbo_loss(X, params, state.encoder, dec, cfg, np.random.default_rng(99),
                             10).loss

        names = list(rng.choice(sorted(arrays), size=6, replace=False))
        names += ["encoder.theta_out.b", "encoder.dense_out.b"]
        worst_model = max(worst_model, _coordinate_check(loss_fn, arrays, names, rng))

        # bare layer ops on random weights and inputs
        h, n = 3, 2
        layer_arrays = {"M": rng.uniform(0.05, 0.95, (h, n)), "W": rng.normal(size=(n, h)),
                        "x": rng.normal(size=(4, n))}
        wsum = rng.normal(size=(4, n))

        def layer_loss(p):
            return T.sum_(T.mul(nau_forward(p["W"], nmu_forward(p["M"], p["x"])), wsum))

        worst_layer = max(worst_layer, _coordinate_check(layer_loss, layer_arrays,
                                                         ["M", "W", "x"], rng, per_array=6))
    elapsed = time.time() - t0
    ok = worst_model < 1e-4 and worst_layer < 1e-5 and elapsed < 60
    record_criterion(1, ok, f"50 configs, worst rel err model {worst_model:.2e} (< 1e-4), "
                            f"layers {worst_layer:.2e} (< 1e-5), {elapsed:.1f}s (< 60s)")
    assert ok


# ------------------------------------------------------------ criterion 2

def _oscillator_error(dt, steps):
    model = model_from_weights("nau:2x2", [np.array([[0.0, 1.0], [-2.25, 0.0]])])
    grid = TimeGrid(dt, steps)
    traj = solve(model, np.array([1.0, 0.0]), grid).data
    return float(np.max(np.abs(traj[0] - np.cos(1.5 * grid.times))))


def test_criterion_2_solver_accuracy():
    e1 = _oscillator_error(0.1, 60)
    e2 = _oscillator_error(0.05, 120)
    ok = e1 < 1e-4 and e1 / e2 >= 12
    record_criterion(2, ok, f"max error {e1:.2e} (< 1e-4), halving ratio {e1 / e2:.1f} (>= 12)")
    assert ok


# ------------------------------------------------------------ criterion 3

def test_criterion_3_kl_oracle():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(20):
        mu, s, lam = rng.normal(), rng.uniform(0.2, 1.0), rng.uniform(0.5, 2.0)
        z = mu + s * rng.standard_normal(10**6)
        mc = float(np.mean(-0.5 * ((z - mu) / s) ** 2 - math.log(s)
                           + 0.5 * (z / lam) ** 2 + math.log(lam)))
        exact = float(kl_ard(np.array([mu]), np.array([s]), np.array([lam])).data)
        worst = max(worst, abs(exact - mc) / abs(mc))
    sig = rng.uniform(0.1, 3.0, 12)
    zero = float(kl_ard(np.zeros(12), sig, sig).data)
    ok = worst < 0.01 and zero == 0.0
    record_criterion(3, ok, f"worst relative MC deviation {worst:.2e} (< 1e-2), "
                            f"KL at mu=0, sigma=lambda is {zero!r}")
    assert ok


# ------------------------------------------------------------ criterion 4

def test_criterion_4_arithmetic_algebra():
    layers = [NmuLayer(T.Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))),
              NauLayer(T.Tensor(np.array([[2.0, 1.0]])))]
    x = np.random.default_rng(4).normal(scale=5, size=(1000, 2))
    out = layers[1](layers[0](x)).data[:, 0]
    exact = bool(np.array_equal(out, 2 * x[:, 0] + x[:, 0] * x[:, 1]))
    text = render_expressions(layers, 2, style="latex")[0]
    ok = exact and text == "2x_1 + x_1x_2"
    record_criterion(4, ok, f"1000 inputs exact={exact}, rendered {text!r}")
    assert ok


# ------------------------------------------------------- criteria 5 and 6

HARMONIC_SEED = 1
HARMONIC_TRAIN = dict(epochs=250, learning_rate=3e-3, lr_final=3e-4, clip_norm=1000.0, seed=0)
HARMONIC_REID = ReidOptions(iterations=400, starts=4, horizon_start=10, horizon_iterations=200)


@pytest.fixture(scope="module")
def harmonic_data():
    return gen_harmonic(seed=HARMONIC_SEED)


@pytest.fixture(scope="module")
def ard_model(harmonic_data):
    return _cached_training(harmonic_data, TrainConfig(**HARMONIC_TRAIN), "harmonic-ard")


@pytest.fixture(scope="module")
def fixed_prior_model(harmonic_data):
    return _cached_training(harmonic_data, TrainConfig(ard_enabled=False, **HARMONIC_TRAIN),
                            "harmonic-noard")


@pytest.mark.slow
def test_criterion_5_harmonic_identification(harmonic_data, ard_model, fixed_prior_model):
    mask = mask_for(ard_model, harmonic_data.observations)
    held = gen_harmonic(L=50, seed=777)
    mu = ard_model.state.encode(held.observations)
    omega_hat = np.array([f.omega for f in harmonic_frequencies(ard_model, mu, mask)])
    rel = np.abs(omega_hat - held.meta["omega"]) / held.meta["omega"]
    frac = float(np.mean(rel < 0.1))
    fixed_mask = mask_for(fixed_prior_model, harmonic_data.observations)
    ok = int(mask.sum()) == 4 and frac >= 0.8 and int(fixed_mask.sum()) > 4
    record_criterion(5, ok, f"popcount {int(mask.sum())} of {len(mask)} (= 4), omega within "
                            f"10% on {frac:.0%} of 50 held-out (>= 80%), no-ARD popcount "
                            f"{int(fixed_mask.sum())} (> 4)")
    assert ok


@pytest.mark.slow
def test_criterion_6_extrapolation_and_reidentification(harmonic_data, ard_model):
    mask = mask_for(ard_model, harmonic_data.observations)
    scores = harmonic_sweep(ard_model, mask, EvalOptions(), HARMONIC_REID)
    by = {s.label: s for s in scores}
    sines = [s for s in scores if s.kind == "sine"]
    gain = by["4"].median_encoder / by["4"].median_reid
    worst_sine = max(s.median_reid for s in sines)
    floor = min(by["noise"].median_reid, by["square"].median_reid)
    never_worse = all(np.all(s.reid_mse <= s.encoder_mse + 1e-9) for s in scores)
    ok = gain >= 10 and floor >= 10 * worst_sine and never_worse
    record_criterion(6, ok, f"omega=4 encoder/reidentified {gain:.0f}x (>= 10x); noise and "
                            f"square {floor / worst_sine:.0f}x above worst sine (>= 10x)")
    assert ok


# ------------------------------------------------------------ criterion 7

LV_TRAIN = dict(model_arch="nmu:3x2|nau:2x3", observation="1,0;0,1", epochs=120, batch_size=32,
                learning_rate=5e-3, lr_final=5e-4, clip_norm=1000.0, horizon_start=10,
                horizon_epochs=60, kl_warmup_epochs=40)
LV_SEEDS = (0, 1, 2)


def _lv_recovery(trained: Trained, train_X, held):
    mask = mask_for(trained, train_X)
    res = reidentify_batch(held.observations, trained.state, trained.decoder, mask,
                           ReidOptions(iterations=300, starts=4))
    fits = np.array([f.signed for f in lv_fits(trained, res.z, mask)])
    m = held.meta
    truth = np.stack([m["alpha"], -m["beta"], -m["delta"], m["gamma"]], axis=1)
    sign_ok = bool(np.all(np.sign(fits) == np.sign(truth)))
    close = np.all(np.abs(fits - truth) <= 0.15 * np.abs(truth), axis=1)
    return sign_ok, float(np.mean(close))


@pytest.mark.slow
def test_criterion_7_lotka_volterra_recovery():
    data = gen_lotka_volterra(seed=1)
    held = gen_lotka_volterra(L=20, seed=999)
    report, passed = [], False
    for seed in LV_SEEDS:
        t0 = time.time()
        trained = _cached_training(data, TrainConfig(seed=seed, **LV_TRAIN), "lv")
        sign_ok, frac = _lv_recovery(trained, data.observations, held)
        seed_ok = sign_ok and frac >= 0.7
        passed |= seed_ok
        report.append(f"seed {seed}: signs {'ok' if sign_ok else 'wrong'}, within 15% on "
                      f"{frac:.0%}, {time.time() - t0:.0f}s")
    record_criterion(7, passed, "best of 3 seeds needs all signs and >= 70% within 15% on 20 "
                                "held-out; " + "; ".join(report))
    assert passed


# ------------------------------------------------------------ criterion 8

# dt = 0.5 puts the two frequencies 0.15 rad/step apart; at dt = 0.1 they
# are only 0.03 apart, below the separation the check asks for
DOUBLE_DT = 0.5
DOUBLE_TRAIN = dict(epochs=150, batch_size=32, learning_rate=5e-3, lr_final=5e-4,
                    clip_norm=1000.0, horizon_start=10, horizon_epochs=60, kl_warmup_epochs=40,
                    seed=0)


def _decoupled_fraction(trained: Trained, train_X, held) -> tuple[float, list]:
    mask = mask_for(trained, train_X)
    Z = np.where(mask, trained.state.encode(held.observations), 0.0)
    pairs = []
    for z in Z:
        traj = state_trajectories(trained, z, held.grid)
        pairs.append(decoupled_pair(traj))
    return float(np.mean([p is not None for p in pairs])), pairs


@pytest.mark.slow
def test_criterion_8_observation_operator_decoupling():
    data = gen_double_harmonic(dt=DOUBLE_DT, seed=1)
    held = gen_double_harmonic(L=20, dt=DOUBLE_DT, seed=777)
    four = _cached_training(data, TrainConfig(model_arch="nau:4x4", observation="1,0,1,0",
                                              **DOUBLE_TRAIN), "double-4")
    frac, pairs = _decoupled_fraction(four, data.observations, held)
    found = [p for p in pairs if p is not None]
    freqs = (f"{np.median([min(p[2], p[3]) for p in found]):.3f} and "
             f"{np.median([max(p[2], p[3]) for p in found]):.3f} rad/step" if found else "none")
    five = _cached_training(data, TrainConfig(model_arch="nau:5x5", observation="1,0,0,0,0",
                                              **DOUBLE_TRAIN), "double-5")
    control, _ = _decoupled_fraction(five, data.observations, held)
    ok = frac >= 0.5
    record_criterion(8, ok, f"H=[1,0,1,0]: decoupled pair on {frac:.0%} of 20 held-out "
                            f"(>= 50%), median frequencies {freqs}; control H=[1,0,0,0,0] "
                            f"5x5 (report only): {control:.0%}")
    assert ok


# ------------------------------------------------------------ criterion 9

REPRO_CONFIG = """[data]
generator = harmonic
L = 64
seed = 5
[train]
epochs = 3
batch_size = 16
clip_norm = 1000
"""


def test_criterion_9_reproducibility(tmp_path):
    (tmp_path / "c.ini").write_text(REPRO_CONFIG)
    d = str(tmp_path)
    assert cli_main(["generate", "--config", f"{d}/c.ini", "-o", f"{d}/data.npz"]) == 0
    for tag in ("a", "b"):
        assert cli_main(["train", "--config", f"{d}/c.ini", "--data", f"{d}/data.npz", "-q",
                         "--seed", "11", "-o", f"{d}/{tag}.npz"]) == 0
    same_ckpt = (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    same_log = (tmp_path / "a.log.csv").read_bytes() == (tmp_path / "b.log.csv").read_bytes()
    ok = same_ckpt and same_log
    record_criterion(9, ok, f"checkpoints identical={same_ckpt}, logs identical={same_log}")
    assert ok
