"""End-to-end workflows: training with checkpoints, evaluation sweeps,
reidentification and equation extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .arithmetic import Architecture, render_equation, unflatten_params
from .config import EvalOptions, ExperimentConfig
from .datagen import Dataset, generate, harmonic_sample, square_wave
from .encoder import EncoderConfig
from .extract import harmonic_frequency, lotka_volterra_coefficients, nau_matrix
from .reidentify import ReidOptions, ReidResult, decoder_mse, reidentify_batch
from .solver import TimeGrid
from .vae import (Adam, PosteriorState, TrainConfig, TrainResult, make_decoder, relevance_mask,
                  train)


@dataclass
class Trained:
    state: PosteriorState
    cfg: TrainConfig
    grid: TimeGrid
    epoch: int
    header: dict = field(default_factory=dict)
    optimizer: Adam | None = None

    @property
    def decoder(self):
        return make_decoder(self.cfg, self.grid)

    @property
    def arch(self) -> Architecture:
        return self.cfg.arch


def data_options(cfg: ExperimentConfig) -> tuple[str, dict]:
    opts = dict(cfg.data)
    name = opts.pop("generator", "harmonic")
    for k, v in list(opts.items()):
        if isinstance(v, list):
            opts[k] = tuple(v)
    return name, opts


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    name, opts = data_options(cfg)
    return generate(name, **opts)


def save_trained(path, t: Trained, exp_cfg: dict | None = None):
    arrays = dict(t.state.arrays())
    if t.optimizer is not None:
        arrays.update(t.optimizer.state_arrays())
    cfgd = t.cfg.to_dict()
    meta = {
        "architecture": t.cfg.model_arch, "observation": t.cfg.observation,
        "grid": {"dt": t.grid.dt, "steps": t.grid.steps, "origin": t.grid.origin},
        "obs_dim": t.state.encoder.obs_dim, "epoch": t.epoch, "train": cfgd,
        "config_hash": io.config_hash(exp_cfg if exp_cfg is not None else cfgd),
    }
    io.save_checkpoint(path, arrays, meta)


def load_trained(path) -> Trained:
    header, arrays = io.load_checkpoint(path)
    tcfg = dict(header["train"])
    tcfg["encoder"] = EncoderConfig(**tcfg["encoder"])
    cfg = TrainConfig(**tcfg)
    g = header["grid"]
    grid = TimeGrid(g["dt"], g["steps"], g["origin"])
    state = PosteriorState.initial(cfg, header["obs_dim"], np.random.default_rng(0))
    state.load_arrays(arrays)
    opt = Adam(cfg.learning_rate)
    opt.load_state_arrays(arrays)
    return Trained(state, cfg, grid, int(header["epoch"]), header, opt)


def run_training(ds: Dataset, cfg: TrainConfig, resume: Trained | None = None,
                 callback=None) -> tuple[Trained, TrainResult]:
    if resume is not None:
        res = train(ds.observations, ds.grid, cfg, resume.state, resume.optimizer,
                    resume.epoch, callback)
    else:
        res = train(ds.observations, ds.grid, cfg, callback=callback)
    return Trained(res.state, cfg, ds.grid, res.epochs_done, optimizer=res.optimizer), res


def latent_means(t: Trained, X: np.ndarray) -> np.ndarray:
    return t.state.encode(X)


def mask_for(t: Trained, X: np.ndarray, tau: float = 0.1) -> np.ndarray:
    return relevance_mask(t.state, X, tau, use_lambda=t.cfg.ard_enabled)


# ------------------------------------------------------------ harmonic sweep

@dataclass
class SignalScores:
    label: str
    kind: str  # "sine" | "noise" | "square"
    omega: float
    encoder_mse: np.ndarray
    reid_mse: np.ndarray
    reid: ReidResult | None = None

    @property
    def median_encoder(self) -> float:
        return float(np.median(self.encoder_mse))

    @property
    def median_reid(self) -> float:
        return float(np.median(self.reid_mse))


def evaluation_signals(opts: EvalOptions, grid: TimeGrid) -> list[tuple[str, str, float, np.ndarray]]:
    """Sines beyond (and at the edge of) the training range, a square wave
    inside it, and unit Gaussian noise; ``n`` random phases each."""
    t = grid.times
    n = opts.samples_per_signal
    out = []
    for j, w in enumerate(opts.frequencies):
        X = np.empty((n, 1, grid.length))
        for i in range(n):
            r = np.random.default_rng([opts.seed, j, i])
            X[i, 0] = harmonic_sample(t, w, r.uniform(0, 2 * np.pi), opts.sigma_e, r)
        out.append((f"{w:g}", "sine", float(w), X))
    r = np.random.default_rng([opts.seed, 1000])
    noise = opts.noise_std * r.standard_normal((n, 1, grid.length))
    out.append(("noise", "noise", float("nan"), noise))
    r = np.random.default_rng([opts.seed, 2000])
    sq = np.stack([square_wave(t, opts.square_omega, r.uniform(0, 2 * np.pi))[None]
                   for _ in range(n)])
    out.append(("square", "square", opts.square_omega, sq))
    return out


def harmonic_sweep(t: Trained, mask: np.ndarray, opts: EvalOptions,
                   reid_opts: ReidOptions = ReidOptions()) -> list[SignalScores]:
    signals = evaluation_signals(opts, t.grid)
    X = np.concatenate([s[3] for s in signals])
    dec = t.decoder
    if opts.reidentify:
        res = reidentify_batch(X, t.state, dec, mask, reid_opts)
        enc, rmse = res.encoder_mse, res.mse
    else:
        res = None
        enc = decoder_mse(dec, t.state.encode(X), X)
        rmse = enc.copy()
    out = []
    off = 0
    for label, kind, w, Xs in signals:
        sl = slice(off, off + len(Xs))
        out.append(SignalScores(label, kind, w, enc[sl], rmse[sl]))
        off += len(Xs)
    return out


def observed_state(t: Trained) -> int:
    H = t.decoder.H.matrix
    return int(np.argmax(np.abs(H[0])))


def harmonic_frequencies(t: Trained, Z: np.ndarray, mask: np.ndarray | None = None):
    arch = t.arch
    obs = observed_state(t)
    fits = []
    for z in np.atleast_2d(Z):
        z = np.where(mask, z, 0.0) if mask is not None else z
        fits.append(harmonic_frequency(nau_matrix(arch, z[:arch.param_count]), obs))
    return fits


def lv_fits(t: Trained, Z: np.ndarray, mask: np.ndarray | None = None, threshold: float = 0.0):
    arch = t.arch
    out = []
    for z in np.atleast_2d(Z):
        z = np.where(mask, z, 0.0) if mask is not None else z
        out.append(lotka_volterra_coefficients(arch, z[:arch.param_count], threshold))
    return out


def equation_text(t: Trained, z: np.ndarray, threshold: float = 0.05, style: str = "text") -> str:
    model = unflatten_params(t.arch, np.asarray(z, dtype=float)[:t.arch.param_count])
    return render_equation(model, threshold, style)


def state_trajectories(t: Trained, z: np.ndarray, grid: TimeGrid | None = None) -> np.ndarray:
    return t.decoder.trajectory(np.asarray(z, dtype=float)[None], grid).data[0]


def latent_labels(arch: Architecture) -> list[str]:
    """Readable names for the latent coordinates, in storage order."""
    out = []
    for l, layer in enumerate(arch.layers):
        out += [f"{layer.kind}{l}[{r},{c}]" for r in range(layer.out_dim) for c in range(layer.in_dim)]
    return out + [f"xi0[{j}]" for j in range(arch.state_dim)]


def parse_samples(text: str | None, n: int) -> np.ndarray:
    """``None`` for all, ``"a:b"`` for a range, or comma-separated indices."""
    if text is None or text == "all":
        return np.arange(n)
    if ":" in text:
        a, b = text.split(":", 1)
        idx = np.arange(int(a or 0), min(int(b) if b else n, n))
    else:
        idx = np.array([int(v) for v in text.split(",")], dtype=int)
    if len(idx) == 0 or idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"sample selection {text!r} is outside 0..{n - 1}")
    return idx
