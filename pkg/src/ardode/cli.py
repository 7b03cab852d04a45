"""``ardode`` command line: generate, train, evaluate, reidentify, extract, plot.

Exit status is 0 on success, 1 on a usage error (bad flags, config keys,
files) and 2 when the numerics fail (diverging solves, non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import experiments as E
from . import io
from .plotting import (EmptyReportError, plot_latent_boxes, plot_latent_heatmap,
                       plot_score_boxes, plot_training_log, plot_trajectories)
from .reidentify import reidentify_batch
from .solver import DivergenceError
from .vae import TrainingError

log = logging.getLogger("ardode")

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _config(args) -> C.ExperimentConfig:
    sections = C.read_sections(args.config)
    overrides = list(args.set or [])
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if getattr(args, "ard", None) is not None:
        overrides.append(f"train.ard_enabled={args.ard}")
    if getattr(args, "generator", None):
        overrides.append(f"data.generator={args.generator}")
    if getattr(args, "data_seed", None) is not None:
        overrides.append(f"data.seed={args.data_seed}")
    return C.build(C.apply_overrides(sections, overrides))


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(type(v))


def _finite(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _config(args)
    ds = E.make_dataset(cfg)
    io.save_dataset(args.output, ds)
    if args.csv:
        io.export_dataset_csv(args.csv, ds)
    print(f"wrote {len(ds)} samples (d={ds.obs_dim}, T={ds.grid.length}) to {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = io.load_dataset(args.data)
    resume = E.load_trained(args.resume) if args.resume else None
    tcfg = cfg.train
    if resume is not None:
        # architecture and observation are fixed by the checkpoint
        if (resume.cfg.model_arch, resume.cfg.observation) != (tcfg.model_arch, tcfg.observation):
            raise UsageError("config architecture/observation differ from the resumed checkpoint")
    log_path = Path(args.log) if args.log else Path(args.output).with_suffix(".log.csv")
    if resume is not None:
        prev = Path(args.resume).with_suffix(".log.csv")
        if prev.exists() and prev.resolve() != log_path.resolve():
            shutil.copyfile(prev, log_path)
    m = tcfg.arch.param_count + tcfg.arch.state_dim
    every = max(1, tcfg.epochs // 20)

    def progress(rec):
        if not args.quiet and (rec.epoch % every == 0 or rec.epoch == tcfg.epochs - 1):
            print(f"epoch {rec.epoch:5d} loss {rec.loss:10.4f} nll {rec.nll:10.4f} "
                  f"kl {rec.kl:8.4f} sigma_x {rec.sigma_x:.4f}", flush=True)

    trained, res = E.run_training(ds, tcfg, resume, progress)
    io.write_training_log(log_path, res.records, m, append=resume is not None)
    E.save_trained(args.output, trained, _hash_source(cfg))
    print(f"trained to epoch {trained.epoch}; checkpoint {args.output}, log {log_path}")
    return 0


def _hash_source(cfg: C.ExperimentConfig) -> dict:
    return {"data": cfg.data, "train": cfg.train.to_dict()}


def _load(args):
    t = E.load_trained(args.checkpoint)
    ds = io.load_dataset(args.data)
    if ds.grid.dt != t.grid.dt:
        raise UsageError(f"dataset dt={ds.grid.dt} differs from training dt={t.grid.dt}")
    return t, ds


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    t, ds = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = E.latent_labels(t.arch)
    mu = E.latent_means(t, ds.observations)
    mask = E.mask_for(t, ds.observations, cfg.evaluate.tau)
    report = {
        "config_hash": t.header.get("config_hash"),
        "eval_config_hash": io.config_hash(cfg.to_dict()),
        "checkpoint": str(args.checkpoint), "dataset": str(args.data),
        "architecture": t.cfg.model_arch, "observation": t.cfg.observation,
        "ard_enabled": t.cfg.ard_enabled, "epoch": t.epoch,
        "latent_labels": labels, "mask": mask.astype(int).tolist(),
        "popcount": int(mask.sum()), "lambda_z": t.state.lambda_z.tolist(),
        "sigma_z": t.state.sigma_z.tolist(), "sigma_x": float(t.state.sigma_x),
        "mean_abs_mu": np.abs(mu).mean(0).tolist(),
    }
    with open(out / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + labels)
        for i, row in enumerate(mu):
            w.writerow([i] + [repr(float(v)) for v in row])
    if ds.obs_dim == 1 and not args.no_sweep:
        scores = E.harmonic_sweep(t, mask, cfg.evaluate, cfg.reidentify)
        report["signals"] = [{"label": s.label, "kind": s.kind, "omega": _finite(s.omega),
                              "median_encoder_mse": s.median_encoder,
                              "median_reidentified_mse": s.median_reid} for s in scores]
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["signal", "sample", "encoder_mse", "reidentified_mse"])
            for s in scores:
                for i, (a, b) in enumerate(zip(s.encoder_mse, s.reid_mse)):
                    w.writerow([s.label, i, repr(float(a)), repr(float(b))])
    _write_json(out / "report.json", report)
    lines = [f"checkpoint {args.checkpoint} (epoch {t.epoch}, config {report['config_hash']})",
             f"relevant latents ({report['popcount']} of {len(mask)}): "
             + ", ".join(l for l, k in zip(labels, mask) if k)]
    for s in report.get("signals", []):
        lines.append(f"  {s['label']:>7s}  encoder {s['median_encoder_mse']:.3e}  "
                     f"reidentified {s['median_reidentified_mse']:.3e}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_reidentify(args) -> int:
    cfg = _config(args)
    t, ds = _load(args)
    idx = E.parse_samples(args.samples, len(ds))
    mask = E.mask_for(t, ds.observations, cfg.evaluate.tau)
    res = reidentify_batch(ds.observations[idx], t.state, t.decoder, mask, cfg.reidentify)
    labels = E.latent_labels(t.arch)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "encoder_mse", "reidentified_mse", "from_encoder", "diverged"]
                   + labels)
        for k, i in enumerate(idx):
            w.writerow([int(i), repr(float(res.encoder_mse[k])), repr(float(res.mse[k])),
                        int(res.from_encoder[k]), int(res.diverged[k])]
                       + [repr(float(v)) for v in res.z[k]])
    print(f"reidentified {len(idx)} samples: median MSE {np.median(res.encoder_mse):.3e} -> "
          f"{np.median(res.mse):.3e}; wrote {args.output}")
    return 0


def _extract_one(t, ds, i, z, mask, threshold, style) -> dict:
    rec = {"sample_id": int(i), "equation": E.equation_text(t, np.where(mask, z, 0.0),
                                                           threshold, style)}
    arch = t.arch
    if len(arch.layers) == 1 and arch.layers[0].kind == "nau":
        fit = E.harmonic_frequencies(t, z, mask)[0]
        rec.update(omega_hat=fit.omega, b=fit.b, w1=fit.w1, w2=fit.w2, partner=fit.partner)
        if "omega" in ds.meta:
            rec["omega_true"] = float(ds.meta["omega"][i])
    elif arch.state_dim == 2 and ds.generator == "lotka_volterra":
        fit = E.lv_fits(t, z, mask)[0]
        rec.update(alpha=fit.alpha, beta=fit.beta, delta=fit.delta, gamma=fit.gamma,
                   residual=fit.residual)
        for k in ("alpha", "beta", "delta", "gamma"):
            rec[f"{k}_true"] = float(ds.meta[k][i])
    return rec


def cmd_extract(args) -> int:
    cfg = _config(args)
    t, ds = _load(args)
    idx = E.parse_samples(args.samples, len(ds))
    mask = E.mask_for(t, ds.observations, cfg.evaluate.tau)
    X = ds.observations[idx]
    if args.reidentify:
        Z = reidentify_batch(X, t.state, t.decoder, mask, cfg.reidentify).z
    else:
        Z = E.latent_means(t, X)
    recs = [_extract_one(t, ds, i, z, mask, args.threshold, args.style) for i, z in zip(idx, Z)]
    for r in recs:
        print(f"sample {r['sample_id']}:")
        print("  " + r["equation"].replace("\n", "\n  "))
        extra = {k: v for k, v in r.items() if k not in ("sample_id", "equation")}
        if extra:
            print("  " + ", ".join(f"{k}={v:.4g}" for k, v in extra.items()
                                   if isinstance(v, float)))
    if args.output:
        _write_json(args.output, {"config_hash": t.header.get("config_hash"),
                                  "reidentified": bool(args.reidentify), "samples": recs})
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out_dir)
    made = []
    if args.log:
        made.append(plot_training_log(out / "training.svg", io.read_training_log(args.log)))
    if args.report:
        rdir = Path(args.report)
        rep = json.loads((rdir / "report.json").read_text())
        labels = rep["latent_labels"]
        made.append(plot_latent_heatmap(out / "lambda_heatmap.svg",
                                        [rep["lambda_z"], rep["mean_abs_mu"]],
                                        ["lambda_z", "mean |mu|"], labels,
                                        f"config {rep.get('config_hash')}"))
        lat = rdir / "latents.csv"
        if lat.exists():
            rows = np.loadtxt(lat, delimiter=",", skiprows=1, ndmin=2)
            if len(rows):
                made.append(plot_latent_boxes(out / "latent_boxes.svg", rows[:, 1:], labels,
                                              rep["mask"]))
        sc = rdir / "scores.csv"
        if sc.exists():
            scores: dict[str, dict[str, list]] = {}
            with open(sc, newline="") as fh:
                for r in csv.DictReader(fh):
                    d = scores.setdefault(r["signal"], {"encoder": [], "reidentified": []})
                    d["encoder"].append(float(r["encoder_mse"]))
                    d["reidentified"].append(float(r["reidentified_mse"]))
            if scores:
                made.append(plot_score_boxes(out / "scores.svg", scores))
    if args.checkpoint and args.data:
        t, ds = _load(args)
        for i in E.parse_samples(args.samples or "0", len(ds)):
            z = E.latent_means(t, ds.observations[i:i + 1])[0]
            traj = E.state_trajectories(t, z, ds.grid)
            pred = t.decoder.H.matrix @ traj
            series = {f"state {j}": traj[j] for j in range(len(traj))}
            series.update({f"fit x_{j}": pred[j] for j in range(len(pred))})
            obs = {f"data x_{j}": ds.observations[i, j] for j in range(ds.obs_dim)}
            made.append(plot_trajectories(out / f"trajectory_{i}.svg", ds.grid.times, series,
                                          f"sample {i}", obs))
    if not made:
        raise EmptyReportError("nothing to plot: pass --log, --report or --checkpoint with --data")
    for p in made:
        print(p)
    return 0


# ------------------------------------------------------------------ parser

def _common(p, data=True):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    if data:
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset file")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ardode", description="Sparse ODE identification with an ARD prior.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _common(g, data=False)
    g.add_argument("--generator", help="harmonic, double_harmonic, lotka_volterra")
    g.add_argument("--seed", dest="data_seed", type=int)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--csv", help="also export the observations as CSV")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit the encoder and latent scales")
    _common(t, data=False)
    t.add_argument("--data", required=True)
    t.add_argument("-o", "--output", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: <output>.log.csv)")
    t.add_argument("--ard", choices=["on", "off"])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="total epochs, including resumed ones")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="relevance mask and reconstruction report")
    _common(e)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--no-sweep", action="store_true", help="skip the test-signal sweep")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reidentify", help="refine latent codes per sample")
    _common(r)
    r.add_argument("--samples", help="all (default), a:b or i,j,k")
    r.add_argument("-o", "--output", required=True, help="CSV path")
    r.set_defaults(func=cmd_reidentify)

    x = sub.add_parser("extract", help="print identified equations and parameters")
    _common(x)
    x.add_argument("--samples", default="0")
    x.add_argument("--reidentify", action=argparse.BooleanOptionalAction, default=True)
    x.add_argument("--threshold", type=float, default=0.05)
    x.add_argument("--style", choices=["text", "latex"], default="text")
    x.add_argument("-o", "--output", help="JSON path")
    x.set_defaults(func=cmd_extract)

    pl = sub.add_parser("plot", help="render SVG figures")
    pl.add_argument("--log", help="training log CSV")
    pl.add_argument("--report", help="evaluate output directory")
    pl.add_argument("--checkpoint")
    pl.add_argument("--data")
    pl.add_argument("--samples")
    pl.add_argument("--out-dir", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, TrainingError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"ardode: numerical failure: {err}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (UsageError, C.ConfigError, io.FormatError, EmptyReportError, OSError,
            ValueError, KeyError, TypeError) as err:
        print(f"ardode: error: {err}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
