"""File formats: datasets, checkpoints and training logs.

Datasets and checkpoints are ``.npz`` archives (readable with ``np.load``)
written with fixed zip timestamps, so identical content gives identical
bytes.  Each archive carries a JSON header under the key ``header``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .datagen import Dataset
from .solver import TimeGrid

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def write_npz(path, arrays: dict[str, np.ndarray], header: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = {"header": np.array(json.dumps(header, sort_keys=True))}
    items.update(arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in items:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(items[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "header" not in z.files:
            raise FormatError(f"{path} has no header record")
        header = json.loads(str(z["header"]))
        arrays = {k: z[k] for k in z.files if k != "header"}
    return header, arrays


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ dataset

def save_dataset(path, ds: Dataset):
    header = {
        "format": "ardode-dataset", "version": DATASET_VERSION,
        "generator": ds.generator, "seed": ds.seed, "options": ds.options,
        "grid": {"dt": ds.grid.dt, "steps": ds.grid.steps, "origin": ds.grid.origin},
        "d": ds.obs_dim, "L": len(ds), "meta_keys": sorted(ds.meta),
    }
    arrays = {"observations": ds.observations}
    arrays.update({f"meta.{k}": v for k, v in ds.meta.items()})
    write_npz(path, arrays, header)


def load_dataset(path) -> Dataset:
    header, arrays = read_npz(path)
    if header.get("format") != "ardode-dataset":
        raise FormatError(f"{path} is not a dataset file")
    g = header["grid"]
    meta = {k[len("meta."):]: v for k, v in arrays.items() if k.startswith("meta.")}
    return Dataset(arrays["observations"], TimeGrid(g["dt"], g["steps"], g["origin"]),
                   header["generator"], header["seed"], header["options"], meta)


def export_dataset_csv(path, ds: Dataset):
    d = ds.obs_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t"] + [f"x_{j}" for j in range(d)])
        t = ds.grid.times
        for i, obs in enumerate(ds.observations):
            for k in range(len(t)):
                w.writerow([i, repr(float(t[k]))] + [repr(float(v)) for v in obs[:, k]])


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict):
    header = {"format": "ardode-checkpoint", "version": CHECKPOINT_VERSION, **meta}
    write_npz(path, arrays, header)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = read_npz(path)
    if header.get("format") != "ardode-checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    return header, arrays


# ---------------------------------------------------------------------- log

def log_header(m: int) -> list[str]:
    return ["epoch", "loss", "nll", "kl", "sigma_x"] + [f"lambda_z_{i}" for i in range(m)]


def write_training_log(path, records: Iterable, m: int, append: bool = False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(log_header(m))
        for r in records:
            w.writerow([r.epoch, repr(r.loss), repr(r.nll), repr(r.kl), repr(r.sigma_x)]
                       + [repr(float(v)) for v in r.lambda_z])


def read_training_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path} has no records")
    cols = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {c: data[:, i] for i, c in enumerate(cols)}
