"""SVG figures for reports.  Every file carries the plotted numbers as a
JSON comment right after the XML prolog, so it stands on its own."""
from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "ardode"
matplotlib.rcParams["svg.fonttype"] = "none"


class EmptyReportError(ValueError):
    pass


def _tolist(v):
    if isinstance(v, np.ndarray):
        return np.where(np.isfinite(v), v, np.nan).tolist() if v.dtype.kind == "f" else v.tolist()
    if isinstance(v, dict):
        return {k: _tolist(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_tolist(x) for x in v]
    return v


def data_comment(data: dict) -> str:
    text = json.dumps(_tolist(data), sort_keys=True, allow_nan=True)
    return "<!-- ardode-data " + text.replace("--", "- -") + " -->"


def save_svg(fig, path, data: dict):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    cut = svg.index("?>") + 2 if svg.startswith("<?xml") else 0
    svg = svg[:cut] + "\n" + data_comment(data) + svg[cut:]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(svg)
    return Path(path)


def read_data_comment(path) -> dict:
    text = Path(path).read_text()
    start = text.index("<!-- ardode-data ") + len("<!-- ardode-data ")
    end = text.index(" -->", start)
    return json.loads(text[start:end])


def plot_trajectories(path, t, series: dict[str, np.ndarray], title: str = "",
                      observed: dict[str, np.ndarray] | None = None):
    """Lines for each named series; ``observed`` series are drawn as dots."""
    if not series and not observed:
        raise EmptyReportError("nothing to plot")
    t = np.asarray(t, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, y in series.items():
        ax.plot(t, np.asarray(y, dtype=float), label=name, lw=1.4)
    for name, y in (observed or {}).items():
        ax.plot(t, np.asarray(y, dtype=float), ".", ms=3, label=name, color="k", alpha=0.6)
    ax.set_xlabel("t")
    ax.set_title(title)
    ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    data = {"t": t, "series": dict(series), "observed": dict(observed or {})}
    return save_svg(fig, path, data)


def plot_latent_heatmap(path, values, row_labels=None, col_labels=None, title: str = ""):
    """Heatmap with one cell per latent dimension and row (e.g. lambda_z)."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EmptyReportError("no latent values")
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * v.shape[1] + 1.5), 0.6 * v.shape[0] + 1.4))
    im = ax.imshow(v, aspect="auto", cmap="viridis")
    ax.set_xticks(range(v.shape[1]))
    ax.set_xticklabels(col_labels or [str(i) for i in range(v.shape[1])], rotation=90,
                       fontsize="small")
    ax.set_yticks(range(v.shape[0]))
    ax.set_yticklabels(row_labels or [str(i) for i in range(v.shape[0])])
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            ax.text(j, i, f"{v[i, j]:.2g}", ha="center", va="center", fontsize=6, color="w")
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path, {"values": v, "rows": row_labels, "cols": col_labels,
                                "cells": int(v.size)})


def plot_latent_boxes(path, means, labels=None, mask=None, title: str = "posterior means"):
    """One box per latent dimension over samples; relevant ones highlighted."""
    v = np.asarray(means, dtype=float)
    if v.ndim != 2 or v.size == 0:
        raise EmptyReportError("no latent samples")
    m = v.shape[1]
    labels = labels or [str(i) for i in range(m)]
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * m + 2), 3.5))
    bp = ax.boxplot([v[:, j] for j in range(m)], patch_artist=True, showfliers=False)
    ax.set_xticks(range(1, m + 1))
    ax.set_xticklabels(labels, rotation=90, fontsize="small")
    for j, box in enumerate(bp["boxes"]):
        box.set_facecolor("tab:orange" if mask is not None and mask[j] else "lightgray")
    ax.axhline(0, color="k", lw=0.5)
    ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path, {"labels": labels, "median": np.median(v, 0),
                                "q1": np.percentile(v, 25, 0), "q3": np.percentile(v, 75, 0),
                                "mask": None if mask is None else np.asarray(mask).astype(int)})


def plot_score_boxes(path, scores: dict[str, dict[str, np.ndarray]], title: str = "MSE"):
    """Grouped boxes: for each signal label one box per method (log scale)."""
    if not scores:
        raise EmptyReportError("no scores")
    labels = list(scores)
    methods = sorted({k for v in scores.values() for k in v})
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(labels) + 2), 3.5))
    width = 0.8 / len(methods)
    colors = ["tab:blue", "tab:orange", "tab:green"]
    for k, meth in enumerate(methods):
        pos = np.arange(len(labels)) + (k - (len(methods) - 1) / 2) * width
        vals = [np.clip(np.asarray(scores[lab].get(meth, [np.nan]), float), 1e-12, None)
                for lab in labels]
        bp = ax.boxplot(vals, positions=pos, widths=width * 0.9, patch_artist=True,
                        showfliers=False)
        for box in bp["boxes"]:
            box.set_facecolor(colors[k % len(colors)])
        ax.plot([], [], "s", color=colors[k % len(colors)], label=meth)
    ax.set_yscale("log")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.legend(fontsize="small")
    ax.set_title(title)
    fig.tight_layout()
    data = {lab: {m: np.asarray(v, float) for m, v in d.items()} for lab, d in scores.items()}
    return save_svg(fig, path, data)


def plot_training_log(path, log: dict[str, np.ndarray]):
    if not log or len(log.get("epoch", [])) == 0:
        raise EmptyReportError("empty training log")
    ep = log["epoch"]
    lam = sorted(k for k in log if k.startswith("lambda_z_"))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for k in ("loss", "nll", "kl"):
        a1.plot(ep, log[k], label=k)
    a1.set_xlabel("epoch")
    a1.legend(fontsize="small")
    for k in lam:
        a2.semilogy(ep, log[k], lw=0.8)
    a2.set_xlabel("epoch")
    a2.set_title("lambda_z")
    fig.tight_layout()
    return save_svg(fig, path, {k: np.asarray(v) for k, v in log.items()})
