"""SVG figures from logged CSV artifacts, with the plotted data embedded as a comment."""
from __future__ import annotations

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["read_search_log", "plot_alpha_evolution", "plot_dominant_ops", "plot_hessian",
           "plot_landscape", "plot_run_dir"]

plt.rcParams["svg.hashsalt"] = "noisydarts"


def _save(fig, path: str, data_text: str) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    comment = "<!-- data\n" + data_text.replace("--", "- -") + "-->\n"
    head, sep, rest = svg.partition("?>\n")
    svg = head + sep + comment + rest if sep else comment + svg
    with open(path, "w") as fh:
        fh.write(svg)


def read_search_log(path: str) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty search log")
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(header)))
    return header, data


def _edge_groups(header: list[str]) -> dict[str, list[tuple[int, str]]]:
    groups: dict[str, list[tuple[int, str]]] = {}
    for i, name in enumerate(header):
        if "/" in name:
            edge, op = name.split("/", 1)
            groups.setdefault(edge, []).append((i, op))
    return groups


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def plot_alpha_evolution(log_path: str, out_path: str) -> str:
    header, data = read_search_log(log_path)
    groups = _edge_groups(header)
    if not groups:
        raise ValueError(f"{log_path}: no architecture columns")
    epochs = data[:, 0] if len(data) else np.zeros(0)
    n = len(groups)
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows), squeeze=False)
    for ax, (edge, items) in zip(axes.ravel(), groups.items()):
        idx = [i for i, _ in items]
        w = _softmax(data[:, idx]) if len(data) else np.zeros((0, len(idx)))
        for k, (_, op) in enumerate(items):
            ax.plot(epochs, w[:, k], label=op)
        ax.set_title(edge, fontsize=8)
        ax.set_ylim(0, 1)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    axes[0, 0].legend(fontsize=6)
    fig.supxlabel("epoch")
    fig.supylabel("softmax weight")
    fig.tight_layout()
    with open(log_path) as fh:
        _save(fig, out_path, fh.read())
    return out_path


def plot_dominant_ops(log_path: str, out_path: str) -> str:
    header, data = read_search_log(log_path)
    groups = _edge_groups(header)
    if not groups:
        raise ValueError(f"{log_path}: no architecture columns")
    ops = sorted({op for items in groups.values() for _, op in items})
    share = np.zeros((len(data), len(ops)))
    for items in groups.values():
        idx = [i for i, _ in items]
        if len(data):
            best = np.argmax(data[:, idx], axis=1)
            for r, b in enumerate(best):
                share[r, ops.index(items[b][1])] += 1
    share /= max(len(groups), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = data[:, 0] if len(data) else np.zeros(0)
    if len(data):
        ax.stackplot(epochs, share.T, labels=ops)
    ax.set_xlabel("epoch")
    ax.set_ylabel("share of edges where op dominates")
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1, 1))
    fig.tight_layout()
    text = "epoch," + ",".join(ops) + "\n" + "".join(
        f"{int(e)}," + ",".join(repr(float(v)) for v in row) + "\n" for e, row in zip(epochs, share))
    _save(fig, out_path, text)
    return out_path


def plot_hessian(csv_path: str, out_path: str) -> str:
    from .diagnostics import HessianTrace
    with open(csv_path) as fh:
        text = fh.read()
    trace = HessianTrace.from_csv(text)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(trace.epochs, trace.raw, alpha=0.4, label="raw")
    ax.plot(trace.epochs, trace.smoothed, label=f"smoothed (window {trace.window})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("max eigenvalue of the logit Hessian")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path, text)
    return out_path


def plot_landscape(csv_path: str, out_path: str) -> str:
    with open(csv_path) as fh:
        text = fh.read()
    rows = [r for r in csv.reader(line for line in text.splitlines() if not line.startswith("#"))]
    if len(rows) < 2:
        raise ValueError(f"{csv_path}: empty landscape grid")
    ys = np.array([float(v) for v in rows[0][1:]])
    xs = np.array([float(r[0]) for r in rows[1:]])
    z = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if z.shape[0] > 1 and z.shape[1] > 1:
        cs = ax.contourf(ys, xs, z, levels=12)
        fig.colorbar(cs, ax=ax)
    else:
        ax.imshow(z)
    ax.set_xlabel("d_y offset")
    ax.set_ylabel("d_x offset")
    fig.tight_layout()
    _save(fig, out_path, text)
    return out_path


def plot_run_dir(root: str) -> list[str]:
    """Render every known artifact below ``root``; raises if there is none."""
    made = []
    for dirpath, _, files in sorted(os.walk(root)):
        files = set(files)
        if "search_log.csv" in files:
            log = os.path.join(dirpath, "search_log.csv")
            made.append(plot_alpha_evolution(log, os.path.join(dirpath, "alpha_evolution.svg")))
            made.append(plot_dominant_ops(log, os.path.join(dirpath, "dominant_ops.svg")))
        if "hessian.csv" in files:
            made.append(plot_hessian(os.path.join(dirpath, "hessian.csv"), os.path.join(dirpath, "hessian.svg")))
        if "landscape.csv" in files:
            made.append(plot_landscape(os.path.join(dirpath, "landscape.csv"),
                                       os.path.join(dirpath, "landscape.svg")))
    if not made:
        raise FileNotFoundError(f"no plottable artifacts (search_log.csv, hessian.csv, landscape.csv) under {root}")
    return made
