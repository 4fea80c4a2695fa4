"""CSV and static SVG output for embeddings and sweep results."""

import csv
import statistics
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mbnspeaker.pipeline import best_over_dims, write_rows  # noqa: E402

KINDS = ("scatter", "sensitivity", "depth")


class PlotError(ValueError):
    pass


def _save_svg(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "mbnspeaker"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_scatter(out_dir, utterance_ids, embedding, labels, stem="scatter"):
    """Write ``<stem>.csv`` (utterance_id, dim1, dim2, true_label) and ``<stem>.svg``."""
    Y = np.asarray(embedding, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise PlotError("a scatter plot needs an embedding with at least 2 dimensions")
    if len(utterance_ids) != Y.shape[0] or len(labels) != Y.shape[0]:
        raise PlotError("ids, embedding rows and labels must have equal length")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "dim1", "dim2", "true_label"])
        for uid, (a, b), lab in zip(utterance_ids, Y[:, :2], labels):
            writer.writerow([uid, repr(float(a)), repr(float(b)), lab])

    fig, ax = plt.subplots(figsize=(5, 5))
    classes = sorted(set(labels), key=str)
    cmap = plt.get_cmap("tab20" if len(classes) > 10 else "tab10")
    labels_arr = np.asarray(labels, dtype=object)
    for i, cls in enumerate(classes):
        mask = labels_arr == cls
        ax.scatter(Y[mask, 0], Y[mask, 1], s=8, color=cmap(i % cmap.N), label=str(cls))
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    if len(classes) <= 20:
        ax.legend(fontsize=6, markerscale=1.5, loc="best")
    svg_path = out_dir / f"{stem}.svg"
    _save_svg(fig, svg_path)
    return csv_path, svg_path


def emit_sensitivity(out_dir, rows, stem="sensitivity"):
    """Best-over-output-dims NMI against the UBM mixture count, one panel per EM setting."""
    if not rows:
        raise PlotError("empty results table")
    out_dir = Path(out_dir)
    best = best_over_dims(rows)
    tidy = [
        {"method": m, "mixtures": c, "em_iters": e, "output_dim": "best", "seed": s, "nmi": v}
        for (m, c, e, s), v in sorted(best.items(), key=lambda kv: tuple(map(str, kv[0])))
    ]
    if not tidy:
        raise PlotError("results table holds no scored rows")
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    write_rows(csv_path, tidy, ("method", "mixtures", "em_iters", "output_dim", "seed", "nmi"))

    em_values = sorted({r["em_iters"] for r in tidy})
    fig, axes = plt.subplots(1, len(em_values), figsize=(4.5 * len(em_values), 3.5), squeeze=False)
    for ax, em in zip(axes[0], em_values):
        for method in sorted({r["method"] for r in tidy}):
            pts = {}
            for r in tidy:
                if r["method"] == method and r["em_iters"] == em:
                    pts.setdefault(r["mixtures"], []).append(r["nmi"])
            xs = sorted(pts)
            ax.plot(xs, [statistics.median(pts[x]) for x in xs], marker="o", label=method)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("UBM mixtures")
        ax.set_ylabel("NMI")
        ax.set_title(f"{em} EM iterations")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
    fig.tight_layout()
    svg_path = out_dir / f"{stem}.svg"
    _save_svg(fig, svg_path)
    return csv_path, svg_path


def emit_depth(out_dir, rows, stem="depth"):
    """NMI against the number of hidden layers; one line per (method, output dim)."""
    depth_rows = [r for r in rows if r.get("depth") not in ("", None) and r.get("nmi") is not None]
    if not depth_rows:
        raise PlotError("no depth rows in results table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tidy = [
        {k: r[k] for k in ("method", "mixtures", "em_iters", "depth", "seed", "nmi")} | {"output_dim": r["output_dim"]}
        for r in depth_rows
    ]
    csv_path = out_dir / f"{stem}.csv"
    write_rows(csv_path, tidy, ("method", "mixtures", "em_iters", "output_dim", "depth", "seed", "nmi"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = {}
    for r in tidy:
        groups.setdefault((r["method"], r["output_dim"]), {}).setdefault(r["depth"], []).append(r["nmi"])
    for (method, dim), pts in sorted(groups.items()):
        xs = sorted(pts)
        ax.plot(xs, [statistics.median(pts[x]) for x in xs], marker="o", label=f"{method} d={dim}")
    ax.set_xlabel("hidden layers")
    ax.set_ylabel("NMI")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    svg_path = out_dir / f"{stem}.svg"
    _save_svg(fig, svg_path)
    return csv_path, svg_path


def emit_plot_data(out_dir, kind, rows=None, utterance_ids=None, embedding=None, labels=None):
    if kind == "scatter":
        return emit_scatter(out_dir, utterance_ids, embedding, labels)
    if kind == "sensitivity":
        return emit_sensitivity(out_dir, rows or [])
    if kind == "depth":
        return emit_depth(out_dir, rows or [])
    raise PlotError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
