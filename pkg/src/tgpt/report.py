"""report.csv / report.md writers and the matplotlib figures next to them."""

from __future__ import annotations

import csv
import io
import math
import os

import numpy as np

from . import metrics
from .anno import TISSUE_STATUSES

CSV_COLUMNS = ("clip_id", "scenario", "instrument_type", "n_points", "skipped",
               "delta_2", "delta_4", "delta_8", "delta_16", "delta_32",
               "delta_avg", "aj", "oa", "epe", "text_acc")


def _fmt(v, digits=6):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.{digits}f}"
    return str(v)


def _pct(v):
    # the tables read like the usual tracking tables: fractions as percentages
    return "n/a" if math.isnan(v) else f"{100 * v:.2f}"


def report_csv(reports) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        wr.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _table(rows, first="Scenario"):
    out = [f"| {first} | Clips | Skipped | AJ | <δ_avg | OA | EPE (px) | Status acc |",
           "|---|---:|---:|---:|---:|---:|---:|---:|"]
    for r in rows:
        epe = "n/a" if math.isnan(r["epe"]) else f"{r['epe']:.2f}"
        name = f"**{r['group']}**" if r["group"] == metrics.MEAN_ROW else r["group"]
        out.append(f"| {name} | {r['clips']} | {r['skipped']} | {_pct(r['aj'])} | {_pct(r['delta_avg'])} "
                   f"| {_pct(r['oa'])} | {epe} | {_pct(r['text_acc'])} |")
    return "\n".join(out)


def report_md(reports, title="Evaluation", figures=()) -> str:
    rows = metrics.aggregate(reports, "scenario")
    recall = metrics.pooled_status_recall(reports)
    parts = [f"# {title}", "",
             "Fractions are percentages; positions are scored in a 256x256 frame.", "",
             "## Overall", "", _table([r for r in rows if r["group"] == metrics.MEAN_ROW], first="Split"), "",
             "## By scenario", "", _table(rows), "",
             "## Status recall", "",
             "| Status | Recall | Samples |", "|---|---:|---:|"]
    counts = {}
    for r in reports:
        for s, (c, n) in r.status_counts.items():
            counts[s] = counts.get(s, 0) + n
    for s in sorted(recall, key=lambda s: s.value):
        parts.append(f"| {s.value} | {_pct(recall[s])} | {counts[s]} |")
    if figures:
        parts += ["", "## Figures", ""]
        parts += [f"![{os.path.splitext(f)[0]}]({f})" for f in figures]
    return "\n".join(parts) + "\n"


def write_reports(out_dir, reports, loss_rows=None, figures=True, title="Evaluation") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    made = []
    if figures:
        made.append(plot_delta_curves(reports, os.path.join(out_dir, "delta_curves.png")))
        made.append(plot_status_recall(reports, os.path.join(out_dir, "status_recall.png")))
        if loss_rows:
            made.append(plot_loss(loss_rows, os.path.join(out_dir, "loss_curve.png")))
        made = [os.path.basename(m) for m in made]
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report_csv(reports))
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write(report_md(reports, title, made))
    return made


# ---------------------------------------------------------------- figures

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "figure.figsize": (5.0, 3.2),
        "figure.dpi": 120,
        "savefig.bbox": "tight",
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "svg.hashsalt": "tgpt",
    })
    return plt


def _save(fig, path):
    # no timestamp in the PNG metadata so reruns are byte-identical
    fig.savefig(path, metadata={"Software": None})
    fig.clf()


def plot_delta_curves(reports, path):
    plt = _plt()
    fig, ax = plt.subplots()
    by = {}
    for r in reports:
        if not r.skipped:
            by.setdefault(r.scenario, []).append([r.delta_at[k] for k in metrics.THRESHOLDS])
    for name in sorted(by):
        ax.plot(metrics.THRESHOLDS, np.mean(by[name], axis=0), marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xticks(metrics.THRESHOLDS, [str(k) for k in metrics.THRESHOLDS])
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("threshold k (px, 256x256 frame)")
    ax.set_ylabel("fraction within k")
    if by:
        ax.legend(fontsize=7, frameon=False)
    _save(fig, path)
    plt.close(fig)
    return path


def plot_status_recall(reports, path):
    plt = _plt()
    recall = metrics.pooled_status_recall(reports)
    order = [s for s in TISSUE_STATUSES if s in recall] + sorted(
        (s for s in recall if s not in TISSUE_STATUSES), key=lambda s: s.value)
    fig, ax = plt.subplots()
    ax.bar(range(len(order)), [recall[s] for s in order], color="#4c72b0")
    ax.set_xticks(range(len(order)), [s.value for s in order], rotation=30, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("recall")
    _save(fig, path)
    plt.close(fig)
    return path


def plot_loss(rows, path):
    plt = _plt()
    fig, ax = plt.subplots()
    steps = [r["step"] for r in rows]
    for key in ("total", "points", "smooth", "text"):
        ax.plot(steps, [max(r[key], 1e-12) for r in rows], lw=0.8, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, frameon=False)
    _save(fig, path)
    plt.close(fig)
    return path


def ablation_md(rows) -> str:
    """rows: dicts with text, clip_size, aj, delta_avg, oa, epe."""
    out = ["| Text | Clip size | AJ | <δ_avg | OA | EPE (px) |", "|---|---|---:|---:|---:|---:|"]
    for r in rows:
        mark = "✓" if r["text"] else "✗"
        epe = "n/a" if math.isnan(r["epe"]) else f"{r['epe']:.2f}"
        out.append(f"| {mark} | {r['clip_size']} | {_pct(r['aj'])} | {_pct(r['delta_avg'])} | {_pct(r['oa'])} | {epe} |")
    return "\n".join(out) + "\n"


def plot_ablation(rows, path):
    plt = _plt()
    fig, ax = plt.subplots()
    labels = [f"{'text' if r['text'] else 'no text'}\n{r['clip_size']}" for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["aj"] for r in rows], 0.4, label="AJ")
    ax.bar(x + 0.2, [r["delta_avg"] for r in rows], 0.4, label="<δ_avg")
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7, frameon=False)
    _save(fig, path)
    plt.close(fig)
    return path
