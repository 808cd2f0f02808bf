"""CSV emission (fixed, versioned schema) and figure rendering.

All floats are written with 9 significant digits so identical runs produce
byte-identical files.  Figures are rendered next to each CSV.
"""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

SCHEMA_VERSION = "lstmpool-csv-1"


def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_csv(path, header: list, rows: list, schema: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA_VERSION}/{schema}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def plot_metrics(csv_path, png_path, metric_label: str):
    header, rows = read_csv(csv_path)
    it = [int(r[header.index("iteration")]) for r in rows]
    loss = [float(r[header.index("train_loss")]) for r in rows]
    val = [float(r[header.index("val_metric")]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ax1.plot(it, loss, color="tab:blue", label="train loss")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(it, val, color="tab:red", label=metric_label)
    ax2.set_ylabel(metric_label, color="tab:red")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_histogram(csv_path, png_path, xlabel: str):
    header, rows = read_csv(csv_path)
    xs = [int(r[0]) for r in rows]
    ys = [int(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs, ys, color="tab:blue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("regions")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_response(csv_path, png_path):
    header, rows = read_csv(csv_path)
    avg = [float(r[header.index("avg")]) for r in rows]
    mx = [float(r[header.index("max")]) for r in rows]
    lstm = [float(r[header.index("lstm")]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(avg, label="avg pooling")
    ax.plot(mx, label="max pooling")
    ax.plot(lstm, label="learned pooling")
    ax.set_xlabel("region (sorted by avg)")
    ax.set_ylabel("pooled value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
