"""Render schema-tagged CSV tables to standalone SVG charts."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .pipeline import read_csv  # noqa: E402

_BAR_SCHEMAS = {
    "slotosr-metrics-v1": ("set", "metric", "value"),
    "slotosr-diagnostics-v1": (None, "field", "value"),
    "slotosr-accuracy-v1": (None, "mode", "accuracy"),
    "slotosr-datasummary-v1": (None, "split", "count"),
}


def render_csv(csv_path, out_path):
    """Bar chart for metric-style tables, line chart for training histories."""
    schema, fields, rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: nothing to plot")
    if schema == "slotosr-history-v1":
        _render_history(rows, fields, out_path)
    elif schema in _BAR_SCHEMAS:
        group, label, value = _BAR_SCHEMAS[schema]
        names = [(f"{r[group]}:{r[label]}" if group else r[label]) for r in rows]
        _render_bars(names, [float(r[value]) for r in rows], out_path)
    else:
        raise ValueError(f"{csv_path}: schema {schema!r} has no chart form")
    return out_path


def _render_bars(names, values, out_path):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names)), 3.2))
    ax.bar(range(len(values)), values, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    for i, v in enumerate(values):
        ax.annotate(f"{v:.3g}", (i, v), ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def _render_history(rows, fields, out_path):
    epochs = [int(float(r["epoch"])) for r in rows]
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for field in fields:
        if field == "epoch":
            continue
        try:
            series = [float(r[field]) for r in rows]
        except ValueError:
            continue
        ax.plot(epochs, series, label=field)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
