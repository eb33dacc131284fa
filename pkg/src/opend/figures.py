"""Figure rendering for benchmark reports (written alongside the CSV/text output)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import bench, executor  # noqa: E402

KIND_COLORS = {"drawer": "#4878cf", "door": "#d65f5f", "overall": "#6acc65"}


def _success_rate_figure(table: "bench.MetricsTable", path: str) -> None:
    groups = sorted({(k[0], k[1], k[2]) for k in table.rows})
    labels = [f"{h}\n{d} {s}" for h, d, s in groups]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(groups)), 3.6))
    width = 0.27
    for i, kind in enumerate(bench.TABLE_KINDS):
        xs, ys = [], []
        for gi, g in enumerate(groups):
            key = (*g, kind)
            if key in table.rows:
                xs.append(gi + (i - 1) * width)
                ys.append(100.0 * table.rows[key].success_rate)
        ax.bar(xs, ys, width=width, label=kind, color=KIND_COLORS[kind])
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("success rate [%]")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _failure_figure(table: "bench.MetricsTable", path: str) -> None:
    groups = sorted({(k[0], k[1], k[2]) for k in table.rows})
    labels = [f"{h}\n{d} {s}" for h, d, s in groups]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(groups)), 3.6))
    bottoms = [0.0] * len(groups)
    for failure in bench.FAILURE_COLUMNS:
        heights = []
        for g in groups:
            row = table.rows.get((*g, "overall"))
            heights.append(row.failures.get(failure, 0) if row else 0)
        if any(heights):
            ax.bar(range(len(groups)), heights, bottom=bottoms, label=failure)
            bottoms = [b + h for b, h in zip(bottoms, heights)]
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("failed episodes")
    if ax.has_data():
        ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _ratio_figure(table: "bench.MetricsTable", path: str) -> None:
    keys = [k for k in table.sorted_keys() if k[3] != "overall"]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(keys)), 3.2))
    xs = range(len(keys))
    ax.bar(xs, [table.rows[k].mean_open_ratio for k in keys],
           color=[KIND_COLORS[k[3]] for k in keys])
    ax.axhline(executor.SUCCESS_RATIO, color="k", linestyle="--", linewidth=0.8,
               label="success threshold")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{k[0]}:{k[3]}\n{k[2]}" for k in keys], fontsize=7)
    ax.set_ylabel("mean open ratio")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metrics_figures(table: "bench.MetricsTable", out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fn in (("success_rates.png", _success_rate_figure),
                     ("failures.png", _failure_figure),
                     ("open_ratios.png", _ratio_figure)):
        path = os.path.join(out_dir, name)
        fn(table, path)
        paths.append(path)
    return paths
