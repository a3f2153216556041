"""Static SVG figures for evaluation reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvaluationReport  # noqa: E402

# fixed ids and no timestamp keep reruns byte-identical
matplotlib.rcParams["svg.hashsalt"] = "robust-combat"


def grouped_bars(groups: Sequence[str], series: Mapping[str, Sequence[float]], path,
                 title: str = "", ylabel: str = "", xlabel: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(groups) * max(1, len(series)) / 3), 4))
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(series))
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x, groups)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.set_xlabel(xlabel)
    ax.legend(fontsize="small", ncol=min(4, len(series)))
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _ratio_labels(ratios) -> list[str]:
    return [f"{round(100 * r)}%" for r in ratios]


def report_figures(report: EvaluationReport, out_dir) -> list[Path]:
    """Aggregate and per-metric grouped-bar charts for one report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report.kind == "bootstrap":
        table = report.bhattacharyya_table()
        if table:
            metrics = list(next(iter(table.values())).keys())
            written.append(grouped_bars(
                metrics, {m: [table[m][k] for k in metrics] for m in table},
                out_dir / "bootstrap_bhattacharyya.svg",
                title="HC alignment with the reference", ylabel="Bhattacharyya distance",
                xlabel="metric"))
        return written

    methods = report.methods()
    sizes = report.sizes()
    for n in sizes:
        tag = report.kind if len(sizes) == 1 else f"{report.kind}_n{n}"
        ratios = sorted({r.ratio for r in report.select(n_subjects=n)})
        groups = _ratio_labels(ratios)
        mean = {m: [report.mean_std_mae(m, r, n) for r in ratios] for m in methods}
        worst = {m: [report.worst_std_mae(m, r, n) for r in ratios] for m in methods}
        written.append(grouped_bars(groups, mean, out_dir / f"{tag}_aggregate.svg",
                                    title=f"Mean STD_MAE ({n} subjects per site)",
                                    ylabel="STD_MAE", xlabel="disease ratio"))
        written.append(grouped_bars(groups, worst, out_dir / f"{tag}_worst10.svg",
                                    title="Mean of the worst 10% features",
                                    ylabel="STD_MAE", xlabel="disease ratio"))
        rows = report.select(n_subjects=n)
        metrics = list(rows[0].per_metric) if rows else []
        for metric in metrics:
            series = {}
            for m in methods:
                vals = []
                for r in ratios:
                    sel = report.select(m, r, n)
                    vals.append(float(np.mean([s.per_metric[metric] for s in sel]))
                                if sel else np.nan)
                series[m] = vals
            written.append(grouped_bars(groups, series, out_dir / f"{tag}_{metric}.svg",
                                        title=f"STD_MAE, {metric}", ylabel="STD_MAE",
                                        xlabel="disease ratio"))
    return written
