"""CSV tables and SVG charts of metric versus realized privacy budget."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dataset import USER_TYPES  # noqa: E402
from .experiment import INF_MARKER, RunRecord, aggregate  # noqa: E402
from .metrics import ITEM_GROUPS, METRIC_NAMES  # noqa: E402

GROUPS = ("all", *USER_TYPES, *ITEM_GROUPS)
CSV_COLUMNS = ("dataset", "model", "regime", "budget", "realized_eps", "group", "mean", "std", "n")
REGIME_STYLE = {"dpsgd": ("tab:blue", "o"), "ldp": ("tab:orange", "s")}


def _key(metric: str, group: str) -> str:
    return metric if group == "all" else f"{group}.{metric}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_rows(aggregates: list[dict], metric: str) -> list[dict]:
    rows = []
    for agg in aggregates:
        for group in GROUPS:
            key = _key(metric, group)
            if f"{key}.mean" not in agg:
                continue
            rows.append({
                "dataset": agg["dataset"],
                "model": agg["model"],
                "regime": agg["regime"],
                "budget": agg["budget"],
                "realized_eps": agg["realized_epsilon"],
                "group": group,
                "mean": agg[f"{key}.mean"],
                "std": agg[f"{key}.std"],
                "n": agg[f"{key}.n"],
            })
    return rows


def write_metric_csv(rows: list[dict], path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    tmp.replace(path)


def draw_metric(ax, aggregates: list[dict], metric: str, dataset: str, model: str) -> int:
    """Draw mean and std band per regime onto ``ax``; returns the number of budget points."""
    key = f"{metric}.mean"
    mine = [a for a in aggregates if a["dataset"] == dataset and a["model"] == model and a.get(key) is not None]
    points = 0
    for regime, (color, marker) in REGIME_STYLE.items():
        pts = sorted(
            (a for a in mine if a["regime"] == regime and a["realized_epsilon"] != INF_MARKER),
            key=lambda a: a["realized_epsilon"],
        )
        if not pts:
            continue
        x = [a["realized_epsilon"] for a in pts]
        y = [a[key] for a in pts]
        sd = [a[f"{metric}.std"] or 0.0 for a in pts]
        (line,) = ax.plot(x, y, color=color, marker=marker, label=regime.upper())
        line.set_gid(f"series-{regime}")
        band = ax.fill_between(x, [m - s for m, s in zip(y, sd)], [m + s for m, s in zip(y, sd)], color=color, alpha=0.2)
        band.set_gid(f"band-{regime}")
        points += len(pts)
    for a in mine:
        if a["regime"] == "none":
            ref = ax.axhline(a[key], color="k", linestyle="--", linewidth=1, label="non-private")
            ref.set_gid("baseline")
            break
    ax.set_xscale("log")
    ax.set_xlabel("realized epsilon")
    ax.set_ylabel(metric)
    ax.set_title(f"{model} on {dataset}")
    ax.legend(fontsize=8)
    return points


def plot_metric(aggregates: list[dict], metric: str, dataset: str, model: str, path: Path) -> int:
    """One SVG chart; returns the number of plotted budget points."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    points = draw_metric(ax, aggregates, metric, dataset, model)
    fig.tight_layout()
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    tmp.replace(path)
    return points


def report(records: list[RunRecord], output_dir: str | Path) -> list[Path]:
    """Write one CSV per metric and one SVG per (metric, dataset, model)."""
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise ValueError("report needs at least one successful run record")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    aggregates = aggregate(records)
    written = []
    for metric in METRIC_NAMES:
        path = out / f"{metric}.csv"
        write_metric_csv(metric_rows(aggregates, metric), path)
        written.append(path)
        for dataset, model in sorted({(a["dataset"], a["model"]) for a in aggregates if a["n"]}):
            svg = out / f"{metric}_{dataset}_{model}.svg"
            plot_metric(aggregates, metric, dataset, model, svg)
            written.append(svg)
    return written


def read_metric_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for col in ("mean", "std"):
            row[col] = float(row[col]) if row[col] else None
        row["n"] = int(row["n"])
        eps = row["realized_eps"]
        row["realized_eps"] = math.inf if eps == INF_MARKER else float(eps)
    return rows
