"""Turn a metrics file into tables (CSV) and curves (SVG)."""

from __future__ import annotations

import csv
from pathlib import Path

from .harness import achievement_names_from_columns, read_metrics


def final_rates(rows: list[dict], names) -> list[dict]:
    """One record per achievement with the last defined all-episode and
    trailing-window success rates."""
    out = []
    for name in names:
        rate = next((r[f"rate:{name}"] for r in reversed(rows) if r[f"rate:{name}"] is not None), None)
        trail = next((r[f"trailing_rate:{name}"] for r in reversed(rows) if r[f"trailing_rate:{name}"] is not None), None)
        out.append({"achievement": name, "success_rate": rate, "trailing_success_rate": trail})
    return out


def _write_csv(path: Path, columns, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow(["" if rec[c] is None else rec[c] for c in columns])


def plot_metrics(metrics_path, out_dir) -> dict[str, Path]:
    """Writes success_rates.csv, curves.csv, curves.svg and success_rates.svg."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    columns, rows = read_metrics(metrics_path)
    names = achievement_names_from_columns(columns)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f for k, f in [("rates", "success_rates.csv"), ("curves", "curves.csv"),
                                     ("curves_svg", "curves.svg"), ("rates_svg", "success_rates.svg")]}

    table = final_rates(rows, names)
    _write_csv(paths["rates"], ["achievement", "success_rate", "trailing_success_rate"], table)
    curve_cols = ["env_steps", "score", "trailing_score", "mean_reward", "trailing_reward"]
    _write_csv(paths["curves"], curve_cols, [{c: r[c] for c in curve_cols} for r in rows])

    svg_meta = {"Date": None}  # keeps the files reproducible
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, (key, label) in zip(axes, [("score", "Score"), ("reward", "Reward")]):
        cols = ("score", "trailing_score") if key == "score" else ("mean_reward", "trailing_reward")
        for c, style in zip(cols, ("-", "--")):
            pts = [(r["env_steps"], r[c]) for r in rows if r[c] is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, style, label=c.replace("_", " "))
        ax.set_xlabel("environment steps")
        ax.set_ylabel(label)
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(paths["curves_svg"], format="svg", metadata=svg_meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.5))
    vals = [0.0 if r["success_rate"] is None else r["success_rate"] for r in table]
    ax.bar(range(len(names)), vals)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(paths["rates_svg"], format="svg", metadata=svg_meta)
    plt.close(fig)
    return paths
