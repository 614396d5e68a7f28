"""
SNR-grouped CSV tables and SVG charts.

Every number on a chart comes out of a CSV written here first. SVGs are
written with a fixed hash salt and no date so identical inputs give
identical files.
"""
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
OVERALL = "all"
METRIC_LOG_COLUMNS = ["step", "split", "metric", "value", "seed"]
REPORT_COLUMNS = ["snr_db", "condition", "metric", "mean", "count", "seed"]
ROW_KEY = ["id", "condition", "seed"]

plt.rcParams["svg.hashsalt"] = "cleancoder"
plt.rcParams["svg.fonttype"] = "none"
sns.set_theme(style="whitegrid")


class ReportSchemaError(ValueError):
    pass


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def snr_label(snr_db: float) -> str:
    return f"{float(snr_db):g}"


def snr_report(rows: pd.DataFrame, metric: str, seed: int | None = None) -> pd.DataFrame:
    """
    Mean and count of `metric` per (snr_db, condition, seed), plus one overall
    row per (condition, seed) with snr_db == "all". Rows carrying an error are
    skipped. Merged dumps bring their own `seed` column; otherwise `seed`
    labels the whole dump.
    """
    if metric not in rows.columns:
        raise ReportSchemaError(f"per-row results have no '{metric}' column")
    if "seed" not in rows.columns:
        if seed is None:
            raise ReportSchemaError("per-row results carry no seed column and no seed was given")
        rows = rows.assign(seed=seed)
    if "error" in rows.columns:
        rows = rows[rows["error"].isna() | (rows["error"] == "")]
    if rows.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    by_snr = (
        rows.groupby(["snr_db", "condition", "seed"], sort=True)[metric]
        .agg(["mean", "count"])
        .reset_index()
    )
    by_snr["snr_db"] = by_snr["snr_db"].map(snr_label)
    overall = rows.groupby(["condition", "seed"], sort=True)[metric].agg(["mean", "count"]).reset_index()
    overall.insert(0, "snr_db", OVERALL)
    report = pd.concat([by_snr, overall], ignore_index=True)
    report["metric"] = metric
    return report[REPORT_COLUMNS]


def _save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_snr_bars(report: pd.DataFrame, path: str | Path, title: str = "") -> Path:
    """Grouped bars: one group per SNR, one bar per condition; several seeds give mean and sd."""
    grid = report[report["snr_db"] != OVERALL].copy()
    grid["snr_order"] = grid["snr_db"].astype(float)
    grid = grid.sort_values(["snr_order", "condition"])
    metric = report["metric"].iloc[0] if not report.empty else "value"

    fig, ax = plt.subplots(figsize=(7, 4))
    sns.barplot(
        data=grid,
        x="snr_db",
        y="mean",
        hue="condition",
        hue_order=sorted(grid["condition"].unique()),
        ax=ax,
        errorbar="sd" if grid["seed"].nunique() > 1 else None,
    )
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(metric.upper())
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save_svg(fig, path)


def read_row_dumps(paths: Sequence[str | Path]) -> pd.DataFrame:
    """Concatenate per-row result CSVs of separate runs (one per seed) into one frame."""
    frames = []
    for path in paths:
        path = Path(path)
        try:
            frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
        except FileNotFoundError:
            raise ReportSchemaError(f"row dump not found: {path}")
        missing = [c for c in ["snr_db", *ROW_KEY] if c not in frame.columns]
        if missing:
            raise ReportSchemaError(f"{path}: missing columns {missing}")
        if frames and list(frame.columns) != list(frames[0].columns):
            raise ReportSchemaError(
                f"{path}: columns {list(frame.columns)} do not match {list(frames[0].columns)}"
            )
        frames.append(frame)
    if not frames:
        raise ReportSchemaError("no row dumps to merge")
    merged = pd.concat(frames, ignore_index=True)
    duplicated = merged.duplicated(ROW_KEY)
    if duplicated.any():
        first = merged[duplicated].iloc[0]
        raise ReportSchemaError(
            f"row {first['id']} / {first['condition']} / seed {first['seed']} appears in more than one dump"
        )
    return merged


def read_metric_logs(paths: Sequence[str | Path]) -> list[tuple[str, pd.DataFrame]]:
    logs = []
    for path in paths:
        path = Path(path)
        try:
            frame = pd.read_csv(path)
        except FileNotFoundError:
            raise ReportSchemaError(f"metric log not found: {path}")
        if list(frame.columns) != METRIC_LOG_COLUMNS:
            raise ReportSchemaError(
                f"{path}: columns {list(frame.columns)} do not match {METRIC_LOG_COLUMNS}"
            )
        logs.append((path.stem, frame))
    return logs


def plot_curves(
    logs: Sequence[tuple[str, pd.DataFrame]],
    path: str | Path,
    metrics: Sequence[str] = ("ctc", "wer"),
) -> Path:
    """One panel per validation metric, one line per log in argument order."""
    if not logs:
        raise ReportSchemaError("no metric logs to plot")
    present = [m for m in metrics if any(((f["split"] == "val") & (f["metric"] == m)).any() for _, f in logs)]
    if not present:
        raise ReportSchemaError(f"none of the logs has validation metrics {list(metrics)}")

    fig, axes = plt.subplots(1, len(present), figsize=(6 * len(present), 4), squeeze=False)
    palette = sns.color_palette(n_colors=len(logs))
    for ax, metric in zip(axes[0], present):
        for (label, frame), color in zip(logs, palette):
            series = frame[(frame["split"] == "val") & (frame["metric"] == metric)].sort_values("step")
            if series.empty:
                continue
            ax.plot(series["step"], series["value"], label=label, color=color, marker="o", markersize=3)
        ax.set_xlabel("training step")
        ax.set_ylabel(f"val_{metric}")
        ax.legend()
    fig.tight_layout()
    return _save_svg(fig, path)
