"""Summary text tables and plot-data files from per-episode CSVs."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

from .evaluate import EPISODE_COLUMNS, SERIES_COLUMNS, RolloutMetrics, read_csv, write_csv

TABLE_HEADER = ["Task", "Method", "Success %", "Direct %", "Avg Max Force (N)", "Avg Time (s)"]
# metrics where larger is better; the others are marked at their minimum
_HIGHER = {"success_rate": True, "direct_rate": True, "avg_max_force": False, "avg_time": False}


class SchemaError(ValueError):
    pass


def check_schema(rows: list[dict], columns, source: str = "") -> None:
    if not rows:
        return
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise SchemaError(f"missing column {missing[0]!r}{' in ' + source if source else ''}")


def group_metrics(rows: list[dict]) -> "OrderedDict[tuple[str, str, str], RolloutMetrics]":
    groups: OrderedDict = OrderedDict()
    for r in rows:
        groups.setdefault((r["task"], r["camera"], r["method"]), []).append(r)
    return OrderedDict((k, RolloutMetrics.from_rows(v)) for k, v in groups.items())


def best_marks(metrics: dict) -> dict[tuple, set[str]]:
    """Per (task, camera): which metric columns each method wins (ties all win)."""
    marks: dict[tuple, set[str]] = {k: set() for k in metrics}
    by_task: dict = {}
    for k in metrics:
        by_task.setdefault(k[:2], []).append(k)
    for keys in by_task.values():
        for col, higher in _HIGHER.items():
            vals = [getattr(metrics[k], col) for k in keys]
            target = max(vals) if higher else min(vals)
            for k, v in zip(keys, vals):
                if v == target:
                    marks[k].add(col)
    return marks


def format_table(rows: list[dict]) -> str:
    """Fixed-width table; the best value per task and column is wrapped in ``*``."""
    metrics = group_metrics(rows)
    marks = best_marks(metrics)
    lines = [TABLE_HEADER]
    for (task, camera, method), m in metrics.items():
        mk = marks[(task, camera, method)]

        def cell(col, text):
            return f"*{text}*" if col in mk else text

        label = task if camera == "Clean" else f"{task} [{camera}]"
        lines.append([
            label, method,
            cell("success_rate", f"{m.success_rate:.2f}"),
            cell("direct_rate", f"{m.direct_rate:.2f}"),
            cell("avg_max_force", f"{m.avg_max_force:.2f} ± {m.std_max_force:.2f}"),
            cell("avg_time", f"{m.avg_time:.2f} ± {m.std_time:.2f}"),
        ])
    widths = [max(len(r[i]) for r in lines) for i in range(len(TABLE_HEADER))]
    out = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines]
    out.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def recovered_force_series(rows: list[dict], series: list[dict]) -> list[dict]:
    """Force samples restricted to successful insertions that needed an adjustment."""
    keep = {(r["method"], r["task"], r["camera"], str(r["seed"])) for r in rows if int(r["success"]) and not int(r["direct"])}
    return [s for s in series if (s["method"], s["task"], s["camera"], str(s["seed"])) in keep]


def report(episode_csvs, out_dir, series_csvs=()) -> dict[str, Path]:
    """Writes ``table.txt``, ``force_series.csv`` (recovered insertions) and ``time_series.csv``."""
    rows = []
    for p in episode_csvs:
        part = read_csv(p)
        check_schema(part, EPISODE_COLUMNS, str(p))
        rows.extend(part)
    series = []
    for p in series_csvs:
        part = read_csv(p)
        check_schema(part, SERIES_COLUMNS, str(p))
        series.extend(part)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"table": out_dir / "table.txt"}
    paths["table"].write_text(format_table(rows))
    paths["force_series"] = write_csv(recovered_force_series(rows, series), out_dir / "force_series.csv", SERIES_COLUMNS)
    times = [{"method": r["method"], "task": r["task"], "camera": r["camera"], "seed": r["seed"], "time_s": r["time_s"]} for r in rows if int(r["success"])]
    paths["time_series"] = write_csv(times, out_dir / "time_series.csv", ["method", "task", "camera", "seed", "time_s"])
    summary = [{"task": k[0], "camera": k[1], "method": k[2], **m.as_row()} for k, m in group_metrics(rows).items()]
    paths["summary"] = write_csv(summary, out_dir / "summary.csv", ["task", "camera", "method", *RolloutMetrics(0, 0, 0, 0, 0, 0, 0).as_row().keys()])
    return paths

