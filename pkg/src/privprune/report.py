"""Comparison tables and privacy/utility plots across completed runs.

Rows are grouped by (experiment name, defense, strength, attack mode) and
averaged over seeds; drop columns are relative to the `none`-defense baseline
of the same attack mode, per the (baseline - defended) / baseline convention.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import ReportingError
from .metrics import AttackReport

TABLE_FIELDS = ("name", "defense", "strength", "attack_mode", "seeds",
                "psnr", "ssim", "mse", "attack_accuracy", "prediction_accuracy",
                "psnr_drop", "ssim_drop", "attack_accuracy_drop",
                "prediction_accuracy_drop")


def _collect_reports(records) -> list[dict]:
    rows = []
    for record in records:
        reports = record.reports if hasattr(record, "reports") else record["reports"]
        for mode, rep in reports.items():
            rep = dict(rep)
            meta = rep.get("metadata", {})
            rows.append(dict(
                name=meta.get("name", ""),
                defense=meta.get("defense", "none"),
                strength=meta.get("defense_strength", 0.0),
                attack_mode=mode,
                seed=meta.get("seed"),
                psnr=rep["psnr_mean"], ssim=rep["ssim_mean"], mse=rep["mse_mean"],
                attack_accuracy=rep["attack_accuracy"],
                prediction_accuracy=rep["prediction_accuracy"],
            ))
    return rows


def _mean(vals):
    return sum(vals) / len(vals)


def aggregate_rows(records) -> list[dict]:
    """Per-(name, defense, strength, mode) means over seeds, with drops."""
    raw = _collect_reports(records)
    if not raw:
        raise ReportingError("no completed reports to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for row in raw:
        key = (row["name"], row["defense"], row["strength"], row["attack_mode"])
        groups.setdefault(key, []).append(row)

    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(p) for p in k)):
        members = groups[key]
        rows.append(dict(
            name=key[0], defense=key[1], strength=key[2], attack_mode=key[3],
            seeds=len(members),
            psnr=_mean([m["psnr"] for m in members]),
            ssim=_mean([m["ssim"] for m in members]),
            mse=_mean([m["mse"] for m in members]),
            attack_accuracy=_mean([m["attack_accuracy"] for m in members]),
            prediction_accuracy=_mean([m["prediction_accuracy"] for m in members]),
        ))

    baselines = {row["attack_mode"]: row for row in rows if row["defense"] == "none"}
    if not baselines:
        raise ReportingError(
            "drop columns require a defense=none baseline record")
    for row in rows:
        base = baselines.get(row["attack_mode"])
        if base is None:
            base = next(iter(baselines.values()))
        for metric, col in (("psnr", "psnr_drop"), ("ssim", "ssim_drop"),
                            ("attack_accuracy", "attack_accuracy_drop"),
                            ("prediction_accuracy", "prediction_accuracy_drop")):
            b = base[metric]
            row[col] = None if b == 0 else (b - row[metric]) / b
    return rows


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def emit_report(records, out_dir, plots: bool = True) -> list[dict]:
    """Write comparison.csv / comparison.json (+ scatter plots); returns rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate_rows(records)

    with open(out / "comparison.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TABLE_FIELDS)
        for row in rows:
            writer.writerow([_format_cell(row.get(k)) for k in TABLE_FIELDS])
    (out / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True))

    if plots:
        _scatter(rows, out / "psnr_vs_accuracy.png", "psnr", "PSNR (dB)")
        _scatter(rows, out / "ssim_vs_accuracy.png", "ssim", "SSIM")
    return rows


def _scatter(rows, path, metric, xlabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    by_defense: dict[str, list] = {}
    for row in rows:
        by_defense.setdefault(row["defense"], []).append(row)
    for defense, members in sorted(by_defense.items()):
        xs = [m[metric] for m in members]
        ys = [m["prediction_accuracy"] for m in members]
        ax.scatter(xs, ys, label=defense)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("prediction accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def load_records(run_dirs) -> list[dict]:
    """Load record.json files (for the CLI report command)."""
    records = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "record.json"
        if not path.exists():
            raise ReportingError(f"no record.json under {run_dir}")
        records.append(json.loads(path.read_text()))
    return records
