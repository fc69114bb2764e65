import csv
import json

import pytest

from privprune.errors import ReportingError
from privprune.metrics import AttackReport
from privprune.report import aggregate_rows, emit_report


def record(defense, psnr, ssim, acc, att=0.2, seed=0, strength=0.0,
           mode="black-box", name="exp"):
    rep = AttackReport(psnr, ssim, 0.01, att, acc,
                       metadata=dict(defense=defense, defense_strength=strength,
                                     attack_mode=mode, seed=seed, name=name))
    return {"reports": {mode: rep.to_dict()}}


def test_single_baseline_zero_drops(tmp_path):
    rows = emit_report([record("none", 20.0, 0.5, 1.0)], tmp_path, plots=False)
    assert len(rows) == 1
    assert rows[0]["psnr_drop"] == 0.0
    assert rows[0]["prediction_accuracy_drop"] == 0.0


def test_drop_arithmetic_example(tmp_path):
    rows = emit_report([record("none", 20.0, 0.5, 1.0),
                        record("patrol", 17.6, 0.4, 0.97)], tmp_path, plots=False)
    by_defense = {r["defense"]: r for r in rows}
    assert by_defense["patrol"]["psnr_drop"] == pytest.approx(0.12, abs=1e-12)


def test_drops_match_hand_computed_oracle(tmp_path):
    import random
    rng = random.Random(7)
    records, expected = [], {}
    base_vals = (18.0, 0.55, 0.95)
    records.append(record("none", *base_vals))
    for i, defense in enumerate(["noise", "dropout", "patrol"]):
        vals = (rng.uniform(10, 20), rng.uniform(0.1, 0.9), rng.uniform(0.5, 1.0))
        records.append(record(defense, *vals, seed=0))
        expected[defense] = (
            (base_vals[0] - vals[0]) / base_vals[0],
            (base_vals[1] - vals[1]) / base_vals[1],
            (base_vals[2] - vals[2]) / base_vals[2],
        )
    rows = emit_report(records, tmp_path, plots=False)
    for row in rows:
        if row["defense"] == "none":
            continue
        want = expected[row["defense"]]
        assert row["psnr_drop"] == pytest.approx(want[0], abs=1e-9)
        assert row["ssim_drop"] == pytest.approx(want[1], abs=1e-9)
        assert row["prediction_accuracy_drop"] == pytest.approx(want[2], abs=1e-9)


def test_seed_averaging():
    rows = aggregate_rows([record("none", 20.0, 0.5, 1.0, seed=0),
                           record("none", 22.0, 0.7, 0.9, seed=1)])
    assert len(rows) == 1
    assert rows[0]["psnr"] == pytest.approx(21.0)
    assert rows[0]["seeds"] == 2


def test_missing_baseline_raises():
    with pytest.raises(ReportingError):
        aggregate_rows([record("noise", 15.0, 0.4, 0.8)])
    with pytest.raises(ReportingError):
        aggregate_rows([])


def test_emitted_files_parse(tmp_path):
    emit_report([record("none", 20.0, 0.5, 1.0),
                 record("noise", 16.0, 0.4, 0.9, strength=0.5)], tmp_path)
    with open(tmp_path / "comparison.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    data = json.loads((tmp_path / "comparison.json").read_text())
    assert len(data) == 2
    assert (tmp_path / "psnr_vs_accuracy.png").stat().st_size > 0
    assert (tmp_path / "ssim_vs_accuracy.png").stat().st_size > 0


def test_csv_bytes_deterministic(tmp_path):
    records = [record("none", 20.0, 0.5, 1.0), record("patrol", 17.0, 0.4, 0.96)]
    emit_report(records, tmp_path / "a", plots=False)
    emit_report(list(reversed(records)), tmp_path / "b", plots=False)
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == \
        (tmp_path / "b" / "comparison.csv").read_bytes()


def test_white_box_rows_use_own_baseline():
    records = [record("none", 20.0, 0.5, 1.0, mode="black-box"),
               record("none", 24.0, 0.6, 1.0, mode="white-box"),
               record("patrol", 18.0, 0.45, 0.95, mode="black-box"),
               record("patrol", 18.0, 0.45, 0.95, mode="white-box")]
    rows = aggregate_rows(records)
    by_key = {(r["defense"], r["attack_mode"]): r for r in rows}
    assert by_key[("patrol", "black-box")]["psnr_drop"] == pytest.approx(0.1)
    assert by_key[("patrol", "white-box")]["psnr_drop"] == pytest.approx(0.25)
