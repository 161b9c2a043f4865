import json

import pandas as pd
import pytest

from motorwaympc.managers import ScenarioManager
from motorwaympc.metrics import (
    SCHEMA,
    MetricsAccumulator,
    MetricsReport,
    metrics_from_trace,
    recompute,
)
from motorwaympc.models.common import PlanDiagnostics
from motorwaympc.models.config import ScenarioConfig


def row(t, vid, x, lane=0, v_x=25.0, v_d=25.0, cls="manual", plan_id=None, plan_mode=""):
    return {
        "t": t,
        "id": vid,
        "class": cls,
        "x": x,
        "y": 1.5 + 3.0 * lane,
        "lane": lane,
        "v_x": v_x,
        "v_y": 0.0,
        "a_x": 0.0,
        "j_x": None,
        "a_y": None,
        "plan_id": plan_id,
        "plan_mode": plan_mode,
        "v_d": v_d,
    }


def test_delay_per_km():
    acc = MetricsAccumulator(section_length=1000.0)
    acc.add_row(row(0.0, 0, 0.0, v_x=20.0))
    acc.add_row(row(50.0, 0, 1000.0, v_x=20.0))
    report = acc.finalize()
    manual = report.classes["manual"]
    # 1 km at v_d = 25 m/s takes 40 s, the trip took 50 s
    assert manual.mean_delay_s_per_km == pytest.approx(10.0)
    assert manual.mean_speed_kmh == pytest.approx(72.0)
    assert manual.mean_speed_deviation_ms == pytest.approx(5.0)
    assert report.completed_vehicles == 1


def test_exit_time_is_interpolated():
    acc = MetricsAccumulator(section_length=1000.0)
    acc.add_row(row(0.0, 0, 0.0))
    acc.add_row(row(39.0, 0, 980.0))
    acc.add_row(row(40.0, 0, 1020.0))
    assert acc.trips[0].travel_time() == pytest.approx(39.5)


def test_lane_changes_are_counted():
    acc = MetricsAccumulator(section_length=100.0)
    for t, (x, lane) in enumerate([(0.0, 0), (25.0, 1), (50.0, 1), (75.0, 0), (100.0, 0)]):
        acc.add_row(row(float(t), 3, x, lane=lane))
    assert acc.finalize().classes["all"].mean_lane_changes == 2.0


def test_incomplete_trips_are_ignored():
    acc = MetricsAccumulator(section_length=1000.0)
    acc.add_row(row(0.0, 0, 0.0))
    acc.add_row(row(1.0, 0, 25.0))
    report = acc.finalize()
    assert report.empty
    assert report.completed_vehicles == 0
    assert all(m.vehicles == 0 and m.mean_delay_s_per_km is None for m in report.classes.values())
    assert all(cells[2] == "N/A" for cells in report.table_rows())


def test_plan_counts_by_mode():
    acc = MetricsAccumulator(section_length=100.0)
    av = "automated_connected"
    acc.add_row(row(0.0, 1, 0.0, cls=av, plan_id=0, plan_mode="normal"))
    acc.add_row(row(1.0, 1, 40.0, cls=av, plan_id=0, plan_mode="normal"))
    acc.add_row(row(2.0, 1, 80.0, cls=av, plan_id=4, plan_mode="override"))
    acc.add_row(row(3.0, 1, 110.0, cls=av, plan_id=9, plan_mode="fallback"))
    acc.add_row(row(0.0, 2, 0.0))
    acc.add_row(row(4.0, 2, 100.0))
    report = acc.finalize()
    assert report.safety_overrides == 1
    assert report.fallback_plans == 1
    assert report.classes["av"].mean_plans == 3.0
    assert report.classes["manual"].mean_plans is None
    assert report.classes["all"].vehicles == 2


def test_timing_stats():
    acc = MetricsAccumulator(section_length=100.0)

    class FakePlan:
        def __init__(self, timings):
            self.diagnostics = PlanDiagnostics(timings_us=timings)

    acc.add_plan(FakePlan({"bnb": 100, "fda": 300, "total": 400}))
    acc.add_plan(FakePlan({"bnb": 200, "fda": 500, "total": 700}))
    stats = acc.timing_stats()
    assert stats["fda"] == {"mean": 400.0, "max": 500.0, "plans": 2}
    assert "dp" not in stats, "Stages that never ran are left out."


def test_report_json_round_trip(tmp_path):
    acc = MetricsAccumulator(section_length=1000.0)
    acc.add_row(row(0.0, 0, 0.0))
    acc.add_row(row(50.0, 0, 1000.0))
    report = acc.finalize()
    path = report.to_json(tmp_path / "metrics.json")
    data = json.loads(path.read_text())
    assert data["schema"] == SCHEMA
    assert "timings_us" not in data, "CPU times must stay out of the reproducible file."
    assert MetricsReport.from_json(path).as_dict() == report.as_dict()


def test_from_json_rejects_other_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"schema": "something-else"}))
    with pytest.raises(ValueError, match="not a metrics file"):
        MetricsReport.from_json(path)


def test_metrics_from_trace_counts_violations():
    trace = pd.DataFrame([row(0.0, 0, 0.0), row(50.0, 0, 1000.0)])
    audit = pd.DataFrame(
        {
            "t": [1.0, 2.0],
            "kind": ["overlap", "intervention"],
            "violation": [True, False],
            "vehicle_ids": ["0 1", "0"],
            "detail": ["", "held behind 1"],
        }
    )
    report = metrics_from_trace(trace, 1000.0, audit)
    assert report.audit_violations == 1
    assert report.completed_vehicles == 1


def test_recompute_needs_trace(tmp_path):
    with pytest.raises(FileNotFoundError, match="no-trace"):
        recompute(tmp_path, 1000.0)


def test_recompute_matches_run(tmp_path):
    config = ScenarioConfig().with_overrides(
        {
            "duration": 25,
            "spawn.inflow": 3000,
            "spawn.penetration": 0.5,
            "road.section_length": 300,
            "output_dir": str(tmp_path),
        }
    )
    result = ScenarioManager(config).run(run_dir=tmp_path / "run")
    assert result.report.completed_vehicles > 0, "Vehicles should finish a 300 m section."
    stored = MetricsReport.from_json(result.run_dir / "metrics.json")
    recomputed = recompute(result.run_dir, 300.0)
    assert recomputed.as_dict() == stored.as_dict(), "Trace and live metrics must agree."
    for name in ("trace.csv", "audit.csv", "plans.jsonl", "timings.json", "effective_config.yaml"):
        assert (result.run_dir / name).exists(), f"{name} missing from the run directory"
