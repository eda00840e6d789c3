"""Report emission tests: run log, aggregate table, figures, determinism.

The SVG assertions lean on stable element ids (cell-i-j, mismatch-i-j)
rather than rendered text, because matplotlib outlines text as paths.
"""

import csv
import json

import pytest

from dsm_forge.dsm import load_ground_truth
from dsm_forge.gateway import BackendConfig, MockBackend
from dsm_forge.metrics import CellMetrics
from dsm_forge.parsing import render_components, render_grid
from dsm_forge.reporting import (
    CSV_HEADER,
    ReportingError,
    best_record,
    emit_reports,
    write_aggregate_csv,
    write_heatmap_svg,
    write_runs_jsonl,
)
from dsm_forge.runner import (
    AggregateReport,
    ExperimentConfig,
    RunRecord,
    STATUSES,
    run_experiment,
)

MOCK = BackendConfig(base_url="mock:", model_id="mock")

SCREWDRIVER = load_ground_truth("power_screwdriver")
CUBESAT = load_ground_truth("cubesat")


def flawed_screwdriver_grid():
    cells = [list(row) for row in SCREWDRIVER.dsm.cells]
    cells[0][1] = 0  # missed relation
    cells[3][4] = 2  # hedged relation
    return cells


def scenario_i_report() -> AggregateReport:
    cfg = ExperimentConfig(
        concept_name="power screwdriver",
        application_domain="consumer power tools",
        relationship_type=SCREWDRIVER.relationship_type,
        ground_truth="power_screwdriver",
        predicted_components=tuple(SCREWDRIVER.dsm.labels),
        backend=MOCK,
    )
    grid = render_grid(flawed_screwdriver_grid())
    return run_experiment(cfg, MockBackend(lambda m: grid))


def scenario_ii_report(repetitions: int = 1) -> AggregateReport:
    identified = ["Power", "Attitude Control", "Communications", "Payload",
                  "Solar Sail", "Thruster Module"]
    grid = [
        [1, 1, 0, 0, 1, 0],
        [1, 1, 0, 0, 0, 0],
        [0, 0, 1, 0, 0, 1],
        [0, 0, 0, 1, 0, 0],
        [1, 0, 0, 0, 1, 0],
        [0, 1, 0, 0, 0, 1],
    ]

    def respond(messages):
        text = messages[0][1]
        if "You are a validator" in text:
            return "Valid."
        if "The number of components must be" in text:
            return render_components(identified)
        return render_grid(grid)

    cfg = ExperimentConfig(
        concept_name="CubeSat",
        application_domain="small satellite missions",
        relationship_type=CUBESAT.relationship_type,
        ground_truth="cubesat",
        repetitions=repetitions,
        backend=MOCK,
    )
    return run_experiment(cfg, MockBackend(respond))


def error_report() -> AggregateReport:
    cfg = ExperimentConfig(
        concept_name="power screwdriver",
        application_domain="consumer power tools",
        relationship_type=SCREWDRIVER.relationship_type,
        ground_truth="power_screwdriver",
        method="RAG",
        predicted_components=tuple(SCREWDRIVER.dsm.labels),
        backend=MOCK,
        corpus_dir="does-not-exist",
    )
    return AggregateReport(
        config=cfg,
        scenario="i",
        records=(),
        status_counts={status: 0 for status in STATUSES},
        aggregates={},
        aligned_aggregates={},
        error="ConfigError: no reference documents in does-not-exist",
    )


class TestEmitReports:
    def test_single_report_writes_four_files(self, tmp_path):
        written = emit_reports([scenario_i_report()], tmp_path)
        names = sorted(p.name for p in written)
        assert names == [
            "aggregate.csv",
            "bars.svg",
            "heatmap_00_llm-r1-r2-r3-mock.svg",
            "runs.jsonl",
        ]
        for path in written:
            assert path.stat().st_size > 0

    def test_one_heatmap_per_report(self, tmp_path):
        written = emit_reports(
            [scenario_i_report(), scenario_ii_report()], tmp_path
        )
        heatmaps = [p for p in written if p.name.startswith("heatmap_")]
        assert len(heatmaps) == 2

    def test_failed_report_skips_heatmap(self, tmp_path):
        written = emit_reports([error_report()], tmp_path)
        assert not [p for p in written if p.name.startswith("heatmap_")]

    def test_requires_at_least_one_report(self, tmp_path):
        with pytest.raises(ReportingError):
            emit_reports([], tmp_path)

    def test_creates_output_directory(self, tmp_path):
        target = tmp_path / "nested" / "runs"
        emit_reports([scenario_i_report()], target)
        assert (target / "aggregate.csv").exists()


class TestAggregateCsv:
    def test_header_and_value_round_trip(self, tmp_path):
        report = scenario_i_report()
        path = write_aggregate_csv([report], tmp_path / "agg.csv")
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == CSV_HEADER
        by_metric = {row[3]: row for row in rows[1:]}
        assert set(by_metric) == {
            "accuracy", "precision", "recall", "f1",
            "edit_distance", "spectral_distance",
        }
        for name, agg in report.aggregates.items():
            row = by_metric[name]
            assert row[:3] == ["LLM", "R1+R2+R3", "mock"]
            assert float(row[4]) == pytest.approx(agg.mean, abs=1e-12)
            assert float(row[5]) == pytest.approx(agg.std, abs=1e-12)
            assert row[6:] == ["5", "0", "0", "0"]

    def test_aligned_metrics_get_prefixed_rows(self, tmp_path):
        path = write_aggregate_csv([scenario_ii_report()], tmp_path / "agg.csv")
        with path.open(newline="") as fh:
            metrics = {row[3] for row in list(csv.reader(fh))[1:]}
        assert "aligned_accuracy" in metrics and "accuracy" in metrics
        assert "aligned_spectral_distance" in metrics

    def test_byte_identical_across_independent_runs(self, tmp_path):
        a = write_aggregate_csv([scenario_i_report()], tmp_path / "a.csv")
        b = write_aggregate_csv([scenario_i_report()], tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()

    def test_rows_sorted_across_reports(self, tmp_path):
        path = write_aggregate_csv(
            [scenario_ii_report(), scenario_i_report()], tmp_path / "agg.csv"
        )
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert rows == sorted(rows)

    def test_error_row_for_failed_config(self, tmp_path):
        path = write_aggregate_csv([error_report()], tmp_path / "agg.csv")
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 2
        assert rows[1][3] == "error"
        assert rows[1][4] == "" and rows[1][5] == ""
        assert rows[1][6:] == ["0", "0", "0", "0"]


class TestRunsJsonl:
    def test_one_line_per_repetition(self, tmp_path):
        report = scenario_i_report()
        path = write_runs_jsonl([report], tmp_path / "runs.jsonl")
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == 5
        assert [l["repetition"] for l in lines] == [0, 1, 2, 3, 4]
        assert all(l["status"] == "ok" for l in lines)
        assert lines[0]["cell_metrics"]["recall"] == report.records[0].cell.recall
        assert lines[0]["confusion"]["excluded"] == 1
        assert lines[0]["raw_dimension"] == 7
        # the full config rides along so the log is self-describing
        assert lines[0]["config"]["ground_truth"] == "power_screwdriver"

    def test_alignment_fields_present_for_scenario_ii(self, tmp_path):
        path = write_runs_jsonl([scenario_ii_report()], tmp_path / "runs.jsonl")
        line = json.loads(path.read_text().splitlines()[0])
        assert line["aligned_dimension"] == 4
        assert line["unmatched_pred_labels"] == ["Solar Sail", "Thruster Module"]
        assert line["aligned_cell_metrics"]["recall"] == 1.0

    def test_config_failure_logged_as_single_line(self, tmp_path):
        path = write_runs_jsonl([error_report()], tmp_path / "runs.jsonl")
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == 1
        assert lines[0]["status"] == "config_failed"
        assert "corpus" in lines[0]["error"] or "reference" in lines[0]["error"]


class TestBestRecord:
    @staticmethod
    def record(rep, status="ok", accuracy=1.0, f1=1.0):
        cell = None
        if status == "ok":
            cell = CellMetrics(accuracy=accuracy, precision=1.0, recall=1.0, f1=f1)
        return RunRecord(repetition=rep, status=status, cell=cell)

    @staticmethod
    def wrap(records):
        report = scenario_i_report()
        return AggregateReport(
            config=report.config,
            scenario="i",
            records=tuple(records),
            status_counts={},
            aggregates={},
            aligned_aggregates={},
        )

    def test_highest_accuracy_wins(self):
        report = self.wrap([self.record(0, accuracy=0.8),
                            self.record(1, accuracy=0.95)])
        assert best_record(report).repetition == 1

    def test_f1_breaks_accuracy_ties(self):
        report = self.wrap([self.record(0, accuracy=0.9, f1=0.5),
                            self.record(1, accuracy=0.9, f1=0.9)])
        assert best_record(report).repetition == 1

    def test_earlier_repetition_breaks_full_ties(self):
        report = self.wrap([self.record(0), self.record(1)])
        assert best_record(report).repetition == 0

    def test_failed_runs_never_selected(self):
        report = self.wrap([self.record(0, status="parse_failed"),
                            self.record(1, accuracy=0.2)])
        assert best_record(report).repetition == 1

    def test_none_when_nothing_completed(self):
        report = self.wrap([self.record(0, status="parse_failed")])
        assert best_record(report) is None

    def test_none_accuracy_ranks_last(self):
        undefined = RunRecord(
            repetition=0, status="ok",
            cell=CellMetrics(accuracy=None, precision=None, recall=None, f1=None),
        )
        report = self.wrap([undefined, self.record(1, accuracy=0.1, f1=0.1)])
        assert best_record(report).repetition == 1


class TestHeatmap:
    def test_every_cell_gets_an_id(self, tmp_path):
        path = write_heatmap_svg(scenario_i_report(), tmp_path / "h.svg")
        svg = path.read_text()
        assert svg.count('id="cell-') == 49

    def test_mismatched_cells_are_outlined(self, tmp_path):
        # the flawed grid disagrees with the truth in exactly two cells
        path = write_heatmap_svg(scenario_i_report(), tmp_path / "h.svg")
        svg = path.read_text()
        assert svg.count('id="mismatch-') == 2
        assert 'id="mismatch-0-1"' in svg
        assert 'id="mismatch-3-4"' in svg

    def test_aligned_pair_preferred_for_scenario_ii(self, tmp_path):
        path = write_heatmap_svg(scenario_ii_report(), tmp_path / "h.svg")
        svg = path.read_text()
        assert svg.count('id="cell-') == 16
        # Power <-> Attitude Control false relations in the aligned block
        assert svg.count('id="mismatch-') == 2

    def test_returns_none_without_completed_runs(self, tmp_path):
        target = tmp_path / "h.svg"
        assert write_heatmap_svg(error_report(), target) is None
        assert not target.exists()

    def test_svg_bytes_deterministic(self, tmp_path):
        report = scenario_i_report()
        a = write_heatmap_svg(report, tmp_path / "a.svg")
        b = write_heatmap_svg(report, tmp_path / "b.svg")
        assert a.read_bytes() == b.read_bytes()


class TestBarChart:
    def test_emitted_file_is_svg(self, tmp_path):
        written = emit_reports([scenario_ii_report()], tmp_path)
        bars = next(p for p in written if p.name == "bars.svg")
        text = bars.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "</svg>" in text

    def test_bar_chart_bytes_deterministic(self, tmp_path):
        emit_reports([scenario_i_report()], tmp_path / "a")
        emit_reports([scenario_i_report()], tmp_path / "b")
        assert (tmp_path / "a" / "bars.svg").read_bytes() == (
            tmp_path / "b" / "bars.svg"
        ).read_bytes()
