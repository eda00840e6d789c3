"""Command-line front door.

Subcommands mirror the experiment lifecycle: classify reference documents,
generate a starter config, build the graph index, run or sweep experiments,
and regenerate report files from a stored run log.  Exit codes: 0 on
success, 1 for configuration problems, 2 when every repetition failed.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .corpus import (
    CorpusError,
    RCLASSES,
    RagConfig,
    chunk_text,
    classify_document,
    load_corpus,
)
from .gateway import (
    BackendConfig,
    Backend,
    GatewayError,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    TranscriptRecorder,
    load_api_key,
    load_transcript,
    save_transcript,
)
from .graphrag import (
    GraphRagConfig,
    GraphRagError,
    detect_communities,
    extract_graph,
    save_index,
    summarize_communities,
)
from .metrics import CellMetrics, ConfusionCounts, GraphDistances
from .reporting import ReportingError, emit_reports
from .runner import (
    AggregateReport,
    AllRunsFailed,
    ConfigError,
    ExperimentConfig,
    RunRecord,
    RunnerError,
    STATUSES,
    experiment_config_from_json,
    experiment_config_to_json,
    load_experiment_config,
    run_experiment,
    sweep as run_sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ALL_FAILED = 2


def _http_backend(base_url: str, model: str) -> Backend:
    cfg = BackendConfig(base_url=base_url, model_id=model, api_key=load_api_key())
    return HttpBackend(cfg)


def _pick_backend(base_url: str, model: str, replay: str | None) -> Backend:
    if replay:
        return ReplayBackend(load_transcript(replay))
    return _http_backend(base_url, model)


@click.group()
@click.version_option(package_name="dsm-forge")
def main() -> None:
    """Generate and evaluate design structure matrices with LLM backends."""


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--base-url", default="http://localhost:11434/v1", show_default=True)
@click.option("--model", default="llama3.3:70b", show_default=True)
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Serve responses from a recorded transcript.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Manifest path (default: classification.json inside DIRECTORY).")
def classify(directory: str, base_url: str, model: str, replay: str | None,
             out: str | None) -> None:
    """Classify reference documents into R1/R2/R3 and write a manifest."""
    root = Path(directory)
    files = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".txt", ".md") and p.is_file()
    )
    if not files:
        click.echo(f"no .txt or .md files in {directory}", err=True)
        sys.exit(EXIT_CONFIG)
    backend = _pick_backend(base_url, model, replay)
    manifest: dict[str, str] = {}
    failures = 0
    for path in files:
        try:
            rclass = classify_document(path.read_text(encoding="utf-8"), backend)
            manifest[path.name] = rclass
            click.echo(f"{path.name}: {rclass}")
        except (CorpusError, GatewayError) as exc:
            failures += 1
            manifest[path.name] = "unclassified"
            click.echo(f"{path.name}: failed ({exc})", err=True)
    target = Path(out) if out else root / "classification.json"
    target.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(f"wrote {target}")
    if failures == len(files):
        sys.exit(EXIT_ALL_FAILED)


@main.command("gen-config")
@click.option("--concept", default="power screwdriver", show_default=True)
@click.option("--domain", default="consumer power tools", show_default=True)
@click.option("--relationship", default="proximity (in contact)", show_default=True)
@click.option("--ground-truth", default="power_screwdriver", show_default=True)
@click.option("--method", type=click.Choice(["LLM", "RAG", "GraphRAG"]), default="LLM",
              show_default=True)
@click.option("--refs", default="R1+R2+R3", show_default=True,
              help="Reference classes joined with '+'.")
@click.option("--scenario", type=click.Choice(["i", "ii"]), default="i",
              show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write to a file instead of stdout.")
def gen_config(concept: str, domain: str, relationship: str, ground_truth: str,
               method: str, refs: str, scenario: str, out: str | None) -> None:
    """Emit a starter experiment config as JSON."""
    from .dsm import load_ground_truth

    try:
        truth = load_ground_truth(ground_truth)
        selection = frozenset(refs.split("+"))
        cfg = ExperimentConfig(
            concept_name=concept,
            application_domain=domain,
            relationship_type=relationship,
            ground_truth=ground_truth,
            method=method,
            predicted_components=(
                tuple(truth.dsm.labels) if scenario == "i" else None
            ),
            reference_selection=selection,
            corpus_dir="corpus" if method == "RAG" else None,
            graph_index_dir="graph-index" if method == "GraphRAG" else None,
        )
    except (ConfigError, KeyError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    text = experiment_config_to_json(cfg)
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"wrote {out}")
    else:
        click.echo(text, nl=False)


@main.command()
@click.argument("corpus", type=click.Path(exists=True, file_okay=False))
@click.option("--method", type=click.Choice(["graphrag"]), default="graphrag",
              show_default=True)
@click.option("--refs", default="R1+R2", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="graph-index",
              show_default=True)
@click.option("--base-url", default="http://localhost:11434/v1", show_default=True)
@click.option("--model", default="llama3.3:70b", show_default=True)
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--record", type=click.Path(dir_okay=False), default=None,
              help="Save the chat transcript for later replay.")
@click.option("--chunk-size", default=1200, show_default=True)
@click.option("--overlap", default=100, show_default=True)
@click.option("--gleanings", default=1, show_default=True)
def index(corpus: str, method: str, refs: str, out: str, base_url: str, model: str,
          replay: str | None, record: str | None, chunk_size: int, overlap: int,
          gleanings: int) -> None:
    """Build and persist the entity/community index for GraphRAG."""
    selection = frozenset(refs.split("+"))
    if not selection <= set(RCLASSES):
        click.echo(f"refs must name classes from {RCLASSES}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        rag_cfg = RagConfig(chunk_size=chunk_size, overlap=overlap)
        graph_cfg = GraphRagConfig(gleanings=gleanings)
        docs = [d for d in load_corpus(corpus) if d.rclass in selection]
    except (CorpusError, GraphRagError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if not docs:
        click.echo(f"no documents of classes {sorted(selection)} in {corpus}", err=True)
        sys.exit(EXIT_CONFIG)
    chunks = []
    for doc in docs:
        chunks.extend(chunk_text(doc.text, rag_cfg, doc_id=doc.id))
    backend = _pick_backend(base_url, model, replay)
    recorder = TranscriptRecorder()
    if record:
        backend = RecordingBackend(backend, recorder)
    try:
        extraction = extract_graph(chunks, backend, graph_cfg)
        communities = detect_communities(
            extraction.entities, extraction.relations, graph_cfg
        )
        communities, failures = summarize_communities(
            communities, extraction.entities, extraction.relations, backend, graph_cfg
        )
    except (GatewayError, GraphRagError) as exc:
        click.echo(f"indexing failed: {exc}", err=True)
        sys.exit(EXIT_ALL_FAILED)
    save_index(out, extraction.entities, extraction.relations, communities)
    if record:
        save_transcript(record, recorder.exchanges)
        click.echo(f"transcript saved to {record}")
    click.echo(
        f"indexed {len(extraction.entities)} entities, "
        f"{len(extraction.relations)} relations, {len(communities)} communities "
        f"({len(extraction.failed_chunks)} failed chunks, "
        f"{len(failures)} failed summaries) -> {out}"
    )


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--scenario", type=click.Choice(["i", "ii"]), default=None,
              help="Override the scenario implied by the config.")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--parallel", default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="runs",
              show_default=True)
def run(config: str, scenario: str | None, replay: str | None, parallel: int,
        out: str) -> None:
    """Run one experiment config and emit its report files."""
    try:
        cfg = load_experiment_config(config)
        if replay:
            backend: Backend = ReplayBackend(load_transcript(replay))
        else:
            backend = HttpBackend(replace(cfg.backend, api_key=load_api_key()))
    except (ConfigError, GatewayError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    code = EXIT_OK
    try:
        report = run_experiment(cfg, backend, scenario=scenario, parallel=parallel)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except AllRunsFailed as exc:
        click.echo(f"all runs failed: {exc}", err=True)
        if exc.report is None:
            sys.exit(EXIT_ALL_FAILED)
        report = exc.report
        code = EXIT_ALL_FAILED
    outdir = Path(out)
    emit_reports([report], outdir)
    if not replay:
        transcript = [e for record in report.records for e in record.exchanges]
        save_transcript(outdir / "transcript.jsonl", transcript)
    for status in STATUSES:
        click.echo(f"{status}: {report.status_counts.get(status, 0)}")
    for name, agg in {**report.aggregates, **{f'aligned_{k}': v for k, v in report.aligned_aggregates.items()}}.items():
        click.echo(f"{name}: {agg.mean:.4f} +/- {agg.std:.4f} (k={agg.k})")
    click.echo(f"report files in {outdir}")
    sys.exit(code)


@main.command()
@click.argument("configs_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--parallel", default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="runs",
              show_default=True)
def sweep(configs_dir: str, parallel: int, out: str) -> None:
    """Run every *.json config in a directory; failures are isolated."""
    paths = sorted(Path(configs_dir).glob("*.json"))
    if not paths:
        click.echo(f"no *.json configs in {configs_dir}", err=True)
        sys.exit(EXIT_CONFIG)
    configs = []
    for path in paths:
        try:
            configs.append(load_experiment_config(path))
        except ConfigError as exc:
            click.echo(f"{path.name}: config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    def factory(cfg: ExperimentConfig) -> Backend:
        return HttpBackend(replace(cfg.backend, api_key=load_api_key()))

    reports = run_sweep(configs, factory, parallel=parallel)
    emit_reports(reports, out)
    for report in reports:
        status = report.error or f"ok={report.status_counts.get('ok', 0)}"
        click.echo(f"{report.label}: {status}")
    if all(r.status_counts.get("ok", 0) == 0 for r in reports):
        sys.exit(EXIT_ALL_FAILED)


def _report_from_lines(lines: list[dict]) -> AggregateReport:
    from .metrics import aggregate

    cfg = experiment_config_from_json(json.dumps(lines[0]["config"]))
    records = []
    for line in lines:
        counts = line.get("confusion")
        cell = line.get("cell_metrics")
        graph = line.get("graph_distances")
        a_counts = line.get("aligned_confusion")
        a_cell = line.get("aligned_cell_metrics")
        a_graph = line.get("aligned_graph_distances")
        records.append(
            RunRecord(
                repetition=line["repetition"],
                status=line["status"],
                config=cfg,
                error=line.get("error"),
                raw_labels=tuple(line["raw_labels"]) if line.get("raw_labels") else None,
                raw_cells=(
                    tuple(tuple(r) for r in line["raw_cells"])
                    if line.get("raw_cells")
                    else None
                ),
                identified=tuple(line["identified"]) if line.get("identified") else None,
                counts=ConfusionCounts(**counts) if counts else None,
                cell=CellMetrics(**cell) if cell else None,
                graph=GraphDistances(edit=graph["edit"], spectral=graph["spectral"])
                if graph
                else None,
                aligned_counts=ConfusionCounts(**a_counts) if a_counts else None,
                aligned_cell=CellMetrics(**a_cell) if a_cell else None,
                aligned_graph=(
                    GraphDistances(edit=a_graph["edit"], spectral=a_graph["spectral"])
                    if a_graph
                    else None
                ),
                unmatched_pred_labels=tuple(line.get("unmatched_pred_labels", ())),
                unmatched_truth_labels=tuple(line.get("unmatched_truth_labels", ())),
                corrective_exchanges=line.get("corrective_exchanges", 0),
                alignment_note=line.get("alignment_note"),
            )
        )
    status_counts = {status: 0 for status in STATUSES}
    for record in records:
        status_counts[record.status] += 1

    def collect(cell_attr: str, graph_attr: str) -> dict:
        out: dict = {}
        for key in ("accuracy", "precision", "recall", "f1"):
            values = [
                getattr(getattr(r, cell_attr), key)
                for r in records
                if r.status == "ok" and getattr(r, cell_attr) is not None
                and getattr(getattr(r, cell_attr), key) is not None
            ]
            if values:
                out[key] = aggregate(values)
        for key, attr in (("edit_distance", "edit"), ("spectral_distance", "spectral")):
            values = [
                getattr(getattr(r, graph_attr), attr)
                for r in records
                if r.status == "ok" and getattr(r, graph_attr) is not None
            ]
            if values:
                out[key] = aggregate(values)
        return out

    return AggregateReport(
        config=cfg,
        scenario=lines[0]["scenario"],
        records=tuple(records),
        status_counts=status_counts,
        aggregates=collect("cell", "graph"),
        aligned_aggregates=collect("aligned_cell", "aligned_graph"),
    )


@main.command()
@click.argument("runs_dir", type=click.Path(exists=True, file_okay=False))
def report(runs_dir: str) -> None:
    """Rebuild aggregate.csv and figures from a stored runs.jsonl."""
    source = Path(runs_dir) / "runs.jsonl"
    if not source.exists():
        click.echo(f"{source} not found", err=True)
        sys.exit(EXIT_CONFIG)
    grouped: dict[str, list[dict]] = {}
    order: list[str] = []
    with source.open(encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            line = json.loads(raw)
            if line.get("status") == "config_failed" or "config" not in line:
                continue
            key = json.dumps(line["config"], sort_keys=True)
            if key not in grouped:
                grouped[key] = []
                order.append(key)
            grouped[key].append(line)
    if not grouped:
        click.echo("runs.jsonl holds no completed runs", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        reports = [_report_from_lines(grouped[key]) for key in order]
        emit_reports(reports, runs_dir)
    except (RunnerError, ReportingError) as exc:
        click.echo(f"report error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"rebuilt report files in {runs_dir}")


if __name__ == "__main__":
    main()
