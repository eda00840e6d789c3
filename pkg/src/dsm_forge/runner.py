"""Experiment orchestration: scenarios, methods, repetitions, aggregation.

Scenario i hands the model the component list and asks only for the
relationship matrix.  Scenario ii first asks the model to identify the
components, builds the relationship prompt over that list, and passes the
answer through a validator round (with at most one corrective re-issue).
Both scenarios run N repetitions against a backend, score each repetition
against the ground truth, and aggregate mean and standard deviation over
the repetitions that completed.

Context injection differs per method: LLM sends the bare prompt, RAG
prepends retrieved corpus chunks, GraphRAG prepends a community-graph
map-reduce answer.  API keys are never read from experiment configs; they
come from the environment or the credentials file only, because configs
are meant to be committed alongside results.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .alignment import AlignConfig, AlignmentError, align as align_dsm
from .corpus import (
    ChunkIndex,
    CorpusError,
    RCLASSES,
    RagConfig,
    load_corpus,
)
from .dsm import Dsm, DsmError, GroundTruthSet, load_ground_truth, new_dsm
from .gateway import (
    Backend,
    BackendConfig,
    ChatExchange,
    GatewayError,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    TranscriptRecorder,
    load_api_key,
    load_transcript,
)
from .graphrag import GraphRagConfig, GraphRagError, graph_answer, load_index
from .metrics import (
    CellMetrics,
    ConfusionCounts,
    GraphDistances,
    aggregate,
    cell_metrics,
    confusion_cells,
    graph_distances,
    padded_cells,
)
from .parsing import ParseError, Verdict, extract_components, extract_matrix, parse_verdict
from .prompts import (
    PromptSpec,
    identification_prompt,
    inject_context,
    relationship_prompt,
    update_prompt,
    validator_prompt,
)

METHODS = ("LLM", "RAG", "GraphRAG")
STATUSES = ("ok", "parse_failed", "backend_failed", "invalid_after_validation")
GRAPHRAG_REFERENCE_PAIRS = (frozenset({"R1", "R2"}), frozenset({"R2", "R3"}))

RAW_METRIC_KEYS = (
    "accuracy",
    "precision",
    "recall",
    "f1",
    "edit_distance",
    "spectral_distance",
)


class RunnerError(Exception):
    pass


class ConfigError(RunnerError):
    pass


class AllRunsFailed(RunnerError):
    def __init__(self, message: str, report: "AggregateReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ExperimentConfig:
    concept_name: str
    application_domain: str
    relationship_type: str
    ground_truth: str
    method: str = "LLM"
    predicted_components: tuple[str, ...] | None = None
    reference_selection: frozenset[str] = frozenset(RCLASSES)
    repetitions: int = 5
    backend: BackendConfig = field(
        default_factory=lambda: BackendConfig(
            base_url="http://localhost:11434/v1", model_id="llama3.3:70b"
        )
    )
    rag: RagConfig = field(default_factory=RagConfig)
    graphrag: GraphRagConfig = field(default_factory=GraphRagConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    seed: int = 42
    corpus_dir: str | None = None
    graph_index_dir: str | None = None
    allow_any_refs: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.predicted_components is not None:
            object.__setattr__(
                self, "predicted_components", tuple(self.predicted_components)
            )
            if not self.predicted_components:
                raise ConfigError("predicted_components present but empty")
        selection = frozenset(self.reference_selection)
        object.__setattr__(self, "reference_selection", selection)
        if not selection or not selection <= set(RCLASSES):
            raise ConfigError(
                f"reference_selection must be a nonempty subset of {RCLASSES}"
            )
        if (
            self.method == "GraphRAG"
            and not self.allow_any_refs
            and selection not in GRAPHRAG_REFERENCE_PAIRS
        ):
            raise ConfigError(
                "GraphRAG supports reference selections R1+R2 or R2+R3 "
                "(pass allow_any_refs to override)"
            )
        if not isinstance(self.ground_truth, str) or not self.ground_truth.strip():
            raise ConfigError("ground_truth fixture id must be nonempty")

    @property
    def scenario(self) -> str:
        return "i" if self.predicted_components is not None else "ii"

    @property
    def refs_label(self) -> str:
        return "+".join(sorted(self.reference_selection))


@dataclass(frozen=True)
class RunRecord:
    repetition: int
    status: str
    config: ExperimentConfig | None = None
    error: str | None = None
    raw_labels: tuple[str, ...] | None = None
    raw_cells: tuple[tuple[int, ...], ...] | None = None
    identified: tuple[str, ...] | None = None
    counts: ConfusionCounts | None = None
    cell: CellMetrics | None = None
    graph: GraphDistances | None = None
    aligned_pred: Dsm | None = None
    aligned_truth: Dsm | None = None
    aligned_counts: ConfusionCounts | None = None
    aligned_cell: CellMetrics | None = None
    aligned_graph: GraphDistances | None = None
    unmatched_pred_labels: tuple[str, ...] = ()
    unmatched_truth_labels: tuple[str, ...] = ()
    corrective_exchanges: int = 0
    alignment_note: str | None = None
    exchanges: tuple[ChatExchange, ...] = ()


@dataclass(frozen=True)
class AggregateReport:
    config: ExperimentConfig
    scenario: str
    records: tuple[RunRecord, ...]
    status_counts: dict
    aggregates: dict
    aligned_aggregates: dict
    error: str | None = None

    @property
    def label(self) -> str:
        return f"{self.config.method}/{self.config.refs_label}/{self.config.backend.model_id}"


@dataclass(frozen=True)
class _Grid:
    """Duck-typed stand-in for a Dsm whose invariants the model broke."""

    cells: tuple

    @property
    def n(self) -> int:
        return len(self.cells)


# --- config serialization -------------------------------------------------

_SECTION_TYPES = {
    "backend": BackendConfig,
    "rag": RagConfig,
    "graphrag": GraphRagConfig,
    "align": AlignConfig,
}


def _build_section(name: str, cls, obj: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    if name == "backend":
        if "api_key" in obj:
            raise ConfigError(
                "api_key does not belong in a config file; set the "
                "DSM_FORGE_API_KEY environment variable or the credentials file"
            )
        allowed.discard("api_key")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    kwargs = dict(obj)
    if "reference_selection" in kwargs:
        kwargs["reference_selection"] = frozenset(kwargs["reference_selection"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, GatewayError, CorpusError, GraphRagError,
            AlignmentError) as exc:
        raise ConfigError(f"bad section {name!r}: {exc}") from exc


def experiment_config_from_json(text: str) -> ExperimentConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(obj)
    for name, cls in _SECTION_TYPES.items():
        if name in kwargs:
            kwargs[name] = _build_section(name, cls, kwargs[name])
    if "predicted_components" in kwargs and kwargs["predicted_components"] is not None:
        kwargs["predicted_components"] = tuple(kwargs["predicted_components"])
    if "reference_selection" in kwargs:
        kwargs["reference_selection"] = frozenset(kwargs["reference_selection"])
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def experiment_config_to_json(cfg: ExperimentConfig) -> str:
    backend = {
        f.name: getattr(cfg.backend, f.name)
        for f in fields(BackendConfig)
        if f.name != "api_key"
    }
    obj = {
        "concept_name": cfg.concept_name,
        "application_domain": cfg.application_domain,
        "relationship_type": cfg.relationship_type,
        "ground_truth": cfg.ground_truth,
        "method": cfg.method,
        "predicted_components": (
            list(cfg.predicted_components)
            if cfg.predicted_components is not None
            else None
        ),
        "reference_selection": sorted(cfg.reference_selection),
        "repetitions": cfg.repetitions,
        "backend": backend,
        "rag": {
            "chunk_size": cfg.rag.chunk_size,
            "overlap": cfg.rag.overlap,
            "top_k": cfg.rag.top_k,
            "reference_selection": sorted(cfg.rag.reference_selection),
        },
        "graphrag": {f.name: getattr(cfg.graphrag, f.name) for f in fields(GraphRagConfig)},
        "align": {f.name: getattr(cfg.align, f.name) for f in fields(AlignConfig)},
        "seed": cfg.seed,
        "corpus_dir": cfg.corpus_dir,
        "graph_index_dir": cfg.graph_index_dir,
        "allow_any_refs": cfg.allow_any_refs,
    }
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_experiment_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return experiment_config_from_json(text)


def build_backend(cfg: ExperimentConfig, replay_path=None) -> Backend:
    if replay_path is not None:
        return ReplayBackend(load_transcript(replay_path))
    return HttpBackend(replace(cfg.backend, api_key=load_api_key()))


# --- context acquisition --------------------------------------------------


def _context_query(cfg: ExperimentConfig) -> str:
    return (
        f"{cfg.concept_name}: {cfg.relationship_type} relationships "
        f"between its components"
    )


def _make_context_provider(cfg: ExperimentConfig, backend: Backend):
    """Returns provider(query, backend) -> passages, or None for bare LLM."""
    if cfg.method == "LLM":
        return None
    if cfg.method == "RAG":
        if not cfg.corpus_dir:
            raise ConfigError("RAG method requires corpus_dir")
        docs = load_corpus(cfg.corpus_dir)
        if not docs:
            raise ConfigError(f"no reference documents in {cfg.corpus_dir}")
        index = ChunkIndex.build(docs, cfg.rag, backend)

        def rag_provider(query: str, b: Backend) -> list[str]:
            chunks = index.retrieve(
                query, b, cfg.rag.top_k, selection=cfg.reference_selection
            )
            return [chunk.text for chunk in chunks]

        return rag_provider
    if not cfg.graph_index_dir:
        raise ConfigError("GraphRAG method requires graph_index_dir")
    _entities, _relations, communities = load_index(cfg.graph_index_dir)
    if not any(c.summary for c in communities):
        raise ConfigError(
            f"graph index at {cfg.graph_index_dir} has no community summaries; "
            "run the index step first"
        )

    def graph_provider(query: str, b: Backend) -> list[str]:
        return [graph_answer(query, communities, b)]

    return graph_provider


# --- per-repetition flows -------------------------------------------------


def _score_raw(truth: Dsm, pred_cells) -> tuple[ConfusionCounts, CellMetrics, GraphDistances]:
    pred = _Grid(tuple(tuple(row) for row in pred_cells))
    # grids of different sizes compare over the zero-padded common grid
    padded_truth, padded_pred = padded_cells(truth, pred)
    counts = confusion_cells(padded_truth, padded_pred)
    return counts, cell_metrics(counts), graph_distances(truth, pred)


def _scenario_i_once(cfg: ExperimentConfig, truth: Dsm, backend: Backend,
                     passages) -> dict:
    spec = PromptSpec(
        concept_name=cfg.concept_name,
        relationship_type=cfg.relationship_type,
        application_domain=cfg.application_domain,
        expected_n=truth.n,
        components=cfg.predicted_components,
    )
    prompt = relationship_prompt(spec)
    if passages is not None:
        prompt = inject_context(prompt, passages)
    response = backend.chat([("user", prompt.text)])
    grid = extract_matrix(response.text, expected_n=truth.n)
    counts, cell, graph = _score_raw(truth, grid)
    return {
        "raw_labels": cfg.predicted_components,
        "raw_cells": tuple(tuple(row) for row in grid),
        "counts": counts,
        "cell": cell,
        "graph": graph,
    }


def _scenario_ii_once(cfg: ExperimentConfig, truth: Dsm, backend: Backend,
                      passages) -> dict:
    base = PromptSpec(
        concept_name=cfg.concept_name,
        relationship_type=cfg.relationship_type,
        application_domain=cfg.application_domain,
        expected_n=truth.n,
    )
    id_prompt = identification_prompt(base, truth.n)
    if passages is not None:
        id_prompt = inject_context(id_prompt, passages)
    id_response = backend.chat([("user", id_prompt.text)])
    identified = tuple(extract_components(id_response.text))

    spec = base.with_components(identified)
    update = update_prompt(spec)
    if passages is not None:
        update = inject_context(update, passages)
    matrix_response = backend.chat([("user", update.text)])
    grid = extract_matrix(matrix_response.text, expected_n=len(identified))

    corrective = 0
    invalid_final = False
    check = validator_prompt(update.text, matrix_response.text)
    validator_reply = backend.chat([("user", check.text)])
    if parse_verdict(validator_reply.text) is Verdict.INVALID:
        corrective = 1
        # one corrective re-issue with the validator's reply appended
        retry_text = (
            update.text
            + "\n\nA validator rejected the previous answer with this feedback:\n"
            + validator_reply.text
        )
        matrix_response = backend.chat([("user", retry_text)])
        grid = extract_matrix(matrix_response.text, expected_n=len(identified))
        recheck = validator_prompt(update.text, matrix_response.text)
        second = parse_verdict(backend.chat([("user", recheck.text)]).text)
        if second is Verdict.INVALID:
            invalid_final = True

    counts, cell, graph = _score_raw(truth, grid)
    out = {
        "raw_labels": identified,
        "raw_cells": tuple(tuple(row) for row in grid),
        "identified": identified,
        "counts": counts,
        "cell": cell,
        "graph": graph,
        "corrective_exchanges": corrective,
        "invalid_final": invalid_final,
    }

    try:
        pred_dsm = new_dsm(list(identified), [list(row) for row in grid])
    except DsmError as exc:
        out["alignment_note"] = f"prediction is not a valid DSM: {exc}"
        return out
    try:
        result = align_dsm(pred_dsm, truth, backend, cfg.align)
    except AlignmentError as exc:
        out["alignment_note"] = str(exc)
        return out
    aligned_counts = confusion_cells(
        [list(r) for r in result.aligned_truth.cells],
        [list(r) for r in result.aligned_pred.cells],
    )
    out.update(
        {
            "aligned_pred": result.aligned_pred,
            "aligned_truth": result.aligned_truth,
            "aligned_counts": aligned_counts,
            "aligned_cell": cell_metrics(aligned_counts),
            "aligned_graph": graph_distances(result.aligned_truth, result.aligned_pred),
            "unmatched_pred_labels": tuple(
                pred_dsm.labels[i] for i in result.unmatched_pred
            ),
            "unmatched_truth_labels": tuple(
                truth.labels[i] for i in result.unmatched_truth
            ),
        }
    )
    return out


# --- orchestration --------------------------------------------------------


def _run_one(cfg: ExperimentConfig, truth: Dsm, backend: Backend, provider,
             scenario: str, repetition: int) -> RunRecord:
    recorder = TranscriptRecorder()
    recording = RecordingBackend(backend, recorder)
    fields_out: dict = {}
    status = "ok"
    error = None
    try:
        passages = provider(_context_query(cfg), recording) if provider else None
        if scenario == "i":
            fields_out = _scenario_i_once(cfg, truth, recording, passages)
        else:
            fields_out = _scenario_ii_once(cfg, truth, recording, passages)
            if fields_out.pop("invalid_final", False):
                status = "invalid_after_validation"
    except ParseError as exc:
        status = "parse_failed"
        error = f"{type(exc).__name__}: {exc}"
        fields_out = {}
    except (GatewayError, CorpusError, GraphRagError) as exc:
        status = "backend_failed"
        error = f"{type(exc).__name__}: {exc}"
        fields_out = {}
    return RunRecord(
        repetition=repetition,
        status=status,
        config=cfg,
        error=error,
        exchanges=tuple(recorder.exchanges),
        **fields_out,
    )


def _collect_aggregates(records, aligned: bool) -> dict:
    out: dict = {}
    cell_attr = "aligned_cell" if aligned else "cell"
    graph_attr = "aligned_graph" if aligned else "graph"
    for key in RAW_METRIC_KEYS:
        values = []
        for record in records:
            if record.status != "ok":
                continue
            if key in ("edit_distance", "spectral_distance"):
                holder = getattr(record, graph_attr)
                value = None if holder is None else getattr(
                    holder, "edit" if key == "edit_distance" else "spectral"
                )
            else:
                holder = getattr(record, cell_attr)
                value = None if holder is None else getattr(holder, key)
            if value is not None:
                values.append(value)
        if values:
            out[key] = aggregate(values)
    return out


def run_experiment(
    cfg: ExperimentConfig,
    backend: Backend,
    scenario: str | None = None,
    parallel: int = 1,
) -> AggregateReport:
    scenario = scenario or cfg.scenario
    if scenario not in ("i", "ii"):
        raise ConfigError(f"scenario must be 'i' or 'ii', got {scenario!r}")
    truth_set: GroundTruthSet = load_ground_truth(cfg.ground_truth)
    truth = truth_set.dsm
    if scenario == "i":
        if cfg.predicted_components is None:
            raise ConfigError("scenario i requires predicted_components")
        if len(cfg.predicted_components) != truth.n:
            raise ConfigError(
                f"predicted_components has {len(cfg.predicted_components)} entries "
                f"but ground truth {cfg.ground_truth!r} is {truth.n}x{truth.n}"
            )
    elif cfg.predicted_components is not None:
        raise ConfigError("scenario ii requires predicted_components to be absent")

    provider = _make_context_provider(cfg, backend)

    if parallel > 1 and isinstance(backend, ReplayBackend):
        parallel = 1  # positional transcripts only make sense sequentially
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [
                pool.submit(_run_one, cfg, truth, backend, provider, scenario, rep)
                for rep in range(cfg.repetitions)
            ]
            records = tuple(f.result() for f in futures)
    else:
        records = tuple(
            _run_one(cfg, truth, backend, provider, scenario, rep)
            for rep in range(cfg.repetitions)
        )

    status_counts = {status: 0 for status in STATUSES}
    for record in records:
        status_counts[record.status] += 1
    report = AggregateReport(
        config=cfg,
        scenario=scenario,
        records=records,
        status_counts=status_counts,
        aggregates=_collect_aggregates(records, aligned=False),
        aligned_aggregates=(
            _collect_aggregates(records, aligned=True) if scenario == "ii" else {}
        ),
    )
    if status_counts["ok"] == 0 and status_counts["invalid_after_validation"] == 0:
        raise AllRunsFailed(
            f"all {cfg.repetitions} repetitions failed "
            f"({status_counts['parse_failed']} parse, "
            f"{status_counts['backend_failed']} backend)",
            report=report,
        )
    return report


def run_scenario_i(cfg: ExperimentConfig, backend: Backend, parallel: int = 1) -> AggregateReport:
    return run_experiment(cfg, backend, scenario="i", parallel=parallel)


def run_scenario_ii(cfg: ExperimentConfig, backend: Backend, parallel: int = 1) -> AggregateReport:
    return run_experiment(cfg, backend, scenario="ii", parallel=parallel)


def sweep(configs, backend_factory, parallel: int = 1) -> list[AggregateReport]:
    """Run every config, isolating per-config failures into error reports."""
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep needs at least one config")
    reports = []
    for cfg in configs:
        try:
            backend = backend_factory(cfg)
            reports.append(run_experiment(cfg, backend, parallel=parallel))
        except AllRunsFailed as exc:
            reports.append(replace(exc.report, error=str(exc)))
        except (RunnerError, GatewayError, CorpusError, GraphRagError, DsmError, OSError) as exc:
            reports.append(
                AggregateReport(
                    config=cfg,
                    scenario=cfg.scenario,
                    records=(),
                    status_counts={status: 0 for status in STATUSES},
                    aggregates={},
                    aligned_aggregates={},
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return reports
