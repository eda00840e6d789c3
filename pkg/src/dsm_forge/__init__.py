"""dsm-forge: generate Design Structure Matrices with LLM pipelines and score them."""

__version__ = "0.1.0"

from .alignment import AlignConfig, AlignmentResult, align, assignment
from .dsm import CellValue, Dsm, GroundTruthSet, load_ground_truth, new_dsm, worst_case_dsm
from .gateway import BackendConfig, MockBackend, ReplayBackend, load_transcript, save_transcript
from .graphrag import Community, Entity, GraphRagConfig, Relation, detect_communities
from .metrics import (
    Aggregate,
    CellMetrics,
    ConfusionCounts,
    GraphDistances,
    aggregate,
    cell_metrics,
    confusion,
    edit_distance,
    spectral_distance,
)
from .runner import (
    AggregateReport,
    ExperimentConfig,
    RunRecord,
    run_experiment,
    run_scenario_i,
    run_scenario_ii,
    sweep,
)

__all__ = [
    "Aggregate",
    "AggregateReport",
    "AlignConfig",
    "AlignmentResult",
    "BackendConfig",
    "CellMetrics",
    "CellValue",
    "Community",
    "ConfusionCounts",
    "Dsm",
    "Entity",
    "ExperimentConfig",
    "GraphDistances",
    "GraphRagConfig",
    "GroundTruthSet",
    "MockBackend",
    "Relation",
    "ReplayBackend",
    "RunRecord",
    "aggregate",
    "align",
    "assignment",
    "cell_metrics",
    "confusion",
    "detect_communities",
    "edit_distance",
    "load_ground_truth",
    "load_transcript",
    "new_dsm",
    "run_experiment",
    "run_scenario_i",
    "run_scenario_ii",
    "save_transcript",
    "spectral_distance",
    "sweep",
    "worst_case_dsm",
]
