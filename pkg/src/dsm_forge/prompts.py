"""Prompt rendering for every model call the pipelines make.

Templates live as text assets next to this module, with ``{placeholder}``
slots.  Substitution is regex-based rather than ``str.format`` so that
braces inside substituted values (JSON examples, earlier prompts embedded in
the validator) pass through untouched.  Rendering is deterministic: the same
inputs produce byte-identical text, which the golden-file tests rely on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .parsing import render_components, render_grid

CLASSIFICATION_EXCERPT_BUDGET = 4000


class PromptError(Exception):
    pass


class MissingComponents(PromptError):
    pass


class EmptyInput(PromptError):
    pass


class WrongKind(PromptError):
    pass


class TemplateError(PromptError):
    pass


class PromptKind(Enum):
    RELATIONSHIP = "relationship"
    IDENTIFICATION = "identification"
    UPDATE = "update"
    VALIDATOR = "validator"
    CLASSIFICATION = "classification"
    GRAPH_EXTRACTION = "graph_extraction"


@dataclass(frozen=True)
class PromptSpec:
    """What to generate a DSM about, and under which relationship semantics."""

    concept_name: str
    relationship_type: str
    application_domain: str
    expected_n: int
    components: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.concept_name.strip():
            raise PromptError("concept_name must be nonempty")
        if not self.relationship_type.strip():
            raise PromptError("relationship_type must be nonempty")
        if self.expected_n < 1:
            raise PromptError(f"expected_n must be positive, got {self.expected_n}")
        if self.components is not None:
            if len(self.components) != self.expected_n:
                raise PromptError(
                    f"expected_n={self.expected_n} but {len(self.components)} components"
                )
            if any(not c.strip() for c in self.components):
                raise PromptError("blank component name")

    def with_components(self, components) -> "PromptSpec":
        components = tuple(components)
        return PromptSpec(
            concept_name=self.concept_name,
            relationship_type=self.relationship_type,
            application_domain=self.application_domain,
            expected_n=len(components),
            components=components,
        )


@dataclass(frozen=True)
class RenderedPrompt:
    kind: PromptKind
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise PromptError("rendered prompt is empty")


_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return (
        resources.files("dsm_forge.templates")
        .joinpath(f"{name}.txt")
        .read_text(encoding="utf-8")
    )


def _render(name: str, mapping: dict) -> str:
    def fill(match: re.Match) -> str:
        key = match.group(1)
        if key not in mapping:
            raise TemplateError(f"template {name!r} slot {key!r} has no value")
        return str(mapping[key])

    return _PLACEHOLDER.sub(fill, _template(name))


def _identity_grid(n: int) -> list[list[int]]:
    return [[1 if i == j else 0 for j in range(n)] for i in range(n)]


def _worst_case_grid(n: int) -> list[list[int]]:
    return [[1 if i == j else 2 for j in range(n)] for i in range(n)]


def relationship_prompt(spec: PromptSpec) -> RenderedPrompt:
    """The DSM-filling task over a known component list.

    Carries the three pillars the task depends on: an explicit output format,
    concise cell-value instructions (1/0/2 with the diagonal rule), and a
    first-shot worst-case example auto-sized to the component count.
    """
    if not spec.components:
        raise MissingComponents("relationship prompt needs the component list")
    n = spec.expected_n
    text = _render(
        "relationship",
        {
            "relationship_type": spec.relationship_type,
            "concept_name": spec.concept_name,
            "components": render_components(spec.components),
            "n": n,
            "worst_case_example": render_grid(_worst_case_grid(n)),
            "identity_example": render_grid(_identity_grid(n)),
        },
    )
    return RenderedPrompt(kind=PromptKind.RELATIONSHIP, text=text)


def update_prompt(spec: PromptSpec) -> RenderedPrompt:
    """Relationship task re-issued over components the model itself identified.

    Same template as :func:`relationship_prompt` on purpose; only the kind
    differs so context injection and records can tell the stages apart.
    """
    return RenderedPrompt(kind=PromptKind.UPDATE, text=relationship_prompt(spec).text)


def identification_prompt(spec: PromptSpec, k: int) -> RenderedPrompt:
    if k < 1:
        raise PromptError(f"component count must be positive, got {k}")
    text = _render(
        "identification",
        {
            "concept_name": spec.concept_name,
            "application_domain": spec.application_domain,
            "relationship_type": spec.relationship_type,
            "k": k,
        },
    )
    return RenderedPrompt(kind=PromptKind.IDENTIFICATION, text=text)


def validator_prompt(original: str, raw: str) -> RenderedPrompt:
    if not original or not raw:
        raise EmptyInput("validator needs both the original prompt and the response")
    text = _render(
        "validator", {"original_prompt": original, "raw_response": raw}
    )
    return RenderedPrompt(kind=PromptKind.VALIDATOR, text=text)


def classification_prompt(
    doc_excerpt: str, budget: int = CLASSIFICATION_EXCERPT_BUDGET
) -> RenderedPrompt:
    if not doc_excerpt.strip():
        raise EmptyInput("classification needs a document excerpt")
    text = _render("classification", {"excerpt": doc_excerpt[:budget]})
    return RenderedPrompt(kind=PromptKind.CLASSIFICATION, text=text)


def graph_extraction_prompt(chunk_text: str) -> RenderedPrompt:
    if not chunk_text.strip():
        raise EmptyInput("extraction needs chunk text")
    text = _render("graph_extraction", {"chunk": chunk_text})
    return RenderedPrompt(kind=PromptKind.GRAPH_EXTRACTION, text=text)


def graph_gleaning_prompt() -> RenderedPrompt:
    return RenderedPrompt(kind=PromptKind.GRAPH_EXTRACTION, text=_template("graph_gleaning"))


def community_summary_prompt(entity_lines: str, relation_lines: str) -> RenderedPrompt:
    text = _render(
        "community_summary",
        {"entities": entity_lines or "(none)", "relations": relation_lines or "(none)"},
    )
    return RenderedPrompt(kind=PromptKind.GRAPH_EXTRACTION, text=text)


def graph_map_prompt(summary: str, query: str) -> RenderedPrompt:
    text = _render("graph_map", {"summary": summary, "query": query})
    return RenderedPrompt(kind=PromptKind.GRAPH_EXTRACTION, text=text)


def graph_reduce_prompt(partials: list[str], query: str) -> RenderedPrompt:
    joined = "\n\n".join(
        f"Partial {i + 1}:\n{p}" for i, p in enumerate(partials)
    )
    text = _render("graph_reduce", {"partials": joined, "query": query})
    return RenderedPrompt(kind=PromptKind.GRAPH_EXTRACTION, text=text)


_INJECTABLE = frozenset(
    (PromptKind.RELATIONSHIP, PromptKind.IDENTIFICATION, PromptKind.UPDATE)
)


def inject_context(prompt: RenderedPrompt, passages: list[str]) -> RenderedPrompt:
    """Prepend retrieved passages, in retrieval order, before the task text."""
    if prompt.kind not in _INJECTABLE:
        raise WrongKind(f"cannot inject context into a {prompt.kind.value} prompt")
    if passages:
        block = "Context:\n" + "".join(f"---\n{p}\n" for p in passages) + "---\n\n"
    else:
        block = "Context:\n\n"
    return RenderedPrompt(kind=prompt.kind, text=block + prompt.text)
