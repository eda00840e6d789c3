"""Reference preparation and the classic RAG path.

Covers loading reference documents named ``[Year Author] RType-Title.txt``,
LLM classification into the R1/R2/R3 reference classes, per-class merging
for config generation, character-window chunking, and a flat in-memory
embedding index with exhaustive cosine retrieval.  Corpora here are a
handful of documents, so nothing fancier than a linear scan is warranted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .gateway import Backend, cosine
from .prompts import classification_prompt

RCLASSES = ("R1", "R2", "R3")


class CorpusError(Exception):
    pass


class BadFilename(CorpusError):
    pass


class MissingClass(CorpusError):
    def __init__(self, rclass: str):
        super().__init__(f"no documents of class {rclass} in corpus")
        self.rclass = rclass


class UnparseableClassification(CorpusError):
    pass


class EmptyIndex(CorpusError):
    pass


@dataclass(frozen=True)
class ReferenceDoc:
    id: str
    year: int
    author: str
    rclass: str
    title: str
    text: str

    def __post_init__(self) -> None:
        if self.rclass not in RCLASSES:
            raise CorpusError(f"rclass must be one of {RCLASSES}, got {self.rclass!r}")
        if not self.text:
            raise CorpusError(f"document {self.id!r} has no text")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    seq: int
    text: str


@dataclass(frozen=True)
class RagConfig:
    chunk_size: int = 1200
    overlap: int = 100
    top_k: int = 5
    reference_selection: frozenset = frozenset(RCLASSES)

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise CorpusError("chunk_size must be positive")
        if not 0 <= self.overlap < self.chunk_size:
            raise CorpusError("overlap must satisfy 0 <= overlap < chunk_size")
        if self.top_k < 1:
            raise CorpusError("top_k must be positive")
        selection = frozenset(self.reference_selection)
        if not selection or not selection <= set(RCLASSES):
            raise CorpusError(
                f"reference_selection must be a nonempty subset of {RCLASSES}"
            )
        object.__setattr__(self, "reference_selection", selection)


_FILENAME = re.compile(
    r"^\[(?P<year>\d{4})\s+(?P<author>[^\]]+)\]\s+(?P<rclass>R[123])-(?P<title>.+)$"
)


def parse_reference_filename(filename: str) -> dict:
    """Split ``[Year Author] RType-Title.ext`` into its fields."""
    stem = Path(filename).name
    for ext in (".txt", ".md"):
        if stem.lower().endswith(ext):
            stem = stem[: -len(ext)]
            break
    else:
        raise BadFilename(f"{filename!r}: only .txt/.md references are ingested")
    m = _FILENAME.match(stem)
    if not m:
        raise BadFilename(
            f"{filename!r} does not match '[Year Author] RType-Title.txt'"
        )
    return {
        "id": stem,
        "year": int(m.group("year")),
        "author": m.group("author").strip(),
        "rclass": m.group("rclass"),
        "title": m.group("title").strip(),
    }


def load_corpus(directory) -> list[ReferenceDoc]:
    """Load every convention-named reference file in a directory, sorted by id."""
    docs = []
    for path in sorted(Path(directory).iterdir()):
        if not path.is_file() or path.suffix.lower() not in (".txt", ".md"):
            continue
        fields = parse_reference_filename(path.name)
        docs.append(ReferenceDoc(text=path.read_text(encoding="utf-8"), **fields))
    return docs


_RCLASS_TOKEN = re.compile(r"\bR([123])\b")


def classify_document(doc_text: str, backend: Backend) -> str:
    """Ask the model for the document's reference class, with one retry."""
    prompt = classification_prompt(doc_text)
    for _ in range(2):
        reply = backend.chat([("user", prompt.text)])
        m = _RCLASS_TOKEN.search(reply.text)
        if m:
            return f"R{m.group(1)}"
    raise UnparseableClassification(
        f"no R1/R2/R3 token in reply: {reply.text[:120]!r}"
    )


def merge_references(docs, selection) -> dict[str, str]:
    """One concatenated logical reference per selected class."""
    selection = set(selection)
    merged = {}
    for rclass in sorted(selection):
        members = sorted((d for d in docs if d.rclass == rclass), key=lambda d: d.id)
        if not members:
            raise MissingClass(rclass)
        merged[rclass] = "\n\n".join(d.text for d in members)
    return merged


def generate_config(
    docs,
    selection,
    concept_name: str = "",
    relationship_type: str = "",
    predicted_components=(),
) -> dict:
    """Config fragment listing the selected reference files per class.

    Also verifies via :func:`merge_references` that every selected class is
    actually covered by the corpus.
    """
    selection = set(selection)
    if not selection:
        raise CorpusError("selection must be nonempty")
    merge_references(docs, selection)
    reference_files = {
        rclass: sorted(d.id for d in docs if d.rclass == rclass and rclass in selection)
        for rclass in RCLASSES
    }
    return {
        "concept_name": concept_name,
        "relationship_type": relationship_type,
        "predicted_components": list(predicted_components),
        "reference_files": reference_files,
    }


def chunk_text(text: str, cfg: RagConfig, doc_id: str = "") -> list[Chunk]:
    """Sliding character window with stride ``chunk_size - overlap``.

    The final partial chunk is kept, and dropping the first ``overlap``
    characters of every chunk after the first reconstructs the input
    exactly.
    """
    if not text:
        return []
    stride = cfg.chunk_size - cfg.overlap
    chunks = []
    start = 0
    seq = 0
    while True:
        piece = text[start : start + cfg.chunk_size]
        chunks.append(Chunk(doc_id=doc_id, seq=seq, text=piece))
        if start + cfg.chunk_size >= len(text):
            break
        start += stride
        seq += 1
    return chunks


def reassemble(chunks, overlap: int) -> str:
    """Inverse of :func:`chunk_text` for one document's chunk run."""
    if not chunks:
        return ""
    parts = [chunks[0].text]
    parts.extend(chunk.text[overlap:] for chunk in chunks[1:])
    return "".join(parts)


class ChunkIndex:
    """Flat in-memory chunk store with exhaustive cosine retrieval.

    Reference-combination experiments filter by class at query time instead
    of rebuilding the index per combination.
    """

    def __init__(self, chunks, embeddings, doc_classes: dict[str, str]):
        if len(chunks) != len(embeddings):
            raise CorpusError("one embedding per chunk required")
        self._chunks = list(chunks)
        self._embeddings = list(embeddings)
        self._doc_classes = dict(doc_classes)

    @classmethod
    def build(cls, docs, cfg: RagConfig, backend: Backend) -> "ChunkIndex":
        chunks = []
        for doc in sorted(docs, key=lambda d: d.id):
            chunks.extend(chunk_text(doc.text, cfg, doc_id=doc.id))
        if not chunks:
            raise EmptyIndex("corpus produced no chunks")
        embeddings = backend.embed([c.text for c in chunks])
        return cls(chunks, embeddings, {d.id: d.rclass for d in docs})

    def __len__(self) -> int:
        return len(self._chunks)

    @property
    def chunks(self) -> list[Chunk]:
        return list(self._chunks)

    def doc_class(self, doc_id: str) -> str:
        return self._doc_classes[doc_id]

    def retrieve(
        self, query: str, backend: Backend, top_k: int, selection=None
    ) -> list[Chunk]:
        """Top-k chunks by descending cosine; ties go to (doc_id, seq)."""
        if top_k < 1:
            raise CorpusError("top_k must be positive")
        if selection is None:
            pool = list(range(len(self._chunks)))
        else:
            selection = set(selection)
            pool = [
                i
                for i, chunk in enumerate(self._chunks)
                if self._doc_classes.get(chunk.doc_id) in selection
            ]
        if not pool:
            raise EmptyIndex("no chunks match the reference selection")
        [query_vec] = backend.embed([query])
        scored = [
            (-cosine(query_vec, self._embeddings[i]),
             self._chunks[i].doc_id,
             self._chunks[i].seq,
             i)
            for i in pool
        ]
        scored.sort(key=lambda item: item[:3])
        return [self._chunks[i] for *_rank, i in scored[:top_k]]
