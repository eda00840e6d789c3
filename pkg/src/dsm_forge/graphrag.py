"""Graph-based RAG: extraction, community detection, summaries, map-reduce.

A corpus is indexed by prompting the model to emit line-delimited
``ENTITY|name|type|description`` and ``RELATION|src|dst|weight|description``
records per chunk (plus optional gleaning passes for missed items).  The
merged weighted graph is partitioned by a Leiden-style procedure written
here by hand (local move, refinement, aggregation, iterate), each community
is summarized with one model call, and queries are answered map-reduce
style over the summaries.  Index artifacts persist as JSON so the expensive
extraction step runs once per corpus.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import Chunk
from .dsm import normalize_label
from .gateway import Backend, GatewayError, cosine
from .prompts import (
    community_summary_prompt,
    graph_extraction_prompt,
    graph_gleaning_prompt,
    graph_map_prompt,
    graph_reduce_prompt,
)


class GraphRagError(Exception):
    pass


class EmptyGraph(GraphRagError):
    pass


class AllMapsFailed(GraphRagError):
    pass


class BadIndex(GraphRagError):
    pass


@dataclass(frozen=True)
class Entity:
    name: str
    etype: str
    description: str
    source_chunks: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class Relation:
    src: str
    dst: str
    weight: float
    description: str

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise GraphRagError(f"self-relation on {self.src!r}")
        if self.weight <= 0:
            raise GraphRagError(f"relation weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class Community:
    id: int
    members: frozenset[str]
    summary: str | None = None

    def __post_init__(self) -> None:
        if not self.members:
            raise GraphRagError("community must have members")


@dataclass(frozen=True)
class GraphRagConfig:
    gleanings: int = 1
    resolution: float = 1.0
    max_community_size: int = 20
    seed: int = 42
    restarts: int = 8

    def __post_init__(self) -> None:
        if self.gleanings < 0:
            raise GraphRagError("gleanings must be >= 0")
        if self.resolution <= 0:
            raise GraphRagError("resolution must be positive")
        if self.max_community_size < 1:
            raise GraphRagError("max_community_size must be positive")
        if self.restarts < 1:
            raise GraphRagError("restarts must be positive")


@dataclass
class ExtractionResult:
    entities: list[Entity]
    relations: list[Relation]
    failed_chunks: list[tuple[str, int]] = field(default_factory=list)


# --- record parsing -------------------------------------------------------


def parse_extraction_records(text: str):
    """Parse ENTITY/RELATION records from one response; junk lines ignored.

    Returns (entities, relations) as raw tuples before merging; weights that
    do not parse fall back to 1.0 (a plain mention), self-relations and
    non-positive weights are dropped.
    """
    entities = []
    relations = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("|")]
        tag = parts[0].upper()
        if tag == "ENTITY" and len(parts) >= 2:
            name = normalize_label(parts[1])
            if not name:
                continue
            etype = parts[2] if len(parts) > 2 else ""
            description = "|".join(parts[3:]) if len(parts) > 3 else ""
            entities.append((name, etype, description))
        elif tag == "RELATION" and len(parts) >= 3:
            src = normalize_label(parts[1])
            dst = normalize_label(parts[2])
            if not src or not dst or src == dst:
                continue
            try:
                weight = float(parts[3]) if len(parts) > 3 and parts[3] else 1.0
            except ValueError:
                weight = 1.0
            if weight <= 0:
                continue
            description = "|".join(parts[4:]) if len(parts) > 4 else ""
            relations.append((src, dst, weight, description))
    return entities, relations


def _merge_records(per_chunk_records) -> tuple[list[Entity], list[Relation]]:
    """Merge raw records across chunks.

    Entities merge by normalized name (first type wins, longest description
    wins, sources accumulate).  Relations merge by ordered (src, dst) with
    weight summation, so total weight is conserved.  Relation endpoints
    without an ENTITY record get stub entities, keeping the graph closed
    over the relation set.
    """
    entity_type: dict[str, str] = {}
    entity_desc: dict[str, str] = {}
    entity_sources: dict[str, list] = {}
    relation_weight: dict[tuple[str, str], float] = {}
    relation_desc: dict[tuple[str, str], str] = {}

    for chunk_key, raw_entities, raw_relations in per_chunk_records:
        for name, etype, description in raw_entities:
            if name not in entity_type:
                entity_type[name] = etype
                entity_desc[name] = description
                entity_sources[name] = []
            else:
                if not entity_type[name] and etype:
                    entity_type[name] = etype
                if len(description) > len(entity_desc[name]):
                    entity_desc[name] = description
            if chunk_key not in entity_sources[name]:
                entity_sources[name].append(chunk_key)
        for src, dst, weight, description in raw_relations:
            for endpoint in (src, dst):
                if endpoint not in entity_type:
                    entity_type[endpoint] = ""
                    entity_desc[endpoint] = ""
                    entity_sources[endpoint] = [chunk_key]
            key = (src, dst)
            relation_weight[key] = relation_weight.get(key, 0.0) + weight
            if key not in relation_desc or (
                description and not relation_desc[key]
            ):
                relation_desc[key] = description

    entities = [
        Entity(
            name=name,
            etype=entity_type[name],
            description=entity_desc[name],
            source_chunks=tuple(entity_sources[name]),
        )
        for name in sorted(entity_type)
    ]
    relations = [
        Relation(src=src, dst=dst, weight=relation_weight[(src, dst)],
                 description=relation_desc[(src, dst)])
        for src, dst in sorted(relation_weight)
    ]
    return entities, relations


def extract_graph(
    chunks: list[Chunk], backend: Backend, cfg: GraphRagConfig, parallel: int = 1
) -> ExtractionResult:
    """LLM extraction over every chunk, plus gleaning passes, then merge."""
    if not chunks:
        raise GraphRagError("extract_graph needs at least one chunk")

    def run_chunk(chunk: Chunk):
        messages = [("user", graph_extraction_prompt(chunk.text).text)]
        collected_entities = []
        collected_relations = []
        reply = backend.chat(messages)
        raw_e, raw_r = parse_extraction_records(reply.text)
        collected_entities.extend(raw_e)
        collected_relations.extend(raw_r)
        for _ in range(cfg.gleanings):
            messages = messages + [
                ("assistant", reply.text),
                ("user", graph_gleaning_prompt().text),
            ]
            reply = backend.chat(messages)
            raw_e, raw_r = parse_extraction_records(reply.text)
            collected_entities.extend(raw_e)
            collected_relations.extend(raw_r)
        return collected_entities, collected_relations

    outcomes: list = [None] * len(chunks)
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = {i: pool.submit(run_chunk, c) for i, c in enumerate(chunks)}
            for i, future in futures.items():
                try:
                    outcomes[i] = future.result()
                except GatewayError:
                    outcomes[i] = None
    else:
        for i, chunk in enumerate(chunks):
            try:
                outcomes[i] = run_chunk(chunk)
            except GatewayError:
                outcomes[i] = None

    per_chunk = []
    failed = []
    for chunk, outcome in zip(chunks, outcomes):
        key = (chunk.doc_id, chunk.seq)
        if outcome is None:
            failed.append(key)
        else:
            per_chunk.append((key, outcome[0], outcome[1]))
    entities, relations = _merge_records(per_chunk)
    return ExtractionResult(entities=entities, relations=relations, failed_chunks=failed)


# --- community detection (Leiden-style) -----------------------------------


def _undirected_edges(relations) -> dict[tuple[str, str], float]:
    edges: dict[tuple[str, str], float] = {}
    for rel in relations:
        key = (min(rel.src, rel.dst), max(rel.src, rel.dst))
        edges[key] = edges.get(key, 0.0) + rel.weight
    return edges


def modularity(member_sets, edges: dict, gamma: float = 1.0) -> float:
    """Newman modularity of a partition over an undirected weight map."""
    m = sum(edges.values())
    if m == 0:
        return 0.0
    degree: dict[str, float] = {}
    for (u, v), w in edges.items():
        degree[u] = degree.get(u, 0.0) + w
        degree[v] = degree.get(v, 0.0) + w
    q = 0.0
    for members in member_sets:
        members = set(members)
        internal = sum(
            w for (u, v), w in edges.items() if u in members and v in members
        )
        total = sum(degree.get(u, 0.0) for u in members)
        q += internal / m - gamma * (total / (2 * m)) ** 2
    return q


class _Graph:
    """Index-based weighted graph for the clustering passes.

    ``self_weight[i]`` holds weight folded inside aggregate node i; degrees
    count it twice, matching the usual modularity convention.
    """

    def __init__(self, n: int):
        self.n = n
        self.adj: list[dict[int, float]] = [dict() for _ in range(n)]
        self.self_weight = [0.0] * n

    def add_edge(self, u: int, v: int, w: float) -> None:
        if u == v:
            self.self_weight[u] += w
            return
        self.adj[u][v] = self.adj[u].get(v, 0.0) + w
        self.adj[v][u] = self.adj[v].get(u, 0.0) + w

    def degree(self, u: int) -> float:
        return sum(self.adj[u].values()) + 2.0 * self.self_weight[u]

    def total_weight(self) -> float:
        return sum(sum(nbrs.values()) for nbrs in self.adj) / 2.0 + sum(
            self.self_weight
        )


_EPS = 1e-12


def _local_move(graph: _Graph, labels: list[int], m: float, gamma: float,
                rng: random.Random) -> bool:
    """Louvain-style greedy node moves; returns True if anything moved."""
    degrees = [graph.degree(u) for u in range(graph.n)]
    tot = {}
    for u, lab in enumerate(labels):
        tot[lab] = tot.get(lab, 0.0) + degrees[u]
    order = list(range(graph.n))
    rng.shuffle(order)
    moved_any = False
    improved = True
    while improved:
        improved = False
        for u in order:
            current = labels[u]
            # link weight from u to each neighboring community
            links: dict[int, float] = {}
            for v, w in graph.adj[u].items():
                links[labels[v]] = links.get(labels[v], 0.0) + w
            tot[current] -= degrees[u]
            base = links.get(current, 0.0) / m - gamma * degrees[u] * tot.get(
                current, 0.0
            ) / (2.0 * m * m)
            best_label = current
            best_gain = base
            for lab in sorted(links):
                if lab == current:
                    continue
                gain = links[lab] / m - gamma * degrees[u] * tot.get(lab, 0.0) / (
                    2.0 * m * m
                )
                if gain > best_gain + _EPS:
                    best_gain = gain
                    best_label = lab
            labels[u] = best_label
            tot[best_label] = tot.get(best_label, 0.0) + degrees[u]
            if best_label != current:
                improved = True
                moved_any = True
    return moved_any


def _refine(graph: _Graph, labels: list[int], m: float, gamma: float,
            rng: random.Random) -> list[int]:
    """Split each community into well-connected sub-communities.

    Every node starts as its own sub-community and may only merge with
    sub-communities inside its local-move community when the merge strictly
    improves modularity.
    """
    degrees = [graph.degree(u) for u in range(graph.n)]
    sub = list(range(graph.n))
    tot = {u: degrees[u] for u in range(graph.n)}
    order = list(range(graph.n))
    rng.shuffle(order)
    for u in order:
        if tot.get(sub[u], 0.0) != degrees[u] or sub[u] != u:
            # u already absorbed into a larger sub-community; keep it stable
            continue
        links: dict[int, float] = {}
        for v, w in graph.adj[u].items():
            if labels[v] == labels[u]:
                links[sub[v]] = links.get(sub[v], 0.0) + w
        best_label = sub[u]
        best_gain = 0.0
        for lab in sorted(links):
            if lab == sub[u]:
                continue
            gain = links[lab] / m - gamma * degrees[u] * tot.get(lab, 0.0) / (
                2.0 * m * m
            )
            if gain > best_gain + _EPS:
                best_gain = gain
                best_label = lab
        if best_label != sub[u]:
            tot[best_label] = tot.get(best_label, 0.0) + degrees[u]
            tot.pop(sub[u], None)
            sub[u] = best_label
    return sub


def _aggregate(graph: _Graph, sub: list[int]) -> tuple[_Graph, list[int], dict]:
    """Collapse sub-communities into super-nodes."""
    ids = sorted(set(sub))
    remap = {lab: i for i, lab in enumerate(ids)}
    agg = _Graph(len(ids))
    for u in range(graph.n):
        agg.self_weight[remap[sub[u]]] += graph.self_weight[u]
    seen = set()
    for u in range(graph.n):
        for v, w in graph.adj[u].items():
            if (v, u) in seen or (u, v) in seen:
                continue
            seen.add((u, v))
            agg.add_edge(remap[sub[u]], remap[sub[v]], w)
    membership = {u: remap[sub[u]] for u in range(graph.n)}
    return agg, ids, membership


def _leiden_once(names: list[str], edges: dict, gamma: float, seed: int) -> list[set]:
    rng = random.Random(seed)
    index = {name: i for i, name in enumerate(names)}
    graph = _Graph(len(names))
    for (u, v), w in edges.items():
        graph.add_edge(index[u], index[v], w)
    m = graph.total_weight()
    # node_of[i] = set of original node indices inside aggregate node i
    node_sets = [{i} for i in range(graph.n)]
    labels = list(range(graph.n))
    for _ in range(50):
        moved = _local_move(graph, labels, m, gamma, rng)
        distinct = len(set(labels))
        if not moved and distinct == graph.n:
            break
        sub = _refine(graph, labels, m, gamma, rng)
        agg, ids, membership = _aggregate(graph, sub)
        # carry each super-node's local-move community into the next round
        new_sets: list[set] = [set() for _ in range(agg.n)]
        new_labels = [0] * agg.n
        for u in range(graph.n):
            target = membership[u]
            new_sets[target] |= node_sets[u]
            new_labels[target] = labels[u]
        # compress the carried labels to contiguous ids
        relabel = {lab: i for i, lab in enumerate(sorted(set(new_labels)))}
        labels = [relabel[lab] for lab in new_labels]
        if agg.n == graph.n:
            break
        graph = agg
        node_sets = new_sets
    communities: dict[int, set] = {}
    for i, lab in enumerate(labels):
        communities.setdefault(lab, set()).update(node_sets[i])
    return [set(names[i] for i in block) for block in communities.values()]


def _canonical_partition(blocks) -> tuple:
    return tuple(sorted(tuple(sorted(block)) for block in blocks))


def detect_communities(entities, relations, cfg: GraphRagConfig) -> list[Community]:
    """Modularity-maximizing partition of the entity graph.

    Runs the Leiden procedure from several seeded restarts and keeps the
    best partition; ties go to the canonically smallest so the result is
    deterministic for a fixed config.
    """
    names = sorted({e.name for e in entities})
    if not names:
        raise EmptyGraph("no entities to cluster")
    edges = _undirected_edges(relations)
    unknown = {u for pair in edges for u in pair} - set(names)
    if unknown:
        raise GraphRagError(f"relations reference unknown entities: {sorted(unknown)}")
    if not edges:
        blocks = [{name} for name in names]
    else:
        linked = {u for pair in edges for u in pair}
        best_blocks = None
        best_q = None
        for r in range(cfg.restarts):
            blocks = _leiden_once(sorted(linked), edges, cfg.resolution, cfg.seed + r)
            q = modularity(blocks, edges, cfg.resolution)
            candidate = _canonical_partition(blocks)
            if (
                best_q is None
                or q > best_q + _EPS
                or (abs(q - best_q) <= _EPS and candidate < _canonical_partition(best_blocks))
            ):
                best_q = q
                best_blocks = blocks
        blocks = list(best_blocks)
        # entities that never appear in a relation stand alone
        blocks.extend({name} for name in names if name not in linked)
    ordered = sorted(blocks, key=lambda block: min(block))
    return [
        Community(id=i, members=frozenset(block)) for i, block in enumerate(ordered)
    ]


# --- summaries and answering ----------------------------------------------


def _entity_degrees(relations) -> dict[str, float]:
    degree: dict[str, float] = {}
    for rel in relations:
        degree[rel.src] = degree.get(rel.src, 0.0) + rel.weight
        degree[rel.dst] = degree.get(rel.dst, 0.0) + rel.weight
    return degree


def summarize_communities(
    communities, entities, relations, backend: Backend, cfg: GraphRagConfig
) -> tuple[list[Community], list[int]]:
    """One summary call per community; failures recorded, others proceed."""
    by_name = {e.name: e for e in entities}
    degree = _entity_degrees(relations)
    summarized = []
    failures = []
    for community in communities:
        members = sorted(
            community.members, key=lambda name: (-degree.get(name, 0.0), name)
        )[: cfg.max_community_size]
        kept = set(members)
        entity_lines = "\n".join(
            f"{name} ({by_name[name].etype or 'entity'}): {by_name[name].description}"
            if name in by_name
            else name
            for name in members
        )
        relation_lines = "\n".join(
            f"{rel.src} -> {rel.dst} (weight {rel.weight:g}): {rel.description}"
            for rel in relations
            if rel.src in kept and rel.dst in kept
        )
        prompt = community_summary_prompt(entity_lines, relation_lines)
        try:
            reply = backend.chat([("user", prompt.text)])
        except GatewayError:
            failures.append(community.id)
            summarized.append(community)
            continue
        summarized.append(replace(community, summary=reply.text))
    return summarized, failures


def select_communities(query: str, communities, backend: Backend,
                       top_m: int | None = None) -> list[Community]:
    """Rank summarized communities by query relevance; default keeps all."""
    pool = [c for c in communities if c.summary]
    if not pool:
        raise EmptyGraph("no summarized communities")
    if top_m is None or top_m >= len(pool):
        return sorted(pool, key=lambda c: c.id)
    [query_vec] = backend.embed([query])
    summary_vecs = backend.embed([c.summary for c in pool])
    scored = sorted(
        zip(pool, summary_vecs),
        key=lambda pair: (-cosine(query_vec, pair[1]), pair[0].id),
    )
    kept = [c for c, _vec in scored[:top_m]]
    return sorted(kept, key=lambda c: c.id)


def graph_answer(
    query: str,
    communities,
    backend: Backend,
    top_m: int | None = None,
    parallel: int = 1,
) -> str:
    """Map over community summaries, then reduce partials into one answer."""
    selected = select_communities(query, communities, backend, top_m)

    def run_map(community: Community) -> str:
        prompt = graph_map_prompt(community.summary, query)
        return backend.chat([("user", prompt.text)]).text

    partials: list = [None] * len(selected)
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = {i: pool.submit(run_map, c) for i, c in enumerate(selected)}
            for i, future in futures.items():
                try:
                    partials[i] = future.result()
                except GatewayError:
                    partials[i] = None
    else:
        for i, community in enumerate(selected):
            try:
                partials[i] = run_map(community)
            except GatewayError:
                partials[i] = None

    kept = [p for p in partials if p is not None]
    if not kept:
        raise AllMapsFailed(f"all {len(selected)} map calls failed")
    prompt = graph_reduce_prompt(kept, query)
    return backend.chat([("user", prompt.text)]).text


# --- persistence ----------------------------------------------------------


def save_index(directory, entities, relations, communities) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "entities.json").write_text(
        json.dumps(
            [
                {
                    "name": e.name,
                    "etype": e.etype,
                    "description": e.description,
                    "source_chunks": [list(s) for s in e.source_chunks],
                }
                for e in entities
            ],
            indent=2,
            ensure_ascii=False,
        ),
        encoding="utf-8",
    )
    (directory / "relations.json").write_text(
        json.dumps(
            [
                {
                    "src": r.src,
                    "dst": r.dst,
                    "weight": r.weight,
                    "description": r.description,
                }
                for r in relations
            ],
            indent=2,
            ensure_ascii=False,
        ),
        encoding="utf-8",
    )
    (directory / "communities.json").write_text(
        json.dumps(
            [{"id": c.id, "members": sorted(c.members)} for c in communities],
            indent=2,
            ensure_ascii=False,
        ),
        encoding="utf-8",
    )
    (directory / "summaries.json").write_text(
        json.dumps(
            {str(c.id): c.summary for c in communities if c.summary},
            indent=2,
            ensure_ascii=False,
        ),
        encoding="utf-8",
    )


def load_index(directory) -> tuple[list[Entity], list[Relation], list[Community]]:
    directory = Path(directory)
    try:
        raw_entities = json.loads((directory / "entities.json").read_text("utf-8"))
        raw_relations = json.loads((directory / "relations.json").read_text("utf-8"))
        raw_communities = json.loads(
            (directory / "communities.json").read_text("utf-8")
        )
        raw_summaries = json.loads((directory / "summaries.json").read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BadIndex(f"cannot load index from {directory}: {exc}") from exc
    try:
        entities = [
            Entity(
                name=e["name"],
                etype=e.get("etype", ""),
                description=e.get("description", ""),
                source_chunks=tuple(
                    (doc, int(seq)) for doc, seq in e.get("source_chunks", [])
                ),
            )
            for e in raw_entities
        ]
        relations = [
            Relation(
                src=r["src"],
                dst=r["dst"],
                weight=float(r["weight"]),
                description=r.get("description", ""),
            )
            for r in raw_relations
        ]
        communities = [
            Community(
                id=int(c["id"]),
                members=frozenset(c["members"]),
                summary=raw_summaries.get(str(c["id"])),
            )
            for c in raw_communities
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise BadIndex(f"malformed index payload: {exc}") from exc
    return entities, relations, communities
