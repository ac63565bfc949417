"""Localized evidence subgraph: triple storage, alias merging, path discovery.

The graph is built from per-passage triples plus alias groups, with
endpoints rewritten to canonical names via union-find and text
normalization. Path discovery is a deterministic search for either a
sequential chain from a question entity to the answer or a parallel
comparison structure; its absence marks the instance as noise.
LocalizedKG is immutable after build and safe to share across threads.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .textnorm import normalize

MAX_HOPS = 6  # benchmark questions are <=4 hops; bound guarantees termination

_STOPWORDS = frozenset(
    "of in on at by to the a an is was are were for from did do does and or "
    "his her its their what which where when who whose whom how".split()
)


def canonical_key(text: str) -> str:
    return normalize(text)


def content_tokens(text: str) -> frozenset[str]:
    return frozenset(t for t in normalize(text).split() if t not in _STOPWORDS)


class _SynonymTable:
    def __init__(self) -> None:
        raw = json.loads(
            resources.files("hopcheck.assets")
            .joinpath("predicate_synonyms.json")
            .read_text("utf-8")
        )
        self._class_of: dict[str, int] = {}
        for class_id, group in enumerate(raw["groups"]):
            for form in group:
                self._class_of[self._norm(form)] = class_id

    @staticmethod
    def _norm(predicate: str) -> str:
        toks = sorted(t for t in normalize(predicate.replace("_", " ")).split() if t not in _STOPWORDS)
        return " ".join(toks)

    def predicate_class(self, predicate: str) -> str:
        norm = self._norm(predicate)
        class_id = self._class_of.get(norm)
        return f"syn:{class_id}" if class_id is not None else f"lit:{norm}"


_SYNONYMS = _SynonymTable()


def predicate_class(predicate: str) -> str:
    """Equivalence class key for semantic predicate matching."""
    return _SYNONYMS.predicate_class(predicate)


def predicates_match(a: str, b: str) -> bool:
    return predicate_class(a) == predicate_class(b)


def answer_matches(answer: str, node_label: str) -> bool:
    """Normalized containment match, token-aligned in either direction.

    Benchmark answers vary in granularity: gold "Karachi, Pakistan"
    matches the node "Karachi".
    """
    a = normalize(answer).split()
    n = normalize(node_label).split()
    if not a or not n:
        return False
    if a == n:
        return True
    shorter, longer = (a, n) if len(a) <= len(n) else (n, a)
    return any(longer[i : i + len(shorter)] == shorter for i in range(len(longer) - len(shorter) + 1))


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str
    source_passage: int = 0

    def __post_init__(self) -> None:
        if not (self.head.strip() and self.relation.strip() and self.tail.strip()):
            raise ValueError("triple slots must be non-empty")

    def as_list(self) -> list[str]:
        return [self.head, self.relation, self.tail]


@dataclass(frozen=True)
class AliasGroup:
    members: frozenset[str]
    canonical: str

    def __post_init__(self) -> None:
        if self.canonical not in self.members:
            raise ValueError("canonical must be one of the members")
        if len(self.members) < 2:
            raise ValueError("explicit alias groups need at least 2 members")


class OverlappingAliasGroupsError(ValueError):
    def __init__(self, entity: str):
        super().__init__(f"entity {entity!r} appears in more than one alias group")
        self.entity = entity


@dataclass(frozen=True)
class Edge:
    head: str  # canonical labels
    relation: str
    tail: str
    sources: tuple[int, ...]

    def triple(self) -> Triple:
        return Triple(self.head, self.relation, self.tail, self.sources[0])


@dataclass(frozen=True)
class LocalizedKG:
    triples: tuple[Triple, ...]  # canonicalized, deduplicated
    resolution: tuple[AliasGroup, ...]
    nodes: dict[str, str] = field(default_factory=dict)  # key -> display label
    edges: tuple[Edge, ...] = ()
    adjacency: dict[str, tuple[tuple[str, str, str], ...]] = field(default_factory=dict)
    # adjacency[key] = ((neighbor_key, relation, edge_id), ...) both directions

    def edge_between(self, a: str, b: str) -> list[Edge]:
        return [e for e in self.edges if {canonical_key(e.head), canonical_key(e.tail)} == {a, b}]

    def degree(self, key: str) -> int:
        return len({n for n, _, _ in self.adjacency.get(key, ())})

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"head": e.head, "relation": e.relation, "tail": e.tail, "sources": list(e.sources)},
                ensure_ascii=False,
            )
            for e in self.edges
        ]
        return "\n".join(lines)


class PathPattern(str, Enum):
    SEQUENTIAL = "Sequential"
    PARALLEL = "Parallel"
    MIXED = "Mixed"


@dataclass(frozen=True)
class PathVerdict:
    is_valid: bool
    reasoning_path: tuple[Triple, ...]
    pattern: PathPattern
    explanation: str

    def to_dict(self) -> dict:
        return {
            "is_valid": self.is_valid,
            "reasoning_path": [t.as_list() for t in self.reasoning_path],
            "pattern": self.pattern.value,
            "explanation": self.explanation,
        }


class NoiseLabel(str, Enum):
    GROUNDED = "Grounded"
    MISSING_EVIDENCE = "MissingEvidence"
    ENTITY_CONFLATION = "EntityConflation"
    WRONG_ANSWER = "WrongAnswer"
    AMBIGUOUS = "Ambiguous"


def build_kg(triples: list[Triple], groups: list[AliasGroup]) -> LocalizedKG:
    """Canonicalize endpoints, merge aliases, deduplicate edges.

    Idempotent: rebuilding from the output triples with the same groups
    is a fixed point.
    """
    rep_label: dict[str, str] = {}  # canonical key -> group canonical label
    seen_in_group: dict[str, str] = {}
    for group in groups:
        for member in group.members:
            key = canonical_key(member)
            if key in seen_in_group and seen_in_group[key] != canonical_key(group.canonical):
                raise OverlappingAliasGroupsError(member)
            seen_in_group[key] = canonical_key(group.canonical)
    member_to_canonical: dict[str, str] = {}
    for group in groups:
        for member in group.members:
            member_to_canonical[canonical_key(member)] = group.canonical

    labels: dict[str, str] = {}

    def resolve(surface: str) -> tuple[str, str]:
        canon = member_to_canonical.get(canonical_key(surface), surface)
        key = canonical_key(canon)
        label = labels.setdefault(key, canon)
        return key, label

    dedup: dict[tuple[str, str, str], dict] = {}
    for t in triples:
        hk, hl = resolve(t.head)
        tk, tl = resolve(t.tail)
        pk = canonical_key(t.relation)
        entry = dedup.setdefault(
            (hk, pk, tk),
            {"head": hl, "relation": t.relation, "tail": tl, "sources": []},
        )
        if t.source_passage not in entry["sources"]:
            entry["sources"].append(t.source_passage)

    edges = tuple(
        Edge(head=e["head"], relation=e["relation"], tail=e["tail"], sources=tuple(sorted(e["sources"])))
        for e in dedup.values()
    )
    canon_triples = tuple(
        Triple(e.head, e.relation, e.tail, src) for e in edges for src in e.sources
    )

    adjacency: dict[str, list[tuple[str, str, str]]] = {}
    for i, e in enumerate(edges):
        hk, tk = canonical_key(e.head), canonical_key(e.tail)
        edge_id = str(i)
        adjacency.setdefault(hk, []).append((tk, e.relation, edge_id))
        adjacency.setdefault(tk, []).append((hk, e.relation, edge_id))
    frozen_adj = {k: tuple(sorted(v)) for k, v in adjacency.items()}

    return LocalizedKG(
        triples=canon_triples,
        resolution=tuple(groups),
        nodes=dict(labels),
        edges=edges,
        adjacency=frozen_adj,
    )


def _match_question_entities(kg: LocalizedKG, question_entities: set[str]) -> list[str]:
    """Question entities map to nodes by normalized equality (aliases included)."""
    member_keys: dict[str, str] = {}
    for group in kg.resolution:
        for member in group.members:
            member_keys[canonical_key(member)] = canonical_key(group.canonical)
    matched = set()
    for entity in question_entities:
        key = canonical_key(entity)
        key = member_keys.get(key, key)
        if key in kg.adjacency:
            matched.add(key)
    return sorted(matched)


def _answer_node_keys(kg: LocalizedKG, answer: str) -> set[str]:
    return {k for k, label in kg.nodes.items() if k in kg.adjacency and answer_matches(answer, label)}


def _simple_paths(
    kg: LocalizedKG, start: str, max_hops: int = MAX_HOPS
) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """All simple paths from start: (node sequence, edge-id sequence).

    Deterministic: neighbors are expanded in sorted order, so paths come
    out in lexicographic node-sequence order within each length.
    """
    out: list[tuple[tuple[str, ...], tuple[str, ...]]] = []

    def walk(node: str, nodes: tuple[str, ...], edge_ids: tuple[str, ...]) -> None:
        if len(edge_ids) >= max_hops:
            return
        for neighbor, _rel, edge_id in kg.adjacency.get(node, ()):
            if neighbor in nodes:
                continue
            path = (nodes + (neighbor,), edge_ids + (edge_id,))
            out.append(path)
            walk(neighbor, *path)

    walk(start, (start,), ())
    return out


def _path_triples(kg: LocalizedKG, edge_ids: tuple[str, ...]) -> tuple[Triple, ...]:
    return tuple(kg.edges[int(i)].triple() for i in edge_ids)


_YEAR_RE = re.compile(r"\b(1[0-9]{3}|20[0-9]{2})\b")
_NUMBER_RE = re.compile(r"^-?[\d,]+(?:\.\d+)?$")
_MONTHS = {
    m: i + 1
    for i, m in enumerate(
        "january february march april may june july august september october november december".split()
    )
}


def parse_orderable(label: str) -> tuple | None:
    """Parse a node label as a comparable date or number, if possible."""
    text = label.strip()
    iso = re.match(r"^(\d{4})-(\d{1,2})-(\d{1,2})$", text)
    if iso:
        return ("date", int(iso.group(1)), int(iso.group(2)), int(iso.group(3)))
    if _NUMBER_RE.match(text):
        return ("num", float(text.replace(",", "")))
    tokens = re.findall(r"[A-Za-z]+|\d+", text.lower())
    year = month = day = None
    for tok in tokens:
        if tok in _MONTHS:
            month = _MONTHS[tok]
        elif tok.isdigit():
            if len(tok) == 4:
                year = int(tok)
            elif int(tok) <= 31 and day is None:
                day = int(tok)
    if year is not None:
        return ("date", year, month or 0, day or 0)
    return None


def _is_pure_temporal(label: str) -> bool:
    stripped = re.sub(r"[\s,./-]", "", label)
    return bool(stripped) and stripped.replace("s", "").isdigit()


@dataclass(frozen=True)
class _Branch:
    pred_class: str
    terminal_key: str
    edge_ids: tuple[str, ...]
    nodes: tuple[str, ...]


def _branches(kg: LocalizedKG, entity_key: str, other_entities: frozenset[str]) -> list[_Branch]:
    """Attribute branches from one compared entity.

    Paths through another compared entity are excluded: a chain that
    reaches the attribute via the other side of the comparison is not
    independent evidence for this side.
    """
    result = []
    for nodes, edge_ids in _simple_paths(kg, entity_key):
        if any(n in other_entities for n in nodes[1:]):
            continue
        last_edge = kg.edges[int(edge_ids[-1])]
        result.append(
            _Branch(
                pred_class=predicate_class(last_edge.relation),
                terminal_key=nodes[-1],
                edge_ids=edge_ids,
                nodes=nodes,
            )
        )
    return result


def _parallel_assignments(
    kg: LocalizedKG, entity_keys: list[str]
) -> list[dict[str, list[_Branch]]]:
    """Per predicate class: each entity's branches ending in that class.

    Only classes covered by every compared entity qualify.
    """
    per_entity = {
        e: _branches(kg, e, frozenset(entity_keys) - {e}) for e in entity_keys
    }
    classes = None
    for branches in per_entity.values():
        cls = {b.pred_class for b in branches}
        classes = cls if classes is None else classes & cls
    if not classes:
        return []
    out = []
    for pred_class in sorted(classes):
        out.append(
            {e: [b for b in per_entity[e] if b.pred_class == pred_class] for e in entity_keys}
        )
    return out


def find_grounded_path(
    kg: LocalizedKG, question_entities: set[str], answer: str
) -> PathVerdict:
    """Deterministic grounded-path discovery.

    Sequential: shortest simple chain (<=6 hops) from a question entity
    to a node matching the answer; ties broken by lexicographic
    canonical-node order. Parallel: a comparison structure where every
    compared entity reaches an attribute through semantically matching
    predicates and the attribute values decide the answer (equality for
    yes/no, date/number ordering otherwise). Undecidable comparisons are
    reported invalid with an "ambiguous" explanation marker.
    """
    if not question_entities:
        raise ValueError("question_entities must be non-empty")
    if not normalize(answer):
        raise ValueError("answer text normalizes to empty")

    entity_keys = _match_question_entities(kg, question_entities)
    answer_keys = _answer_node_keys(kg, answer)

    # Sequential: iterative deepening keeps the first (= shortest, then
    # lexicographically smallest) hit.
    if entity_keys and answer_keys:
        all_paths: list[tuple[tuple[str, ...], tuple[str, ...]]] = []
        for start in entity_keys:
            all_paths.extend(
                p for p in _simple_paths(kg, start) if p[0][-1] in answer_keys
            )
        if all_paths:
            best = min(all_paths, key=lambda p: (len(p[1]), p[0]))
            return PathVerdict(
                is_valid=True,
                reasoning_path=_path_triples(kg, best[1]),
                pattern=PathPattern.SEQUENTIAL,
                explanation=(
                    f"Connected chain of {len(best[1])} triple(s) from a question "
                    f"entity to a node matching the answer."
                ),
            )

    ambiguous = False
    answer_norm = normalize(answer)
    if len(entity_keys) >= 2:
        boolean = answer_norm in ("yes", "no")
        answer_is_entity = any(answer_matches(answer, e) for e in question_entities)
        for assignment in _parallel_assignments(kg, entity_keys):
            branch_sets = [assignment[e] for e in entity_keys]
            if boolean:
                if answer_norm == "yes":
                    chosen = _choose_all_equal(branch_sets)
                else:
                    chosen = _choose_not_all_equal(branch_sets)
                if chosen is not None:
                    return _parallel_verdict(kg, chosen, "equality comparison of attribute values")
            elif answer_is_entity:
                chosen = _choose_ordered_distinct(kg, branch_sets)
                if chosen is None:
                    ambiguous = True
                else:
                    return _parallel_verdict(
                        kg, chosen, "date/number ordering of the compared attribute values"
                    )

    if ambiguous:
        return PathVerdict(
            is_valid=False,
            reasoning_path=(),
            pattern=PathPattern.PARALLEL,
            explanation="ambiguous: comparison attributes found but values are not orderable",
        )
    if not entity_keys:
        reason = "no question entity matches a graph node"
    elif not answer_keys and answer_norm not in ("yes", "no"):
        reason = "no graph node matches the answer"
    else:
        reason = "no continuous chain or comparison structure reaches the answer"
    return PathVerdict(
        is_valid=False, reasoning_path=(), pattern=PathPattern.SEQUENTIAL, explanation=reason
    )


def _dedup_by_terminal(branch_sets: list[list[_Branch]]) -> list[list[_Branch]]:
    """One representative branch per terminal node, smallest terminal first."""
    out = []
    for bs in branch_sets:
        by_terminal: dict[str, _Branch] = {}
        for b in sorted(bs, key=lambda b: (b.terminal_key, len(b.edge_ids), b.nodes)):
            by_terminal.setdefault(b.terminal_key, b)
        out.append([by_terminal[k] for k in sorted(by_terminal)])
    return out


def _choose_all_equal(branch_sets: list[list[_Branch]]) -> list[_Branch] | None:
    """Branches whose terminal values all coincide ("yes" comparisons)."""
    common = set.intersection(*[{b.terminal_key for b in bs} for bs in branch_sets])
    if not common:
        return None
    target = sorted(common)[0]
    reps = _dedup_by_terminal(branch_sets)
    return [next(b for b in bs if b.terminal_key == target) for bs in reps]


def _choose_not_all_equal(branch_sets: list[list[_Branch]]) -> list[_Branch] | None:
    """Branches whose terminal values are not all identical ("no" comparisons).

    Feasible exactly when the union of reachable terminal values has
    at least two members.
    """
    reps = _dedup_by_terminal(branch_sets)
    union = {b.terminal_key for bs in reps for b in bs}
    if len(union) < 2:
        return None
    picks = [bs[0] for bs in reps]
    if len({p.terminal_key for p in picks}) > 1:
        return picks
    for i, bs in enumerate(reps):
        alt = next((b for b in bs if b.terminal_key != picks[i].terminal_key), None)
        if alt is not None:
            picks[i] = alt
            return picks
    return None


def _choose_ordered_distinct(
    kg: LocalizedKG, branch_sets: list[list[_Branch]]
) -> list[_Branch] | None:
    """Pick one branch per entity with pairwise-distinct orderable values.

    Exhaustive over distinct terminal values per entity, so it finds an
    assignment whenever one exists.
    """
    orderable_sets: list[list[tuple[tuple, _Branch]]] = []
    for bs in _dedup_by_terminal(branch_sets):
        values = []
        for b in bs:
            value = parse_orderable(kg.nodes[b.terminal_key])
            if value is not None:
                values.append((value, b))
        if not values:
            return None
        orderable_sets.append(values)
    for combo in itertools.product(*orderable_sets):
        values = [v for v, _ in combo]
        if all(values[i] != values[j] for i in range(len(values)) for j in range(i + 1, len(values))):
            return [b for _, b in combo]
    return None


def _parallel_verdict(kg: LocalizedKG, branches: list[_Branch], how: str) -> PathVerdict:
    path: list[Triple] = []
    for b in branches:
        path.extend(_path_triples(kg, b.edge_ids))
    return PathVerdict(
        is_valid=True,
        reasoning_path=tuple(path),
        pattern=PathPattern.PARALLEL,
        explanation=f"Parallel comparison: {how}.",
    )


def _question_content_tokens(question: str) -> frozenset[str]:
    return content_tokens(question)


def _complete_contradicting_chain(
    kg: LocalizedKG, entity_keys: list[str], question: str, answer: str
) -> bool:
    """A chain from a question entity ends at a leaf whose final relation
    echoes the question but whose value contradicts the gold answer."""
    q_tokens = _question_content_tokens(question)
    wants_place = bool(re.search(r"\bwhere\b|\bplace\b|\bcity\b", question.lower()))
    wants_time = bool(re.search(r"\bwhen\b|\byear\b|\bdate\b", question.lower()))
    for start in entity_keys:
        for nodes, edge_ids in _simple_paths(kg, start):
            terminal = nodes[-1]
            if kg.degree(terminal) > 1:
                continue
            last_edge = kg.edges[int(edge_ids[-1])]
            pred_tokens = content_tokens(last_edge.relation.replace("_", " "))
            if not (pred_tokens & q_tokens):
                continue
            label = kg.nodes[terminal]
            if answer_matches(answer, label):
                continue
            if wants_place and _is_pure_temporal(label):
                continue
            if wants_time and parse_orderable(label) is None:
                continue
            return True
    return False


def _conflation_candidates(kg: LocalizedKG) -> list[tuple[str, str]]:
    keys = sorted(k for k in kg.adjacency)
    pairs = []
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            if len(content_tokens(kg.nodes[a]) & content_tokens(kg.nodes[b])) >= 2:
                pairs.append((a, b))
    return pairs


def _merged_kg(kg: LocalizedKG, a: str, b: str) -> LocalizedKG:
    group = AliasGroup(members=frozenset({kg.nodes[a], kg.nodes[b]}), canonical=kg.nodes[a])
    groups = list(kg.resolution)
    merged_members = set(group.members)
    kept = []
    for g in groups:
        if g.members & merged_members:
            merged_members |= g.members
        else:
            kept.append(g)
    kept.append(AliasGroup(members=frozenset(merged_members), canonical=kg.nodes[a]))
    return build_kg(list(kg.triples), kept)


def classify_noise(
    verdict: PathVerdict,
    kg: LocalizedKG,
    question: str,
    question_entities: set[str],
    gold_answers: tuple[str, ...],
) -> NoiseLabel:
    """Assign a noise label to an unverifiable instance.

    Grounded iff the verdict is valid; WrongAnswer when a complete chain
    (or a completed comparison) contradicts the gold answer;
    EntityConflation when merging two lexically similar nodes would make
    the instance verifiable; Ambiguous for undecidable comparisons;
    MissingEvidence otherwise.
    """
    if verdict.is_valid:
        return NoiseLabel.GROUNDED

    answer = gold_answers[0]
    entity_keys = _match_question_entities(kg, question_entities)

    # A boolean comparison that completed but with the opposite outcome.
    answer_norm = normalize(answer)
    if answer_norm in ("yes", "no"):
        flipped = "no" if answer_norm == "yes" else "yes"
        if find_grounded_path(kg, question_entities, flipped).is_valid:
            return NoiseLabel.WRONG_ANSWER

    gold_in_graph = any(_answer_node_keys(kg, g) for g in gold_answers)
    if (
        entity_keys
        and not gold_in_graph
        and _complete_contradicting_chain(kg, entity_keys, question, answer)
    ):
        return NoiseLabel.WRONG_ANSWER

    if gold_in_graph:
        for a, b in _conflation_candidates(kg):
            merged = _merged_kg(kg, a, b)
            if find_grounded_path(merged, question_entities, answer).is_valid:
                return NoiseLabel.ENTITY_CONFLATION

    if verdict.explanation.startswith("ambiguous"):
        return NoiseLabel.AMBIGUOUS

    return NoiseLabel.MISSING_EVIDENCE
