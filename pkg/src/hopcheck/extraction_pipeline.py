"""Offline benchmark verification: extract, glean, resolve, verify.

Gold passages are mined for triples (with a bounded gleaning pass for
recall), entity surface forms are merged into alias groups, and the
resulting localized graph is searched for a grounded reasoning path.
Instances without one receive a noise label; corpus-level counts feed
the reported noise statistics.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .data_model import QAInstance
from .kg_graph import (
    AliasGroup,
    LocalizedKG,
    NoiseLabel,
    PathPattern,
    PathVerdict,
    Triple,
    build_kg,
    classify_noise,
    find_grounded_path,
    parse_orderable,
)
from .llm_client import (
    Backend,
    ParseFailure,
    build_request,
    load_prompt,
    parse_json_list,
    parse_structured_verdict,
)
from .textnorm import normalize

MAX_GLEANING_ROUNDS = 2

VERIFY_MODES = ("deterministic", "llm", "cross-check")

_PRONOUNS = frozenset(
    "he she it they them him her his hers its their theirs this that these "
    "those i we you who whom which someone something".split()
)

# Generic role/category words the resolver must never treat as entities.
_GENERIC_TERMS = frozenset(
    "president mother father son daughter band album film movie company "
    "city country actor actress director singer writer author person "
    "group team school university".split()
)


def _is_pronoun(text: str) -> bool:
    return normalize(text) in _PRONOUNS


def _coerce_triples(items: list, source_passage: int) -> tuple[list[Triple], int]:
    """Keep well-formed [subject, predicate, object] rows; count rejects."""
    kept: list[Triple] = []
    rejected = 0
    for item in items:
        if (
            not isinstance(item, (list, tuple))
            or len(item) != 3
            or not all(isinstance(s, str) and s.strip() for s in item)
        ):
            rejected += 1
            continue
        head, relation, tail = (s.strip() for s in item)
        if _is_pronoun(head) or _is_pronoun(tail):
            rejected += 1
            continue
        kept.append(Triple(head, relation, tail, source_passage))
    return kept, rejected


def _triple_key(t: Triple) -> tuple[str, str, str]:
    return (normalize(t.head), normalize(t.relation.replace("_", " ")), normalize(t.tail))


def _triples_json(triples: list[Triple]) -> str:
    return json.dumps([t.as_list() for t in triples], ensure_ascii=False)


@dataclass(frozen=True)
class ExtractionResult:
    triples: tuple[Triple, ...]
    calls: int
    gleaning_rounds: int
    rejected: int
    failed_passages: tuple[int, ...]  # passage indices whose output did not parse


def extract_triples(
    backend: Backend, instance: QAInstance, model_id: str = "default"
) -> ExtractionResult:
    """One extraction request per gold passage; malformed outputs are flagged."""
    template = load_prompt("triple_extraction")
    triples: list[Triple] = []
    failed: list[int] = []
    rejected = 0
    calls = 0
    for passage in instance.gold_passages:
        req = build_request(template, model_id=model_id, title=passage.title, body=passage.body)
        resp = backend.complete(req)
        calls += 1
        parsed = parse_json_list(resp.text)
        if isinstance(parsed, ParseFailure):
            failed.append(passage.index)
            continue
        kept, bad = _coerce_triples(parsed, passage.index)
        triples.extend(kept)
        rejected += bad
    return ExtractionResult(
        triples=tuple(triples),
        calls=calls,
        gleaning_rounds=0,
        rejected=rejected,
        failed_passages=tuple(failed),
    )


def glean(
    backend: Backend,
    body: str,
    existing: list[Triple],
    source_passage: int,
    model_id: str = "default",
    max_rounds: int = MAX_GLEANING_ROUNDS,
) -> tuple[list[Triple], int]:
    """Recall pass over one passage: ask for missed triples, at most
    max_rounds times, stopping early once a round adds nothing new."""
    template = load_prompt("gleaning")
    known = {_triple_key(t) for t in existing}
    pool = list(existing)
    added: list[Triple] = []
    rounds = 0
    for _ in range(max_rounds):
        req = build_request(
            template, model_id=model_id, body=body, existing_triples=_triples_json(pool)
        )
        resp = backend.complete(req)
        rounds += 1
        parsed = parse_json_list(resp.text)
        if isinstance(parsed, ParseFailure):
            break
        kept, _bad = _coerce_triples(parsed, source_passage)
        fresh = [t for t in kept if _triple_key(t) not in known]
        if not fresh:
            break
        for t in fresh:
            known.add(_triple_key(t))
        pool.extend(fresh)
        added.extend(fresh)
    return added, rounds


def _entity_surface_forms(triples: list[Triple]) -> list[str]:
    seen: dict[str, str] = {}
    for t in triples:
        for surface in (t.head, t.tail):
            seen.setdefault(normalize(surface), surface)
    return [seen[k] for k in sorted(seen)]


def _groupable(member: str) -> bool:
    norm = normalize(member)
    if not norm or norm in _GENERIC_TERMS:
        return False
    if parse_orderable(member) is not None:
        return False
    return True


def resolve_entities(
    backend: Backend, triples: list[Triple], model_id: str = "default"
) -> tuple[list[AliasGroup], bool]:
    """Single resolution request over all entity surface forms.

    Returned groups are made disjoint by keeping each member's first
    occurrence; generic terms and date/number literals are dropped.
    A parse failure yields no groups and is reported via the flag.
    """
    entities = _entity_surface_forms(triples)
    if not entities:
        return [], True
    template = load_prompt("entity_resolution")
    req = build_request(
        template,
        model_id=model_id,
        entities=json.dumps(entities, ensure_ascii=False),
        context_triples=_triples_json(triples),
    )
    resp = backend.complete(req)
    parsed = parse_json_list(resp.text)
    if isinstance(parsed, ParseFailure):
        return [], False

    groups: list[AliasGroup] = []
    claimed: set[str] = set()
    for raw_group in parsed:
        if not isinstance(raw_group, list):
            continue
        members: list[str] = []
        keys: set[str] = set()
        for member in raw_group:
            if not isinstance(member, str) or not _groupable(member):
                continue
            key = normalize(member)
            if key in claimed or key in keys:
                continue
            members.append(member)
            keys.add(key)
        if len(members) < 2:
            continue
        claimed |= keys
        groups.append(AliasGroup(members=frozenset(members), canonical=members[0]))
    return groups, True


@dataclass(frozen=True)
class InstanceReport:
    instance_id: str
    verdict: PathVerdict
    noise_label: NoiseLabel | None  # None when verification hard-failed
    kg: LocalizedKG
    counters: dict[str, int] = field(default_factory=dict)
    flags: tuple[str, ...] = ()
    alt_verdict: PathVerdict | None = None  # cross-check companion verdict
    disagreement: bool = False

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "verdict": self.verdict.to_dict(),
            "noise_label": self.noise_label.value if self.noise_label else None,
            "counters": dict(self.counters),
            "flags": list(self.flags),
            "alt_verdict": self.alt_verdict.to_dict() if self.alt_verdict else None,
            "disagreement": self.disagreement,
        }


def _question_entities(instance: QAInstance) -> set[str]:
    if instance.question_entities:
        return set(instance.question_entities)
    # No annotated entities: gold passage titles are the best stand-in.
    return {p.title for p in instance.gold_passages}


def _deterministic_verdict(kg: LocalizedKG, instance: QAInstance) -> PathVerdict:
    entities = _question_entities(instance)
    verdict = None
    for answer in instance.gold_answers:
        if not normalize(answer):
            continue
        candidate = find_grounded_path(kg, entities, answer)
        if candidate.is_valid:
            return candidate
        if verdict is None:
            verdict = candidate
    if verdict is None:
        return PathVerdict(False, (), PathPattern.SEQUENTIAL, "no usable gold answer")
    return verdict


def _llm_verdict(
    backend: Backend, kg: LocalizedKG, instance: QAInstance, model_id: str
) -> PathVerdict | None:
    template = load_prompt("path_discovery")
    req = build_request(
        template,
        model_id=model_id,
        question=instance.question,
        answer=instance.gold_answers[0],
        triples=_triples_json([e.triple() for e in kg.edges]),
    )
    resp = backend.complete(req)
    obj = parse_structured_verdict(resp.text, required_keys=("is_valid", "reasoning_path"))
    if isinstance(obj, ParseFailure):
        return None
    path = []
    for item in obj.get("reasoning_path", []):
        if isinstance(item, list) and len(item) == 3 and all(isinstance(s, str) for s in item):
            path.append(Triple(*item))
    return PathVerdict(
        is_valid=bool(obj["is_valid"]),
        reasoning_path=tuple(path),
        pattern=PathPattern.MIXED,
        explanation=str(obj.get("explanation", "")),
    )


def verify_instance(
    backend: Backend,
    instance: QAInstance,
    mode: str = "deterministic",
    model_id: str = "default",
) -> InstanceReport:
    """Full single-instance verification pipeline.

    deterministic: graph search decides validity. llm: a model reads the
    normalized triples and decides. cross-check: both run and any
    validity disagreement is recorded; the deterministic verdict is
    primary.
    """
    if mode not in VERIFY_MODES:
        raise ValueError(f"mode must be one of {VERIFY_MODES}, got {mode!r}")

    extraction = extract_triples(backend, instance, model_id)
    triples = list(extraction.triples)
    gleaning_rounds = 0
    gleaned = 0
    for passage in instance.gold_passages:
        if passage.index in extraction.failed_passages:
            continue
        own = [t for t in triples if t.source_passage == passage.index]
        fresh, rounds = glean(backend, passage.body, own, passage.index, model_id)
        triples.extend(fresh)
        gleaned += len(fresh)
        gleaning_rounds += rounds

    flags = [f"extraction_failed_passage_{i}" for i in extraction.failed_passages]
    counters = {
        "extraction_calls": extraction.calls,
        "gleaning_rounds": gleaning_rounds,
        "gleaned_triples": gleaned,
        "rejected_triples": extraction.rejected,
        "triples": len(triples),
    }

    if not triples:
        empty = build_kg([], [])
        return InstanceReport(
            instance_id=instance.id,
            verdict=PathVerdict(False, (), PathPattern.SEQUENTIAL, "no triples extracted"),
            noise_label=None,
            kg=empty,
            counters=counters,
            flags=tuple(flags + ["unverified"]),
        )

    groups, resolved = resolve_entities(backend, triples, model_id)
    if not resolved:
        flags.append("entity_resolution_unparseable")
    counters["alias_groups"] = len(groups)
    kg = build_kg(triples, groups)

    det = _deterministic_verdict(kg, instance) if mode != "llm" else None
    llm = _llm_verdict(backend, kg, instance, model_id) if mode != "deterministic" else None

    if mode == "llm":
        if llm is None:
            return InstanceReport(
                instance_id=instance.id,
                verdict=PathVerdict(False, (), PathPattern.MIXED, "verdict unparseable"),
                noise_label=None,
                kg=kg,
                counters=counters,
                flags=tuple(flags + ["unverified"]),
            )
        verdict, alt = llm, None
    else:
        verdict, alt = det, llm
        if mode == "cross-check" and llm is None:
            flags.append("llm_verdict_unparseable")

    label = classify_noise(
        verdict,
        kg,
        instance.question,
        _question_entities(instance),
        instance.gold_answers,
    )
    disagreement = alt is not None and alt.is_valid != verdict.is_valid
    return InstanceReport(
        instance_id=instance.id,
        verdict=verdict,
        noise_label=label,
        kg=kg,
        counters=counters,
        flags=tuple(flags),
        alt_verdict=alt,
        disagreement=disagreement,
    )


@dataclass(frozen=True)
class NoiseStats:
    total: int
    noisy: int
    by_label: tuple[tuple[str, int], ...] = ()
    unverified: int = 0

    def __post_init__(self) -> None:
        if self.total < 0 or self.noisy < 0 or self.noisy > self.total:
            raise ValueError("need 0 <= noisy <= total")

    @property
    def ratio(self) -> float:
        return round(self.noisy / self.total, 4) if self.total else 0.0

    @property
    def percent(self) -> float:
        return round(100.0 * self.noisy / self.total, 2) if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "noisy": self.noisy,
            "noise_ratio": self.ratio,
            "noise_percent": self.percent,
            "by_label": dict(self.by_label),
            "unverified": self.unverified,
        }


def corpus_stats(reports: list[InstanceReport]) -> NoiseStats:
    """Corpus noise counts; invariant under report order."""
    labels = Counter()
    unverified = 0
    for report in reports:
        if report.noise_label is None:
            unverified += 1
        else:
            labels[report.noise_label.value] += 1
    noisy = sum(n for label, n in labels.items() if label != NoiseLabel.GROUNDED.value)
    return NoiseStats(
        total=sum(labels.values()),
        noisy=noisy,
        by_label=tuple(sorted(labels.items())),
        unverified=unverified,
    )
