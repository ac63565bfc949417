"""Generator/evaluator feedback loop with bounded retries and a token ledger.

For each step slot the generator proposes one atomic step; in feedback
modes the evaluator returns (error type, diagnosis, guidance) and
erroneous steps are retried with the feedback injected, at most N times
per slot. The loop runs at most K accepted slots; unterminated runs are
closed by a single forced final-answer call. Prompt-token reuse is
tracked per role in an immutable CacheLedger.
"""

from __future__ import annotations

import concurrent.futures
import json
import statistics
from dataclasses import dataclass, field, replace
from enum import Enum

from .data_model import QAInstance
from .llm_client import Backend, ParseFailure, build_request, load_prompt, parse_structured_verdict
from .step_grammar import (
    ReasoningStep,
    StepFormatError,
    StepKind,
    Trajectory,
    _ANSWER_RE,
    append_step,
    parse_step,
    render_step,
    render_trajectory,
)
from .taxonomy import (
    ErrorType,
    Feedback,
    InadmissibleFeedbackError,
    parse_error_type,
    validate_feedback,
)
from .textnorm import rough_token_count


class FeedbackMode(str, Enum):
    NO_FEEDBACK = "none"
    SELF_FEEDBACK = "self"
    EXTERNAL_FEEDBACK = "safe"


@dataclass(frozen=True)
class LoopConfig:
    max_steps: int = 10  # K: accepted-step budget
    max_retries: int = 3  # N: per-slot retry budget
    mode: FeedbackMode = FeedbackMode.EXTERNAL_FEEDBACK
    generator_model: str = "generator"
    evaluator_model: str = "evaluator"

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps (K) must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries (N) must be >= 0")
        if self.mode is FeedbackMode.SELF_FEEDBACK:
            # Self-feedback means the generator judges its own steps.
            object.__setattr__(self, "evaluator_model", self.generator_model)


EVENT_KINDS = (
    "step_proposed",
    "feedback_given",
    "step_accepted",
    "step_rejected",
    "retry_exhausted",
    "answer_forced",
    "terminated",
)


@dataclass(frozen=True)
class LoopEvent:
    kind: str
    slot: int  # accepted-step slot, 1-based; 0 for run-level events
    attempt: int = 0  # attempt index within the slot, 0-based
    detail: str = ""
    error_type: str = ""

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "slot": self.slot,
            "attempt": self.attempt,
            "detail": self.detail,
            "error_type": self.error_type,
        }


@dataclass(frozen=True)
class RoleLedger:
    total_prompt_tokens: int = 0
    cached_prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    estimated_calls: int = 0  # calls whose counts came from the fallback estimator

    def __post_init__(self) -> None:
        if min(self.total_prompt_tokens, self.cached_prompt_tokens, self.completion_tokens) < 0:
            raise ValueError("token counts must be >= 0")
        if self.cached_prompt_tokens > self.total_prompt_tokens:
            raise ValueError("cached cannot exceed total prompt tokens")

    @property
    def computed_prompt_tokens(self) -> int:
        return self.total_prompt_tokens - self.cached_prompt_tokens

    @property
    def savings(self) -> float:
        if self.total_prompt_tokens == 0:
            return 0.0
        return self.cached_prompt_tokens / self.total_prompt_tokens

    @property
    def savings_percent(self) -> float:
        return round(100.0 * self.savings, 1)

    def to_dict(self) -> dict:
        return {
            "total_prompt_tokens": self.total_prompt_tokens,
            "cached_prompt_tokens": self.cached_prompt_tokens,
            "computed_prompt_tokens": self.computed_prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "calls": self.calls,
            "estimated_calls": self.estimated_calls,
            "savings_percent": self.savings_percent,
            "savings_undefined": self.total_prompt_tokens == 0,
        }


@dataclass(frozen=True)
class CacheLedger:
    generator: RoleLedger = field(default_factory=RoleLedger)
    evaluator: RoleLedger = field(default_factory=RoleLedger)

    def role(self, name: str) -> RoleLedger:
        if name == "generator":
            return self.generator
        if name == "evaluator":
            return self.evaluator
        raise KeyError(name)

    @property
    def overall(self) -> RoleLedger:
        return RoleLedger(
            total_prompt_tokens=self.generator.total_prompt_tokens
            + self.evaluator.total_prompt_tokens,
            cached_prompt_tokens=self.generator.cached_prompt_tokens
            + self.evaluator.cached_prompt_tokens,
            completion_tokens=self.generator.completion_tokens
            + self.evaluator.completion_tokens,
            calls=self.generator.calls + self.evaluator.calls,
            estimated_calls=self.generator.estimated_calls + self.evaluator.estimated_calls,
        )

    def merge(self, other: "CacheLedger") -> "CacheLedger":
        return CacheLedger(
            generator=_merge_roles(self.generator, other.generator),
            evaluator=_merge_roles(self.evaluator, other.evaluator),
        )

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "overall": self.overall.to_dict(),
        }


def _merge_roles(a: RoleLedger, b: RoleLedger) -> RoleLedger:
    return RoleLedger(
        total_prompt_tokens=a.total_prompt_tokens + b.total_prompt_tokens,
        cached_prompt_tokens=a.cached_prompt_tokens + b.cached_prompt_tokens,
        completion_tokens=a.completion_tokens + b.completion_tokens,
        calls=a.calls + b.calls,
        estimated_calls=a.estimated_calls + b.estimated_calls,
    )


def update_ledger(
    ledger: CacheLedger,
    role: str,
    usage,
    prefix_estimate: int,
    prompt_estimate: int = 0,
) -> CacheLedger:
    """Accumulate one call into the ledger; monotone per role.

    Backend-reported counts win; otherwise the fixed fallback estimator
    fills in total (prompt_estimate) and cached (prefix_estimate)
    tokens, and the call is marked estimated.
    """
    if min(prefix_estimate, prompt_estimate) < 0:
        raise ValueError("estimates must be >= 0")
    estimated = usage.prompt_tokens == 0
    if estimated:
        total = prompt_estimate
        cached = min(prefix_estimate, total)
    else:
        total = usage.prompt_tokens
        cached = (
            usage.cached_prompt_tokens
            if usage.cached_prompt_tokens > 0
            else min(prefix_estimate, total)
        )
    current = ledger.role(role)
    updated = RoleLedger(
        total_prompt_tokens=current.total_prompt_tokens + total,
        cached_prompt_tokens=current.cached_prompt_tokens + cached,
        completion_tokens=current.completion_tokens + usage.completion_tokens,
        calls=current.calls + 1,
        estimated_calls=current.estimated_calls + (1 if estimated else 0),
    )
    return replace(ledger, **{role: updated})


@dataclass(frozen=True)
class RunRecord:
    instance_id: str
    config: LoopConfig
    trajectory: Trajectory
    answer: str | None  # present iff Terminated or AnswerForced occurred
    events: tuple[LoopEvent, ...]
    ledger: CacheLedger
    generator_calls: int
    evaluator_calls: int
    flags: tuple[str, ...] = ()
    aborted: bool = False

    def __post_init__(self) -> None:
        closed = any(e.kind in ("terminated", "answer_forced") for e in self.events)
        if (self.answer is not None) != closed:
            raise ValueError("answer present iff the run terminated or was forced")

    @property
    def retries(self) -> int:
        return sum(1 for e in self.events if e.kind == "step_rejected")

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "mode": self.config.mode.value,
            "k": self.config.max_steps,
            "n": self.config.max_retries,
            "steps": [
                {
                    "index": s.index,
                    "kind": s.kind.value,
                    "text": s.text,
                    "cited_passage": s.cited_passage,
                    "answer_value": s.answer_value,
                }
                for s in self.trajectory.steps
            ],
            "answer": self.answer,
            "events": [e.to_dict() for e in self.events],
            "ledger": self.ledger.to_dict(),
            "generator_calls": self.generator_calls,
            "evaluator_calls": self.evaluator_calls,
            "flags": list(self.flags),
            "aborted": self.aborted,
        }


def render_passages(instance: QAInstance) -> str:
    return "\n\n".join(
        f"Passage {p.index} ({p.title}): {p.body}" for p in instance.passages
    )


def _render_feedback(fb: Feedback | None) -> str:
    if fb is None:
        return "(none)"
    return (
        f"Error Type: {fb.error_type.value}\n"
        f"Diagnosis: {fb.diagnosis}\n"
        f"Guidance: {fb.guidance}"
    )


def _format_feedback_for(code_message: str, slot: int) -> Feedback:
    # A malformed step maps onto Inefficiency: it performs no valid
    # single KG operation.
    return Feedback(
        error_type=ErrorType.INEFFICIENCY,
        diagnosis=f"Step {slot} is not a well-formed atomic step: {code_message}.",
        guidance=(
            f"Emit exactly one step in the form 'Step {slot}: <content> (<kind>)' "
            "with one citation for Attribution steps and the ####ANSWER: marker "
            "for the Final Answer step."
        ),
    )


def _common_prefix_tokens(previous: str | None, current: str) -> int:
    if not previous:
        return 0
    limit = min(len(previous), len(current))
    i = 0
    while i < limit and previous[i] == current[i]:
        i += 1
    return rough_token_count(current[:i])


def _synthesize_step(raw: str, slot: int) -> ReasoningStep:
    text = " ".join(raw.split()) or "(empty generator output)"
    return ReasoningStep(index=slot, kind=StepKind.LOGICAL, text=text)


class _LedgerTracker:
    """Mutable run-scope wrapper over the immutable ledger updates."""

    def __init__(self) -> None:
        self.ledger = CacheLedger()
        self._last_prompt: dict[str, str] = {}

    def record(self, role: str, prompt: str, usage) -> None:
        prefix = _common_prefix_tokens(self._last_prompt.get(role), prompt)
        self.ledger = update_ledger(
            self.ledger, role, usage, prefix_estimate=prefix,
            prompt_estimate=rough_token_count(prompt),
        )
        self._last_prompt[role] = prompt


def _evaluate(
    evaluator: Backend,
    cfg: LoopConfig,
    instance: QAInstance,
    prefix: tuple[ReasoningStep, ...],
    step: ReasoningStep,
    tracker: _LedgerTracker,
) -> tuple[Feedback | None, str]:
    """One evaluator call; (feedback, flag). None feedback = unusable verdict."""
    template = load_prompt("evaluation")
    req = build_request(
        template,
        model_id=cfg.evaluator_model,
        question=instance.question,
        passages=render_passages(instance),
        previous_steps=render_trajectory(prefix),
        step=render_step(step),
    )
    resp = evaluator.complete(req)
    tracker.record("evaluator", req.messages[0].content, resp.usage)
    obj = parse_structured_verdict(
        resp.text, required_keys=("error_type", "diagnosis", "guidance")
    )
    if isinstance(obj, ParseFailure):
        return None, f"evaluator_unparseable:{obj.reason}"
    try:
        fb = Feedback(
            error_type=parse_error_type(str(obj["error_type"])),
            diagnosis=str(obj["diagnosis"]) or "(empty)",
            guidance=str(obj["guidance"]) or "(empty)",
        )
        validate_feedback(fb, step)
    except (ValueError, InadmissibleFeedbackError) as exc:
        return None, f"evaluator_invalid:{exc}"
    return fb, ""


def _force_answer(
    generator: Backend,
    cfg: LoopConfig,
    instance: QAInstance,
    traj: Trajectory,
    tracker: _LedgerTracker,
) -> str:
    template = load_prompt("final_answer")
    req = build_request(
        template,
        model_id=cfg.generator_model,
        question=instance.question,
        passages=render_passages(instance),
        previous_steps=render_trajectory(traj.steps),
    )
    resp = generator.complete(req)
    tracker.record("generator", req.messages[0].content, resp.usage)
    match = _ANSWER_RE.search(resp.text)
    if match:
        value = match.group(1).strip()
        # Strip a trailing kind tag if the model copied the full step form.
        value = value.removesuffix("(Final Answer)").strip()
        if value:
            return value
    return " ".join(resp.text.split())


def run_instance(
    cfg: LoopConfig,
    instance: QAInstance,
    generator: Backend,
    evaluator: Backend | None = None,
) -> RunRecord:
    """Run the step-level loop on one instance.

    Slot accounting: K counts accepted steps; rejected attempts consume
    only the slot's retry budget. Retry exhaustion accepts the last
    attempt flagged rather than skipping, which would break the strict
    step numbering required by the step prompt.
    """
    if evaluator is None:
        evaluator = generator
    tracker = _LedgerTracker()
    template = load_prompt("step_generation")
    traj = Trajectory(instance_id=instance.id)
    events: list[LoopEvent] = []
    flags: list[str] = []
    gen_calls = 0
    ev_calls = 0
    aborted = False

    try:
        for slot in range(1, cfg.max_steps + 1):
            if traj.terminated:
                break
            feedback: Feedback | None = None
            accepted: ReasoningStep | None = None
            last_step: ReasoningStep | None = None
            last_raw = ""
            for attempt in range(cfg.max_retries + 1):
                req = build_request(
                    template,
                    model_id=cfg.generator_model,
                    question=instance.question,
                    passages=render_passages(instance),
                    previous_steps=render_trajectory(traj.steps),
                    feedback=_render_feedback(feedback),
                )
                resp = generator.complete(req)
                gen_calls += 1
                tracker.record("generator", req.messages[0].content, resp.usage)
                last_raw = resp.text
                events.append(LoopEvent("step_proposed", slot, attempt, detail=resp.text[:200]))
                try:
                    parsed = parse_step(resp.text, expected_index=slot)
                except StepFormatError as exc:
                    feedback = _format_feedback_for(str(exc), slot)
                    events.append(
                        LoopEvent(
                            "feedback_given", slot, attempt,
                            detail=feedback.diagnosis,
                            error_type=feedback.error_type.value,
                        )
                    )
                    events.append(LoopEvent("step_rejected", slot, attempt, detail=exc.code.value))
                    continue
                step = parsed.step
                last_step = step
                if parsed.extra_lines:
                    flags.append(f"extra_step_lines_slot_{slot}")

                if cfg.mode is FeedbackMode.NO_FEEDBACK:
                    accepted = step
                    events.append(LoopEvent("step_accepted", slot, attempt))
                    break

                fb, flag = _evaluate(evaluator, cfg, instance, traj.steps, step, tracker)
                ev_calls += 1
                if fb is None:
                    # Unusable evaluator verdict: accept rather than burn
                    # retries on a fault the generator cannot fix.
                    flags.append(flag)
                    accepted = step
                    events.append(LoopEvent("step_accepted", slot, attempt, detail=flag))
                    break
                if fb.error_type is ErrorType.CORRECT:
                    accepted = step
                    events.append(LoopEvent("step_accepted", slot, attempt))
                    break
                feedback = fb
                events.append(
                    LoopEvent(
                        "feedback_given", slot, attempt,
                        detail=fb.diagnosis, error_type=fb.error_type.value,
                    )
                )
                events.append(
                    LoopEvent("step_rejected", slot, attempt, error_type=fb.error_type.value)
                )

            if accepted is None:
                events.append(LoopEvent("retry_exhausted", slot, cfg.max_retries))
                flags.append(f"retry_exhausted_slot_{slot}")
                accepted = last_step if last_step is not None else _synthesize_step(last_raw, slot)
            traj = append_step(traj, accepted)

        answer: str | None = None
        if traj.terminated:
            answer = traj.answer
            events.append(LoopEvent("terminated", len(traj.steps), detail=answer or ""))
        else:
            answer = _force_answer(generator, cfg, instance, traj, tracker)
            gen_calls += 1
            events.append(LoopEvent("answer_forced", len(traj.steps), detail=answer))
            events.append(LoopEvent("terminated", len(traj.steps), detail=answer))
    except Exception as exc:  # backend hard failure: keep the partial record
        aborted = True
        flags.append(f"aborted:{type(exc).__name__}")
        answer = None

    return RunRecord(
        instance_id=instance.id,
        config=cfg,
        trajectory=traj,
        answer=answer,
        events=tuple(events),
        ledger=tracker.ledger,
        generator_calls=gen_calls,
        evaluator_calls=ev_calls,
        flags=tuple(flags),
        aborted=aborted,
    )


def score_delta(baseline_mean: float, treatment_mean: float) -> float:
    """Accuracy delta in points, rounded to one decimal."""
    return round(treatment_mean - baseline_mean, 1)


def aggregate_runs(
    records: list[RunRecord],
    scores: dict[str, dict[str, float]] | None = None,
    datasets: dict[str, str] | None = None,
    baseline_mean: float | None = None,
) -> dict:
    """Order-independent corpus aggregate.

    scores maps instance id -> {"em": .., "f1": .., "acc": ..} (from the
    scoring module); datasets maps instance id -> dataset name. The
    optional baseline mean yields a delta row.
    """
    ledger = CacheLedger()
    for rec in sorted(records, key=lambda r: r.instance_id):
        ledger = ledger.merge(rec.ledger)
    out: dict = {
        "runs": len(records),
        "aborted": sum(1 for r in records if r.aborted),
        "retries": sum(r.retries for r in records),
        "generator_calls": sum(r.generator_calls for r in records),
        "evaluator_calls": sum(r.evaluator_calls for r in records),
        "ledger": ledger.to_dict(),
    }
    if scores:
        by_dataset: dict[str, list[dict[str, float]]] = {}
        for rec in records:
            row = scores.get(rec.instance_id)
            if row is None:
                continue
            name = (datasets or {}).get(rec.instance_id, "all")
            by_dataset.setdefault(name, []).append(row)
        table = {}
        for name in sorted(by_dataset):
            rows = by_dataset[name]
            table[name] = {
                metric: round(statistics.fmean(r[metric] for r in rows), 4)
                for metric in ("em", "f1", "acc")
                if all(metric in r for r in rows)
            }
        all_rows = [r for rows in by_dataset.values() for r in rows]
        if all_rows and all("acc" in r for r in all_rows):
            mean_acc = statistics.fmean(r["acc"] for r in all_rows)
            table["average"] = {"acc": round(mean_acc, 4)}
            if baseline_mean is not None:
                table["average"]["delta_vs_baseline"] = score_delta(
                    baseline_mean, 100.0 * mean_acc if mean_acc <= 1.0 else mean_acc
                )
        out["table"] = table
    return out


def run_corpus(
    cfg: LoopConfig,
    instances: list[QAInstance],
    generator: Backend,
    evaluator: Backend | None = None,
    workers: int = 1,
) -> tuple[list[RunRecord], dict]:
    """Run every instance on a bounded worker pool; aggregate is
    order-independent and returned alongside the records (input order)."""
    if workers <= 1:
        records = [run_instance(cfg, inst, generator, evaluator) for inst in instances]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(lambda inst: run_instance(cfg, inst, generator, evaluator), instances)
            )
    return records, aggregate_runs(records)


def write_runs(records: list[RunRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
