"""Answer scoring: exact match, token F1, and the LLM-judge adapter."""

from __future__ import annotations

import json
from collections import Counter
from typing import Sequence

from .data_model import AnswerVerdict, JudgeVerdict
from .llm_client import Backend, ParseFailure, build_request, load_prompt, parse_structured_verdict
from .textnorm import normalize, tokens


def exact_match(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("golds must be non-empty")
    norm = normalize(pred)
    return int(any(norm == normalize(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    """Max over golds of the token-overlap F1 on normalized tokens."""
    if not golds:
        raise ValueError("golds must be non-empty")
    pred_tokens = tokens(pred)
    return max(_f1_single(pred_tokens, tokens(g)) for g in golds)


def judge(
    backend: Backend,
    question: str,
    pred: str,
    golds: Sequence[str],
    model_id: str = "default",
) -> tuple[JudgeVerdict, str, bool]:
    """Semantic-equivalence verdict; (verdict, reasoning, called_backend).

    A prediction byte-equal to a gold answer short-circuits to Correct
    without a backend call. An unparseable judge response is Unjudged,
    never silently Wrong.
    """
    if not golds:
        raise ValueError("golds must be non-empty")
    if any(pred == g for g in golds):
        return JudgeVerdict.CORRECT, "byte-equal to a gold answer", False
    template = load_prompt("judge")
    req = build_request(
        template,
        model_id=model_id,
        question=question,
        predicted=pred,
        gold_answers=json.dumps(list(golds), ensure_ascii=False),
    )
    resp = backend.complete(req)
    obj = parse_structured_verdict(resp.text, required_keys=("is_correct",))
    if isinstance(obj, ParseFailure):
        return JudgeVerdict.UNJUDGED, f"unparseable judge response: {obj.reason}", True
    raw = obj["is_correct"]
    if isinstance(raw, str):
        token = raw.strip().lower()
        if token not in ("true", "false", "yes", "no"):
            return JudgeVerdict.UNJUDGED, f"unrecognized is_correct value {raw!r}", True
        correct = token in ("true", "yes")
    else:
        correct = bool(raw)
    verdict = JudgeVerdict.CORRECT if correct else JudgeVerdict.WRONG
    return verdict, str(obj.get("reasoning", "")), True


def score_answer(
    pred: str,
    golds: Sequence[str],
    backend: Backend | None = None,
    question: str = "",
    model_id: str = "default",
) -> AnswerVerdict:
    """EM + F1, plus the judge verdict when a backend is supplied."""
    em = exact_match(pred, golds)
    f1 = token_f1(pred, golds)  # em = 1 implies f1 = 1 (same normalization)
    if backend is None:
        return AnswerVerdict(em=em, f1=f1)
    verdict, reasoning, _ = judge(backend, question, pred, golds, model_id)
    return AnswerVerdict(em=em, f1=f1, judge=verdict, judge_reasoning=reasoning)
