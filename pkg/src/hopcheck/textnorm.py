"""Shared text normalization helpers.

The same normalization (lowercase, punctuation strip, article strip,
whitespace collapse) backs answer scoring and entity canonicalization,
so the two never disagree about what "the same string" means.
"""

from __future__ import annotations

import re
import string

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def normalize(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    out = text.lower()
    out = out.translate(_PUNCT_TABLE)
    out = _ARTICLE_RE.sub(" ", out)
    return " ".join(out.split())


def tokens(text: str) -> list[str]:
    return normalize(text).split()


def rough_token_count(text: str) -> int:
    """Word-plus-punctuation token count.

    Fixed fallback estimator for prompt-token accounting when a backend
    reports no usage; versioned with the package so ledgers stay
    comparable across runs.
    """
    return len(_TOKEN_RE.findall(text))
