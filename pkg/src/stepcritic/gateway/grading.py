"""Answer extraction and exact-match grading."""

from __future__ import annotations

import re
from decimal import Decimal, InvalidOperation
from typing import Callable, Protocol

FINAL_ANSWER_PATTERN = r"final\s+answer\s*[:：]"
_MARKER_RE = re.compile(FINAL_ANSWER_PATTERN, re.IGNORECASE)
_TRAILING_PUNCT = ".,;:!?。，；：！？"
_THOUSANDS_RE = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")


def has_final_marker(text: str, pattern: re.Pattern[str] = _MARKER_RE) -> bool:
    return pattern.search(text) is not None


def extract_from_text(text: str, pattern: re.Pattern[str] = _MARKER_RE) -> str | None:
    """Text following the last final-answer marker, up to the end of that line."""
    matches = list(pattern.finditer(text))
    if not matches:
        return None
    rest = text[matches[-1].end():].split("\n", 1)[0]
    answer = rest.strip().rstrip(_TRAILING_PUNCT).strip()
    return answer or None


def extract_answer(path, pattern: re.Pattern[str] | str = _MARKER_RE) -> str | None:
    """Final answer of a reasoning path, read from its last step if terminal."""
    if isinstance(pattern, str):
        pattern = re.compile(pattern, re.IGNORECASE)
    if not path.steps or not path.steps[-1].is_terminal:
        return None
    return extract_from_text(path.steps[-1].text, pattern)


def _canonical_number(s: str) -> str | None:
    if _THOUSANDS_RE.match(s):
        s = s.replace(",", "")
    try:
        d = Decimal(s)
    except InvalidOperation:
        return None
    if not d.is_finite():
        return None
    if d == 0:
        return "0"
    out = format(d.normalize(), "f")
    if "." in out:
        out = out.rstrip("0").rstrip(".")
    return out


def normalize(answer: str) -> str:
    """Trim, casefold, drop trailing punctuation, collapse whitespace and
    canonicalize plain numerals (``"7.0"`` and ``"7"`` normalize alike)."""
    s = " ".join(answer.split()).casefold()
    s = s.rstrip(_TRAILING_PUNCT).strip()
    number = _canonical_number(s)
    return s if number is None else number


def grade(predicted: str | None, ground_truth: str) -> bool:
    if not ground_truth or not ground_truth.strip():
        raise ValueError("ground truth must be non-empty")
    if predicted is None:
        return False
    return normalize(predicted) == normalize(ground_truth)


class Grader(Protocol):
    def __call__(self, predicted: str | None, ground_truth: str) -> bool: ...


GradeFn = Callable[[str | None, str], bool]
