"""Step-level reasoning search, critique mining and actor-critic refinement."""

from .types import (
    NO_CORRECTIONS,
    CritiqueSample,
    DivergencePair,
    Node,
    Question,
    ReasoningPath,
    SearchConfig,
    Step,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "NO_CORRECTIONS",
    "CritiqueSample",
    "DivergencePair",
    "Node",
    "Question",
    "ReasoningPath",
    "SearchConfig",
    "Step",
    "validate",
]
