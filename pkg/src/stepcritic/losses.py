"""Reference values of the critic training objective.

These are plain float computations over probabilities, meant for checking
an external trainer's numbers; nothing here optimizes anything.
"""

from __future__ import annotations

import math
from typing import Sequence

EPS = 1e-12


def lm_loss(probs: Sequence[float]) -> float:
    """Summed negative log-likelihood of the target critique tokens."""
    if len(probs) == 0:
        raise ValueError("token probability sequence must be non-empty")
    for p in probs:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"token probability {p} outside (0, 1]")
    return -math.fsum(math.log(p) for p in probs)


def score_loss_flagged(v: int, v_hat: float) -> tuple[float, bool]:
    """Binary cross-entropy of the score head; also reports whether ``v_hat``
    had to be clamped into ``[EPS, 1 - EPS]``."""
    if v not in (0, 1):
        raise ValueError("label v must be 0 or 1")
    if not 0.0 <= v_hat <= 1.0:
        raise ValueError(f"predicted score {v_hat} outside [0, 1]")
    # mass on the true label and on the other one; whichever is ≤ 0.5 is
    # exact in floating point (1 - x is exact for x ≥ 0.5)
    hit = v_hat if v == 1 else 1.0 - v_hat
    miss = 1.0 - v_hat if v == 1 else v_hat
    if miss <= 0.5:
        return -math.log1p(-max(miss, EPS)), miss < EPS
    return -math.log(max(hit, EPS)), hit < EPS


def score_loss(v: int, v_hat: float) -> float:
    return score_loss_flagged(v, v_hat)[0]


def score_loss_grad(v: int, v_hat: float) -> float:
    """d score_loss / d v_hat."""
    return (v_hat - v) / (v_hat * (1.0 - v_hat))


def total_loss(lm: float, score: float, weight: float = 1.0) -> float:
    if lm < 0 or score < 0:
        raise ValueError("loss terms must be nonnegative")
    if weight < 0:
        raise ValueError("loss weight must be nonnegative")
    return lm + weight * score
