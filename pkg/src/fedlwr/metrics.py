"""Evaluation: Dice overlap, per-client testing, and the fairness statistic.

A global model is "fairer" when its per-client test Dice scores are more
uniform; uniformity is measured by the population standard deviation
(divisor K) of those scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .network import ModelParams, Tensor, forward

if TYPE_CHECKING:
    from .datasets import Sample
    from .federation import AggregationWeights

# Std differences below this are reported as a tie.
FAIRNESS_TIE_TOLERANCE = 1e-9

A_FAIRER = "a_fairer"
B_FAIRER = "b_fairer"
TIE = "tie"


@dataclass
class RoundReport:
    """Per-round fairness evidence: each client's test Dice, their average
    and population std, plus the aggregation weights and per-layer
    similarity scores that produced the global model (NaN where a strategy
    does not estimate similarity)."""

    round_index: int
    per_client_dice: list[float]
    avg: float
    std: float
    weights_used: "AggregationWeights"
    similarity_log: np.ndarray  # K x M

    @classmethod
    def from_scores(
        cls,
        round_index: int,
        per_client_dice: Sequence[float],
        weights_used: "AggregationWeights",
        similarity_log: np.ndarray,
    ) -> "RoundReport":
        scores = [float(s) for s in per_client_dice]
        return cls(
            round_index=round_index,
            per_client_dice=scores,
            avg=float(np.mean(scores)),
            std=float(np.std(scores)),
            weights_used=weights_used,
            similarity_log=similarity_log,
        )


def _check_mask(mask: Tensor, name: str) -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float64)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError(f"{name} must be binary")
    return arr


def dice_coefficient(pred_mask: Tensor, true_mask: Tensor) -> float:
    """2|A∩B| / (|A| + |B|) for binary masks; 1.0 when both are empty."""
    a = _check_mask(pred_mask, "pred_mask")
    b = _check_mask(true_mask, "true_mask")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = float(a.sum() + b.sum())
    if total == 0.0:
        return 1.0
    return 2.0 * float(np.sum(a * b)) / total


def evaluate_client(model: ModelParams, test_set: "Sequence[Sample]") -> float:
    """Mean Dice of the model over a client's test samples.

    Predictions binarize the sigmoid output at 0.5, i.e. logits >= 0.
    """
    if not test_set:
        raise ValueError("empty test set")
    batch = np.stack([sample.image for sample in test_set])
    trace = forward(model, batch)
    preds = (trace.logits >= 0.0).astype(np.float64)
    scores = [
        dice_coefficient(preds[i], np.asarray(sample.mask, dtype=np.float64))
        for i, sample in enumerate(test_set)
    ]
    return float(np.mean(scores))


def fairness_compare(report_a: RoundReport, report_b: RoundReport) -> str:
    """Which report is fairer (smaller std)? Returns "a_fairer", "b_fairer",
    or "tie" when the stds differ by less than the tie tolerance."""
    if len(report_a.per_client_dice) != len(report_b.per_client_dice):
        raise ValueError("reports cover different client counts")
    if abs(report_a.std - report_b.std) < FAIRNESS_TIE_TOLERANCE:
        return TIE
    return A_FAIRER if report_a.std < report_b.std else B_FAIRER
