"""Confidence-based decision fusion of two independently trained classifiers.

Each model's class posterior is sorted from high to low (``s``) and reduced
to a confidence ``c``:

==========  ==========================================
basic       ``s[0]``
d2s         ``s[0] - s[1]``
d2sr        ``1 - s[1] / s[0]``
avg_diff    ``sum_{i=1}^{M-1} (s[0] - s[i]) / (M - 1)``
diff1       ``sum_{i=1}^{M-1} (s[i-1] - s[i]) / i``
==========  ==========================================

The fused prediction is that of the more confident model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateInputError

METHODS = ("basic", "d2s", "d2sr", "avg_diff", "diff1")
# Final tie-break when confidences and top probabilities are equal.
TIE_PREFERENCE = ("ear", "profile")


@dataclass(frozen=True)
class ProbabilityVector:
    probs: np.ndarray
    class_order: np.ndarray

    @property
    def size(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class ModelScore:
    model_id: str
    prob_vector: ProbabilityVector

    @property
    def predicted_class(self) -> int:
        return int(self.prob_vector.class_order[0])

    @classmethod
    def from_raw(cls, model_id: str, raw_probs) -> "ModelScore":
        return cls(model_id, sort_desc(raw_probs))


@dataclass(frozen=True)
class FusedDecision:
    chosen_model_id: str
    predicted_class: int
    confidence_a: float
    confidence_b: float


def sort_desc(raw_probs) -> ProbabilityVector:
    """Sort a posterior high-to-low; equal probabilities keep the lower class index first."""
    p = np.asarray(raw_probs, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise DataError(f"need at least 2 class probabilities, got {p.size}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DataError(f"probabilities must be finite and non-negative: {p.tolist()}")
    if abs(p.sum() - 1.0) > 1e-3:
        raise DataError(f"probabilities sum to {p.sum():.6f}, expected 1")
    order = np.argsort(-p, kind="stable")
    return ProbabilityVector(p[order], order)


def confidence(v: ProbabilityVector, method: str) -> float:
    s = v.probs
    m = len(s)
    if method == "basic":
        return float(s[0])
    if method == "d2s":
        return float(s[0] - s[1])
    if method == "d2sr":
        if s[0] <= 0.0:
            raise DegenerateInputError("d2sr is undefined when the top probability is 0")
        return float(1.0 - s[1] / s[0])
    if method == "avg_diff":
        return float(np.sum(s[0] - s[1:]) / (m - 1))
    if method == "diff1":
        return float(np.sum((s[:-1] - s[1:]) / np.arange(1, m)))
    raise ValueError(f"unknown confidence method {method!r}; expected one of {METHODS}")


def _tie_rank(model_id: str) -> int:
    try:
        return TIE_PREFERENCE.index(model_id)
    except ValueError:
        return len(TIE_PREFERENCE)


def fuse_decisions(a: ModelScore, b: ModelScore, method: str) -> FusedDecision:
    """Pick the prediction of the model with the larger confidence.

    Ties go to the larger top probability, then to the ear model (by
    ``model_id``), then to ``a``.
    """
    if a.prob_vector.size != b.prob_vector.size:
        raise DataError(f"class counts differ: {a.prob_vector.size} vs {b.prob_vector.size}")
    ca, cb = confidence(a.prob_vector, method), confidence(b.prob_vector, method)
    if ca != cb:
        a_wins = ca > cb
    elif a.prob_vector.probs[0] != b.prob_vector.probs[0]:
        a_wins = a.prob_vector.probs[0] > b.prob_vector.probs[0]
    else:
        a_wins = _tie_rank(a.model_id) <= _tie_rank(b.model_id)
    winner = a if a_wins else b
    return FusedDecision(winner.model_id, winner.predicted_class, ca, cb)


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read ``sample_id,p_0,...,p_{M-1}``; returns ids and an (N, M) array."""
    path = Path(path)
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id" or len(header) < 3:
            raise DataError(f"{path} line 1: expected header sample_id,p_0,...")
        m = len(header) - 1
        for row in reader:
            if not row:
                continue
            if len(row) != m + 1:
                raise DataError(f"{path} line {reader.line_num}: expected {m + 1} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError:
                raise DataError(f"{path} line {reader.line_num}: non-numeric probability") from None
            ids.append(row[0])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), -1)


def write_scores(path: str | Path, sample_ids: Sequence[str], probs: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"p_{i}" for i in range(probs.shape[1])])
        for sid, row in zip(sample_ids, probs):
            w.writerow([sid] + [repr(float(x)) for x in row])
    return path


@dataclass
class BatchFusionResult:
    decisions: dict[str, FusedDecision]
    errors: dict[str, str]


def fuse_score_tables(
    ids: Sequence[str],
    probs_a: np.ndarray,
    probs_b: np.ndarray,
    method: str,
    model_ids: tuple[str, str] = ("a", "b"),
) -> BatchFusionResult:
    """Fuse two aligned probability tables row by row; bad rows are reported, not fatal."""
    decisions, errors = {}, {}
    for sid, pa, pb in zip(ids, probs_a, probs_b):
        try:
            decisions[sid] = fuse_decisions(
                ModelScore.from_raw(model_ids[0], pa), ModelScore.from_raw(model_ids[1], pb), method
            )
        except (DataError, DegenerateInputError) as exc:
            errors[sid] = str(exc)
    return BatchFusionResult(decisions, errors)


def write_fused(path: str | Path, result: BatchFusionResult, ids: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "chosen_model", "predicted_class", "conf_a", "conf_b"])
        for sid in ids:
            d = result.decisions.get(sid)
            if d is not None:
                w.writerow([sid, d.chosen_model_id, d.predicted_class, repr(d.confidence_a), repr(d.confidence_b)])
    return path


def first_divergent_id(ids_a: Sequence[str], ids_b: Sequence[str]) -> Optional[str]:
    for x, y in zip(ids_a, ids_b):
        if x != y:
            return x
    if len(ids_a) != len(ids_b):
        longer = ids_a if len(ids_a) > len(ids_b) else ids_b
        return longer[min(len(ids_a), len(ids_b))]
    return None
