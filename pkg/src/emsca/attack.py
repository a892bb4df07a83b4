"""End-to-end scan attack against an unseen device.

Per grid cell, averaged traces are classified by the trained model, the
predicted labels are turned into key-byte guesses, and the attacker's
confidence is the ratio between the counts of the most and second-most
frequent guesses. The best cell is wherever that ratio peaks.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import LabelKind, TraceSet, inv_sbox
from .leakage import Heatmap, MetricKind
from .mlp import MlpModel, predict_labels
from .preprocess import FeatureTransform


class Verdict(Enum):
    CONFIDENT = "confident"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class AttackReport:
    predicted_key: int
    histogram: list[tuple[int, int]]      # top-5 (guess, count)
    confidence_ratio: float               # inf when the runner-up count is 0
    traces_used: int
    location: tuple[int, int] | None
    verdict: Verdict
    r_min: float

    def to_json(self) -> str:
        return json.dumps({
            "predicted_key": self.predicted_key,
            "histogram": [[int(v), int(c)] for v, c in self.histogram],
            "confidence_ratio": ("inf" if np.isinf(self.confidence_ratio)
                                 else self.confidence_ratio),
            "traces_used": self.traces_used,
            "location": list(self.location) if self.location else None,
            "verdict": self.verdict.value,
            "r_min": self.r_min,
        }, indent=2, sort_keys=True)


def predict_batch(model: MlpModel, transform: FeatureTransform,
                  trace_set: TraceSet) -> np.ndarray:
    """Argmax class label per averaged trace.

    Refuses to run if the model was trained against a different fitted
    transform (fingerprint mismatch) or if the traces do not match the
    transform's trace length / averaging factor.
    """
    fp = transform.fingerprint()
    if model.transform_fingerprint is not None and model.transform_fingerprint != fp:
        raise ValueError(
            "transform fingerprint mismatch: model was trained against "
            f"{model.transform_fingerprint[:12]}..., got {fp[:12]}...")
    features = transform.apply(trace_set)
    return predict_labels(model, features)


def key_guesses(predictions: np.ndarray, trace_set: TraceSet) -> np.ndarray:
    """Per-trace key-byte guess implied by the predicted labels."""
    preds = np.asarray(predictions, dtype=np.uint8)
    if trace_set.label_kind == LabelKind.KEY_BYTE:
        return preds
    # label is sbox(pt ^ k), plaintexts are known
    return inv_sbox(preds) ^ trace_set.plaintexts


def recover_key(predictions: np.ndarray, r_min: float = 2.0,
                max_traces: int = 20,
                location: tuple[int, int] | None = None) -> AttackReport:
    """Majority vote over key-byte guesses with the top-two count ratio.

    A single prediction cannot be distinguished from its runner-up, so
    the verdict needs at least two traces; r itself is reported as +inf
    whenever the second count is zero.
    """
    preds = np.asarray(predictions).ravel()
    if preds.size == 0:
        raise ValueError("no predictions given")
    counts = Counter(int(p) for p in preds)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    top_value, top_count = ranked[0]
    second_count = ranked[1][1] if len(ranked) > 1 else 0
    ratio = float("inf") if second_count == 0 else top_count / second_count
    confident = (preds.size >= 2 and preds.size <= max_traces
                 and ratio >= r_min)
    return AttackReport(
        predicted_key=top_value,
        histogram=[(v, c) for v, c in ranked[:5]],
        confidence_ratio=ratio,
        traces_used=int(preds.size),
        location=location,
        verdict=Verdict.CONFIDENT if confident else Verdict.INCONCLUSIVE,
        r_min=r_min,
    )


def attack_budget(model: MlpModel, transform: FeatureTransform,
                  cell_set: TraceSet, r_min: float = 2.0,
                  max_traces: int = 20) -> int | None:
    """Smallest prefix of the cell's averaged traces reaching Confident.

    Returns None ("not reached") if no prefix up to max_traces works.
    """
    guesses = key_guesses(predict_batch(model, transform, cell_set), cell_set)
    limit = min(guesses.size, max_traces)
    for m in range(2, limit + 1):
        report = recover_key(guesses[:m], r_min=r_min, max_traces=max_traces)
        if report.verdict == Verdict.CONFIDENT:
            return m
    return None


def bounded_ratio(guesses: np.ndarray) -> float:
    """Top-two count ratio with the runner-up floored at one count.

    Bounded by len(guesses); used for heatmap cells so a perfect cell
    stores a finite value.
    """
    counts = Counter(int(g) for g in guesses)
    ranked = sorted(counts.values(), reverse=True)
    second = ranked[1] if len(ranked) > 1 else 0
    return ranked[0] / max(second, 1)


@dataclass(frozen=True)
class ScanAttackResult:
    accuracy: Heatmap | None      # None in blind mode
    confidence: Heatmap
    best_cell: tuple[int, int]
    report: AttackReport
    queries_used: int


def scan_attack(model: MlpModel, transform: FeatureTransform,
                cell_sets: dict[tuple[int, int], TraceSet],
                grid_size: int = 10, r_min: float = 2.0,
                confidence_queries: int = 20, max_traces: int = 20,
                cells: list[tuple[int, int]] | None = None,
                blind: bool = False) -> ScanAttackResult:
    """Classify every cell, build accuracy/confidence heatmaps, and attack
    the most confident cell.

    `cells` restricts the scan (e.g. one quadrant); skipped cells stay
    NaN. Blind mode skips the label-aware accuracy map.
    """
    wanted = set(cells) if cells is not None else set(cell_sets)
    acc = np.full((grid_size, grid_size), np.nan)
    conf = np.full((grid_size, grid_size), np.nan)
    guesses_by_cell: dict[tuple[int, int], np.ndarray] = {}
    queries = 0
    for cell in sorted(wanted):
        ts = cell_sets[cell]
        preds = predict_batch(model, transform, ts)
        queries += len(ts)
        guesses = key_guesses(preds, ts)
        guesses_by_cell[cell] = guesses
        if not blind:
            acc[cell] = float((preds == ts.labels()).mean())
        conf[cell] = bounded_ratio(guesses[:confidence_queries])

    if not guesses_by_cell:
        raise ValueError("no cells to scan")
    flat = np.nanargmax(conf)
    best = (int(flat // grid_size), int(flat % grid_size))
    report = recover_key(guesses_by_cell[best][:max_traces], r_min=r_min,
                         max_traces=max_traces, location=best)
    complete = len(wanted) == grid_size * grid_size
    meta = {"confidence_queries": confidence_queries, "r_min": r_min,
            "cells_scanned": len(wanted)}
    acc_map = None if blind else Heatmap(values=acc, metric=MetricKind.ACCURACY,
                                         complete=complete, metadata=meta)
    conf_map = Heatmap(values=conf, metric=MetricKind.CONFIDENCE,
                       complete=complete, metadata=meta)
    return ScanAttackResult(accuracy=acc_map, confidence=conf_map,
                            best_cell=best, report=report, queries_used=queries)
