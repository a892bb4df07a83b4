"""Leakage assessment: side-channel SNR, fixed-vs-random TVLA, CEMA with
minimum-traces-to-disclosure, and per-grid-cell heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .core import TraceSet, hamming_weight, intermediate, sbox
from .selection import dom_scores

TVLA_THRESHOLD = 4.5
DEFAULT_MTD_SCHEDULE = (10, 20, 50, 100, 200, 250, 500, 1000, 2000)


class ClassFn(Enum):
    """Conditioning variable for the SNR decomposition."""

    HW_CLASS = "hw"       # Hamming weight of the intermediate (9 classes)
    BYTE_CLASS = "byte"   # intermediate byte value (256 classes)


class MetricKind(Enum):
    T_MAX = "t_max"
    MTD = "mtd"
    ACCURACY = "accuracy"
    CONFIDENCE = "confidence"


@dataclass(frozen=True)
class SnrEstimate:
    signal_var: np.ndarray   # per-sample variance of class-conditional means
    noise_var: np.ndarray    # per-sample pooled within-class variance
    snr_linear: np.ndarray
    top_poi: int
    snr_db: float            # at the top DOM POI; +inf when noise is ~0 there


@dataclass(frozen=True)
class TvlaResult:
    t_values: np.ndarray
    max_abs_t: float
    leak_detected: bool
    threshold: float = TVLA_THRESHOLD


@dataclass(frozen=True)
class CemaResult:
    correlations: np.ndarray          # (256, L) at the full trace count
    best_guess: int
    true_key: int
    mtd: int | None                   # None = not reached within the schedule
    schedule: tuple[int, ...]
    ranks: tuple[int, ...]            # rank of the true key at each schedule point


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray                # (G, G), NaN for missing cells
    metric: MetricKind
    complete: bool
    metadata: dict = field(default_factory=dict)

    def argmax_cell(self) -> tuple[int, int]:
        flat = np.nanargmax(self.values)
        r, c = np.unravel_index(flat, self.values.shape)
        return int(r), int(c)


def snr(trace_set: TraceSet, class_fn: ClassFn = ClassFn.BYTE_CLASS) -> SnrEstimate:
    """Side-channel SNR per sample: VAR[signal] / VAR[noise].

    Signal is the count-weighted variance of the class-conditional mean
    traces; noise is the pooled within-class variance. Classes come from
    the intermediate value (or its Hamming weight), not the label.
    """
    inter = intermediate(trace_set.plaintexts, trace_set.keys)
    classes = inter if class_fn == ClassFn.BYTE_CLASS else hamming_weight(inter)
    values, counts = np.unique(classes, return_counts=True)
    if values.size < 2:
        raise ValueError("SNR needs at least two occupied classes")
    if counts.min() < 2:
        raise ValueError("every occupied class needs at least two traces")

    x = trace_set.samples.astype(np.float64)
    n = x.shape[0]
    grand_mean = x.mean(axis=0)
    signal = np.zeros(x.shape[1])
    within_ss = np.zeros(x.shape[1])
    for v, cnt in zip(values, counts):
        xc = x[classes == v]
        mu = xc.mean(axis=0)
        signal += cnt * (mu - grand_mean) ** 2
        within_ss += ((xc - mu) ** 2).sum(axis=0)
    signal /= n
    noise = within_ss / (n - values.size)  # pooled, unbiased

    with np.errstate(divide="ignore", invalid="ignore"):
        snr_linear = np.where(noise > 0, signal / np.where(noise > 0, noise, 1.0),
                              np.where(signal > 0, np.inf, 0.0))

    top = int(np.argmax(dom_scores(trace_set)))
    lin = snr_linear[top]
    snr_db = float("inf") if np.isinf(lin) else (
        float("-inf") if lin == 0 else 10.0 * math.log10(lin))
    return SnrEstimate(signal_var=signal, noise_var=noise, snr_linear=snr_linear,
                       top_poi=top, snr_db=snr_db)


def pooled_snr_curve(device_sets: dict[int, TraceSet],
                     poi: int | None = None,
                     max_subsets: int = 40,
                     seed: int = 0) -> list[float]:
    """SNR in dB at one sample as devices are pooled, for k = 1..n.

    The SNR of "k devices" is averaged (in dB) over k-device subsets of
    the pool: individual subsets fluctuate with the particular gains
    drawn, the subset mean isolates the added-device trend. All C(n, k)
    subsets are used when there are at most `max_subsets`, otherwise a
    seeded sample. The sample defaults to the top DOM POI of the first
    device.
    """
    import itertools

    ids = sorted(device_sets)
    if poi is None:
        poi = snr(device_sets[ids[0]]).top_poi
    rng = np.random.default_rng(seed)
    curve = []
    for k in range(1, len(ids) + 1):
        combos = list(itertools.combinations(ids, k))
        if len(combos) > max_subsets:
            picks = rng.choice(len(combos), size=max_subsets, replace=False)
            combos = [combos[i] for i in picks]
        values = []
        for combo in combos:
            pooled = (device_sets[combo[0]] if len(combo) == 1 else
                      TraceSet.concatenate([device_sets[d] for d in combo]))
            lin = snr(pooled).snr_linear[poi]
            values.append(10.0 * math.log10(lin) if lin > 0 else -math.inf)
        curve.append(float(np.mean(values)))
    return curve


def tvla(fixed: TraceSet, random: TraceSet) -> TvlaResult:
    """Per-sample Welch t-test between a fixed-input and a random-input set."""
    if len(fixed) == 0 or len(random) == 0:
        raise ValueError("both TVLA groups must be nonempty")
    if fixed.trace_length != random.trace_length:
        raise ValueError("TVLA groups must share the trace length")
    xf = fixed.samples.astype(np.float64)
    xr = random.samples.astype(np.float64)
    nf, nr = len(fixed), len(random)
    mf, mr = xf.mean(axis=0), xr.mean(axis=0)
    vf = xf.var(axis=0, ddof=1) if nf > 1 else np.zeros(xf.shape[1])
    vr = xr.var(axis=0, ddof=1) if nr > 1 else np.zeros(xr.shape[1])
    denom = np.sqrt(vf / nf + vr / nr)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, (mf - mr) / np.where(denom > 0, denom, 1.0), 0.0)
    max_abs = float(np.max(np.abs(t)))
    return TvlaResult(t_values=t, max_abs_t=max_abs,
                      leak_detected=max_abs > TVLA_THRESHOLD)


def _correlation_matrix(samples: np.ndarray, hypotheses: np.ndarray) -> np.ndarray:
    """Pearson correlation of every hypothesis column with every sample column.

    samples (n, L), hypotheses (n, 256) -> (256, L). Zero-variance columns
    on either side produce 0 rather than NaN.
    """
    xs = samples - samples.mean(axis=0)
    hs = hypotheses - hypotheses.mean(axis=0)
    sx = np.sqrt((xs ** 2).sum(axis=0))
    sh = np.sqrt((hs ** 2).sum(axis=0))
    num = hs.T @ xs
    denom = np.outer(sh, sx)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return rho


def cema(trace_set: TraceSet,
         schedule: tuple[int, ...] = DEFAULT_MTD_SCHEDULE) -> CemaResult:
    """Correlation EM analysis over all 256 key guesses.

    The predictor for guess g is HW(sbox(pt ^ g)); each guess is scored by
    the max |Pearson correlation| over samples. MTD is the smallest
    schedule count at which the true key ranks first and keeps ranking
    first at every larger evaluated count.
    """
    keys = np.unique(trace_set.keys)
    if keys.size != 1:
        raise ValueError("CEMA needs a single fixed true key in the set")
    true_key = int(keys[0])
    n = len(trace_set)
    if n < 2:
        raise ValueError("CEMA needs at least two traces")
    counts = tuple(c for c in sorted(set(schedule)) if c <= n)
    if not counts or counts[-1] != n:
        counts = counts + (n,)

    pts = trace_set.plaintexts
    guesses = np.arange(256, dtype=np.uint8)
    # (n, 256): hypothetical HW leakage per trace per guess
    hyp = hamming_weight(sbox(pts[:, None] ^ guesses[None, :])).astype(np.float64)
    samples = trace_set.samples.astype(np.float64)

    ranks = []
    rho_full = None
    for m in counts:
        rho = _correlation_matrix(samples[:m], hyp[:m])
        scores = np.max(np.abs(rho), axis=1)
        order = np.argsort(-scores, kind="stable")
        ranks.append(int(np.where(order == true_key)[0][0]))
        if m == counts[-1]:
            rho_full = rho
    best_guess = int(np.argmax(np.max(np.abs(rho_full), axis=1)))

    mtd = None
    for i, m in enumerate(counts):
        if m in schedule and all(r == 0 for r in ranks[i:]):
            mtd = m
            break
    return CemaResult(correlations=rho_full, best_guess=best_guess,
                      true_key=true_key, mtd=mtd, schedule=counts,
                      ranks=tuple(ranks))


def heatmap_scan(
    cell_sets: dict[tuple[int, int], TraceSet],
    metric: MetricKind,
    grid_size: int = 10,
    evaluator: Callable[[TraceSet], float] | None = None,
    mtd_schedule: tuple[int, ...] = DEFAULT_MTD_SCHEDULE,
    fixed_sets: dict[tuple[int, int], TraceSet] | None = None,
    mtd_sentinel: float | None = None,
) -> Heatmap:
    """Per-cell scalar field over the scan grid.

    T_MAX needs `fixed_sets` (fixed-input partner per cell); MTD runs CEMA
    per cell (cells where MTD is not reached get `mtd_sentinel`, default
    2x the largest schedule entry); ACCURACY / CONFIDENCE call `evaluator`
    on each cell's traces. Missing cells become NaN and clear `complete`.
    """
    values = np.full((grid_size, grid_size), np.nan)
    sentinel = mtd_sentinel if mtd_sentinel is not None else 2.0 * max(mtd_schedule)
    for (r, c), ts in cell_sets.items():
        if not (0 <= r < grid_size and 0 <= c < grid_size):
            raise ValueError(f"cell ({r},{c}) outside the {grid_size}x{grid_size} grid")
        if metric == MetricKind.T_MAX:
            if fixed_sets is None or (r, c) not in fixed_sets:
                raise ValueError("T_MAX heatmap needs a fixed-input set per cell")
            values[r, c] = tvla(fixed_sets[(r, c)], ts).max_abs_t
        elif metric == MetricKind.MTD:
            res = cema(ts, schedule=mtd_schedule)
            values[r, c] = sentinel if res.mtd is None else float(res.mtd)
        else:
            if evaluator is None:
                raise ValueError(f"{metric.value} heatmap needs an evaluator")
            values[r, c] = float(evaluator(ts))
    complete = bool(np.all(np.isfinite(values)))
    meta = {
        "metric": metric.value,
        "cells": len(cell_sets),
        "traces_per_cell": {f"{r},{c}": len(ts) for (r, c), ts in cell_sets.items()},
    }
    if metric == MetricKind.MTD:
        meta["mtd_sentinel"] = sentinel
        meta["mtd_schedule"] = list(mtd_schedule)
    return Heatmap(values=values, metric=metric, complete=complete, metadata=meta)
