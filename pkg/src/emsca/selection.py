"""POI identification and greedy training-device selection.

POIs are scored by difference of means over the 9 Hamming-weight classes
of the first-round intermediate. Device selection works on the bivariate
mean of the top two POIs: the greedy "dissimilar" mode repeatedly adds
the device farthest from the centroid of the devices picked so far.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import TraceSet, hamming_weight, intermediate


class SelectionMode(Enum):
    DISSIMILAR = "dissimilar"
    SIMILAR = "similar"
    RANDOM = "random"


@dataclass(frozen=True)
class PoiPair:
    """Top two POI sample indices plus the full per-sample DOM score."""

    t1: int
    t2: int
    dom_scores: np.ndarray
    min_separation: int = 5

    def __post_init__(self):
        if self.t1 == self.t2:
            raise ValueError("POIs must be distinct samples")
        if abs(self.t1 - self.t2) < self.min_separation:
            raise ValueError(
                f"POIs {self.t1},{self.t2} closer than min_separation={self.min_separation}"
            )


@dataclass(frozen=True)
class SelectionResult:
    device_ids: list[int]
    mode: SelectionMode
    step_distances: list[float]  # one entry per added device; first is NaN

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode.value,
                "device_ids": [int(d) for d in self.device_ids],
                "step_distances": [
                    None if np.isnan(d) else float(d) for d in self.step_distances
                ],
            },
            indent=2,
            sort_keys=True,
        )


def dom_scores(trace_set: TraceSet) -> np.ndarray:
    """Per-sample DOM score: sum of |mean difference| over HW-class pairs.

    Classes are the Hamming weights of the intermediate value, so 9-class
    means are estimable from small trace counts.
    """
    hw = hamming_weight(intermediate(trace_set.plaintexts, trace_set.keys))
    classes = np.unique(hw)
    if classes.size < 2:
        raise ValueError("DOM scoring needs at least two occupied classes")
    means = np.stack(
        [trace_set.samples[hw == c].mean(axis=0, dtype=np.float64) for c in classes]
    )
    score = np.zeros(trace_set.trace_length)
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            score += np.abs(means[i] - means[j])
    return score


def find_pois(trace_set: TraceSet, k: int = 2, min_separation: int = 5) -> PoiPair:
    """Top-k DOM samples, greedily enforcing a minimum index separation."""
    if k != 2:
        raise ValueError("exactly two POIs are selected")
    scores = dom_scores(trace_set)
    order = np.argsort(-scores, kind="stable")
    chosen: list[int] = []
    for idx in order:
        if all(abs(int(idx) - c) >= min_separation for c in chosen):
            chosen.append(int(idx))
        if len(chosen) == k:
            break
    if len(chosen) < k:
        raise ValueError("trace too short to place POIs with the required separation")
    return PoiPair(t1=chosen[0], t2=chosen[1], dom_scores=scores,
                   min_separation=min_separation)


def device_means(device_sets: dict[int, TraceSet], pois: PoiPair) -> dict[int, np.ndarray]:
    """Mean amplitude at the two POIs per device, as a 2-vector each."""
    out: dict[int, np.ndarray] = {}
    for dev in sorted(device_sets):
        ts = device_sets[dev]
        if len(ts) == 0:
            raise ValueError(f"device {dev} has no traces")
        mu = ts.samples[:, [pois.t1, pois.t2]].mean(axis=0, dtype=np.float64)
        if not np.all(np.isfinite(mu)):
            raise ValueError(f"device {dev} mean is non-finite")
        out[dev] = mu
    return out


def select_devices(
    mean_map: dict[int, np.ndarray],
    n_devices: int,
    mode: SelectionMode = SelectionMode.DISSIMILAR,
    seed: int = 0,
    start_device: int | None = None,
) -> SelectionResult:
    """Pick a training subset from the bivariate POI-mean map.

    Dissimilar: greedy farthest-from-centroid (ties to the lowest device id).
    Similar: same greedy loop with argmin. Random: uniform without
    replacement. The first device defaults to the lowest id.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if n_devices > len(mean_map):
        raise ValueError(
            f"requested {n_devices} devices but only {len(mean_map)} available"
        )
    ids = sorted(mean_map)

    if mode == SelectionMode.RANDOM:
        rng = np.random.default_rng(seed)
        picked = [int(ids[i]) for i in rng.choice(len(ids), size=n_devices, replace=False)]
        return SelectionResult(picked, mode, [float("nan")] * n_devices)

    first = ids[0] if start_device is None else start_device
    if first not in mean_map:
        raise ValueError(f"start device {first} not in the mean map")
    selected = [first]
    distances = [float("nan")]
    remaining = [d for d in ids if d != first]
    while len(selected) < n_devices:
        centroid = np.mean([mean_map[d] for d in selected], axis=0)
        dists = np.array([np.linalg.norm(mean_map[d] - centroid) for d in remaining])
        # argmax/argmin return the first (lowest-id) entry on ties
        pick = int(np.argmax(dists) if mode == SelectionMode.DISSIMILAR else np.argmin(dists))
        selected.append(remaining[pick])
        distances.append(float(dists[pick]))
        del remaining[pick]
    return SelectionResult(selected, mode, distances)


def dispersion(mean_map: dict[int, np.ndarray], device_ids: list[int]) -> float:
    """Sum of distances of the chosen devices' means to their centroid."""
    pts = np.stack([mean_map[d] for d in device_ids])
    centroid = pts.mean(axis=0)
    return float(np.linalg.norm(pts - centroid, axis=1).sum())
