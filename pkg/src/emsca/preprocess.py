"""Trace averaging and the feature transforms fed to the classifier.

A FeatureTransform is the full fitted pipeline: it remembers the
averaging factor of its training traces, projects with one of
identity / PCA / LDA / FFT / spectrogram, and z-scores per feature with
training statistics. Once fitted it is read-only; applying it to new
traces never re-fits anything.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .core import LabelKind, TraceSet

# Ridge added to the within-class scatter, scaled by trace(S_W)/dim.
LDA_RIDGE_SCALE = 1e-6


def average_traces(trace_set: TraceSet, n: int) -> tuple[TraceSet, int]:
    """Sample-wise mean over groups of n traces with identical metadata.

    Traces group by (device, plaintext, key, location, n_averaged); each
    group is chunked in input order into complete chunks of n. Returns
    the averaged set and the number of dropped incomplete chunks.
    """
    if n < 1:
        raise ValueError("averaging factor must be >= 1")
    if n == 1:
        return trace_set, 0
    groups: dict[tuple, list[int]] = {}
    order: list[tuple] = []
    for i in range(len(trace_set)):
        key = (int(trace_set.device_ids[i]), int(trace_set.plaintexts[i]),
               int(trace_set.keys[i]), int(trace_set.rows[i]),
               int(trace_set.cols[i]), int(trace_set.n_averaged[i]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)

    chunks: list[list[int]] = []
    dropped = 0
    for key in order:
        idx = groups[key]
        n_complete = len(idx) // n
        for c in range(n_complete):
            chunks.append(idx[c * n:(c + 1) * n])
        if len(idx) % n:
            dropped += 1
    if not chunks:
        raise ValueError(f"no complete groups of {n} traces")

    samples = np.stack([
        trace_set.samples[chunk].mean(axis=0, dtype=np.float64) for chunk in chunks
    ]).astype(np.float32)
    first = np.array([chunk[0] for chunk in chunks])
    averaged = TraceSet(
        samples=samples,
        plaintexts=trace_set.plaintexts[first],
        keys=trace_set.keys[first],
        device_ids=trace_set.device_ids[first],
        rows=trace_set.rows[first],
        cols=trace_set.cols[first],
        n_averaged=(trace_set.n_averaged[first].astype(np.uint32) * n).astype(np.uint16),
        label_kind=trace_set.label_kind,
    )
    return averaged, dropped


def fft_features(samples: np.ndarray) -> np.ndarray:
    """One-sided magnitude spectrum; (n, L) -> (n, L//2 + 1)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return np.abs(np.fft.rfft(x, axis=1))


def spectrogram_features(samples: np.ndarray, window_len: int = 256,
                         hop: int = 128) -> np.ndarray:
    """Hann-window STFT magnitude, flattened row-major to (n, frames*bins).

    frames = (L - window_len) // hop + 1, bins = window_len // 2 + 1.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    length = x.shape[1]
    if window_len > length:
        raise ValueError(f"window_len={window_len} exceeds trace length {length}")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    window = np.hanning(window_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len, axis=1)[:, ::hop]
    mags = np.abs(np.fft.rfft(frames * window, axis=2))
    return mags.reshape(x.shape[0], -1)


def spectrogram_shape(trace_length: int, window_len: int, hop: int) -> tuple[int, int]:
    return (trace_length - window_len) // hop + 1, window_len // 2 + 1


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: largest-|entry| component positive.

    Also forces C order so a serialization round trip reproduces the
    exact same BLAS path (and therefore bit-identical projections).
    """
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(components * signs)


def _pca_fit(x: np.ndarray, n_components: int):
    """Eigendecomposition of the training covariance (ddof=1), solved in
    the smaller of the sample/feature spaces. Near-zero eigenvalue
    directions are dropped."""
    n, d = x.shape
    if n_components > min(n, d):
        raise ValueError(
            f"n_components={n_components} exceeds min(n_traces={n}, dim={d})")
    mean = x.mean(axis=0)
    xc = x - mean
    if n <= d:
        gram = (xc @ xc.T) / (n - 1)
        eigvals, eigvecs = scipy.linalg.eigh(gram)
        eigvals, eigvecs = eigvals[::-1], eigvecs[:, ::-1]
        keep = min(n_components, eigvals.size)
        eigvals, eigvecs = eigvals[:keep], eigvecs[:, :keep]
        positive = eigvals > max(eigvals[0], 0) * 1e-10
        eigvals, eigvecs = eigvals[positive], eigvecs[:, positive]
        components = (xc.T @ eigvecs) / np.sqrt(eigvals * (n - 1))
    else:
        cov = (xc.T @ xc) / (n - 1)
        lo = d - n_components
        eigvals, components = scipy.linalg.eigh(cov, subset_by_index=[lo, d - 1])
        eigvals, components = eigvals[::-1], components[:, ::-1]
        positive = eigvals > max(eigvals[0], 0) * 1e-10
        eigvals, components = eigvals[positive], components[:, positive]
    return mean, _fix_signs(components), eigvals


def _lda_fit(x: np.ndarray, labels: np.ndarray, n_components: int):
    """Generalized eigenproblem on between- vs ridge-regularized
    within-class scatter, reduced through the rank-(C-1) span of the
    class means. Uses the dual (Gram) form when samples < dimensions."""
    n, d = x.shape
    classes, y = np.unique(labels, return_inverse=True)
    n_classes = classes.size
    if n_classes < 2:
        raise ValueError("LDA needs at least two classes")
    if n_components > n_classes - 1:
        raise ValueError(
            f"n_components={n_components} exceeds classes-1={n_classes - 1}")
    if n_components > d:
        raise ValueError(f"n_components={n_components} exceeds dim={d}")

    mean = x.mean(axis=0)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    sums = np.zeros((n_classes, d))
    np.add.at(sums, y, x)
    class_means = sums / counts[:, None]
    xc = x - class_means[y]                      # within-class centered
    trace_sw = float((xc ** 2).sum())
    ridge = LDA_RIDGE_SCALE * max(trace_sw, 1e-30) / d
    between = np.sqrt(counts)[:, None] * (class_means - mean)  # (C, d)

    if n < d:
        gram = xc @ xc.T
        gram[np.diag_indices_from(gram)] += ridge
        rhs = xc @ between.T                     # (n, C)
        z = scipy.linalg.solve(gram, rhs, assume_a="pos")
        p = (between.T - xc.T @ z) / ridge       # (S_W + ridge I)^-1 B^T
    else:
        sw = xc.T @ xc
        sw[np.diag_indices_from(sw)] += ridge
        p = scipy.linalg.solve(sw, between.T, assume_a="pos")

    t = between @ p                              # (C, C), symmetric PSD
    t = (t + t.T) / 2.0
    eigvals, eigvecs = scipy.linalg.eigh(t)
    eigvals, eigvecs = eigvals[::-1][:n_components], eigvecs[:, ::-1][:, :n_components]
    components = p @ eigvecs
    norms = np.linalg.norm(components, axis=0)
    norms[norms == 0] = 1.0
    components = components / norms
    return mean, _fix_signs(components), np.maximum(eigvals, 0.0)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring with training statistics.

    Features whose training std is (numerically) zero are dropped; their
    indices are kept for the record.
    """

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        if features.shape[0] < 2:
            raise ValueError("standardizer needs at least two training vectors")
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean=mean[keep], std=std[keep],
                   kept=np.flatnonzero(keep), dropped=np.flatnonzero(~keep))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features[:, self.kept] - self.mean) / self.std


class TransformKind(Enum):
    IDENTITY = "identity"
    PCA = "pca"
    LDA = "lda"
    FFT = "fft"
    SPECTROGRAM = "spectrogram"


@dataclass
class FeatureTransform:
    """Fitted preprocessing pipeline: projection + standardization.

    Construct with the desired kind and call fit(train_set) once; after
    that the transform is frozen and apply() is pure.
    """

    kind: TransformKind
    n_components: int = 0                    # PCA / LDA only
    window_len: int = 256                    # spectrogram only
    hop: int = 128
    averaging_n: int | None = None           # inferred from the training set
    trace_length: int | None = None
    label_kind: LabelKind | None = None
    proj_mean: np.ndarray | None = None
    components: np.ndarray | None = None     # (dim, k)
    eigenvalues: np.ndarray | None = None
    standardizer: Standardizer | None = None
    fitted: bool = field(default=False)

    def fit(self, train_set: TraceSet) -> "FeatureTransform":
        if self.fitted:
            raise RuntimeError("transform is read-only once fitted")
        n_avg = np.unique(train_set.n_averaged)
        if n_avg.size != 1:
            raise ValueError("training set mixes different averaging factors")
        self.averaging_n = int(n_avg[0])
        self.trace_length = train_set.trace_length
        self.label_kind = train_set.label_kind
        x = train_set.samples.astype(np.float64)

        if self.kind == TransformKind.PCA:
            self.proj_mean, self.components, self.eigenvalues = _pca_fit(
                x, self.n_components)
            raw = (x - self.proj_mean) @ self.components
        elif self.kind == TransformKind.LDA:
            self.proj_mean, self.components, self.eigenvalues = _lda_fit(
                x, train_set.labels(), self.n_components)
            raw = (x - self.proj_mean) @ self.components
        elif self.kind == TransformKind.FFT:
            raw = fft_features(x)
        elif self.kind == TransformKind.SPECTROGRAM:
            raw = spectrogram_features(x, self.window_len, self.hop)
        else:
            raw = x
        self.standardizer = Standardizer.fit(raw)
        self.fitted = True
        return self

    def _project(self, samples: np.ndarray) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        if self.kind in (TransformKind.PCA, TransformKind.LDA):
            return (x - self.proj_mean) @ self.components
        if self.kind == TransformKind.FFT:
            return fft_features(x)
        if self.kind == TransformKind.SPECTROGRAM:
            return spectrogram_features(x, self.window_len, self.hop)
        return x

    def assert_compatible(self, trace_set: TraceSet) -> None:
        if not self.fitted:
            raise RuntimeError("transform has not been fitted")
        if trace_set.trace_length != self.trace_length:
            raise ValueError(
                f"trace length {trace_set.trace_length} does not match the "
                f"fitted length {self.trace_length}")
        n_avg = np.unique(trace_set.n_averaged)
        if n_avg.size != 1 or int(n_avg[0]) != self.averaging_n:
            raise ValueError(
                f"traces averaged {n_avg.tolist()}x but the transform was "
                f"fitted on {self.averaging_n}x averages")

    def apply(self, trace_set: TraceSet) -> np.ndarray:
        """Feature matrix (n, output_dim) for an already-averaged set."""
        self.assert_compatible(trace_set)
        return self.standardizer.apply(self._project(trace_set.samples))

    def apply_trace(self, samples: np.ndarray) -> np.ndarray:
        """Feature vector for a single trace's samples."""
        if not self.fitted:
            raise RuntimeError("transform has not been fitted")
        return self.standardizer.apply(
            self._project(np.atleast_2d(samples)))[0]

    @property
    def output_dim(self) -> int:
        if not self.fitted:
            raise RuntimeError("transform has not been fitted")
        return int(self.standardizer.kept.size)

    def fingerprint(self) -> str:
        """SHA-256 over the fitted state; checkpoints record this value."""
        if not self.fitted:
            raise RuntimeError("transform has not been fitted")
        h = hashlib.sha256()
        h.update(f"{self.kind.value}|{self.n_components}|{self.window_len}|"
                 f"{self.hop}|{self.averaging_n}|{self.trace_length}|"
                 f"{int(self.label_kind)}".encode())
        for arr in (self.proj_mean, self.components, self.eigenvalues,
                    self.standardizer.mean, self.standardizer.std,
                    self.standardizer.kept):
            if arr is None:
                h.update(b"|none")
            else:
                h.update(b"|" + np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def fit_identity(train_set: TraceSet) -> FeatureTransform:
    return FeatureTransform(kind=TransformKind.IDENTITY).fit(train_set)


def fit_pca(train_set: TraceSet, n_components: int = 250) -> FeatureTransform:
    return FeatureTransform(kind=TransformKind.PCA,
                            n_components=n_components).fit(train_set)


def fit_lda(train_set: TraceSet, n_components: int = 10) -> FeatureTransform:
    return FeatureTransform(kind=TransformKind.LDA,
                            n_components=n_components).fit(train_set)


def fit_fft(train_set: TraceSet) -> FeatureTransform:
    return FeatureTransform(kind=TransformKind.FFT).fit(train_set)


def fit_spectrogram(train_set: TraceSet, window_len: int = 256,
                    hop: int = 128) -> FeatureTransform:
    return FeatureTransform(kind=TransformKind.SPECTROGRAM,
                            window_len=window_len, hop=hop).fit(train_set)


def fisher_ratio(x: np.ndarray, labels: np.ndarray, directions: np.ndarray) -> float:
    """trace(W^T S_B W) / trace(W^T S_W W) for a projection W."""
    classes, y = np.unique(labels, return_inverse=True)
    counts = np.bincount(y).astype(np.float64)
    mean = x.mean(axis=0)
    sums = np.zeros((classes.size, x.shape[1]))
    np.add.at(sums, y, x)
    class_means = sums / counts[:, None]
    xp = x @ directions
    mp = class_means @ directions
    gp = mean @ directions
    between = float((counts[:, None] * (mp - gp) ** 2).sum())
    within = float(((xp - mp[y]) ** 2).sum())
    if within == 0:
        return float("inf")
    return between / within
