"""Shared domain types and the AES-128 first-round target function.

Everything downstream (simulation, preprocessing, training, leakage
assessment, attack) consumes the types defined here. Traces are stored
columnar: one TraceSet holds parallel arrays instead of a list of
objects, which keeps the numeric code vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# FIPS-197 SubBytes table.
SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

INV_SBOX = np.zeros(256, dtype=np.uint8)
INV_SBOX[SBOX] = np.arange(256, dtype=np.uint8)

# hamming_weight(x) == HW_TABLE[x] for bytes.
HW_TABLE = np.array([bin(x).count("1") for x in range(256)], dtype=np.uint8)


def sbox(x):
    """FIPS-197 S-box. Accepts a byte or an array of bytes."""
    return SBOX[x]


def inv_sbox(x):
    """Inverse S-box."""
    return INV_SBOX[x]


def hamming_weight(x):
    """Number of set bits of a byte (or array of bytes)."""
    return HW_TABLE[x]


def intermediate(plaintext, key):
    """First-round attack target: sbox(plaintext XOR key).

    Vectorized over numpy arrays; scalars in, scalar out.
    """
    p = np.asarray(plaintext, dtype=np.uint8)
    k = np.asarray(key, dtype=np.uint8)
    out = SBOX[p ^ k]
    if np.isscalar(plaintext) and np.isscalar(key):
        return int(out)
    return out


def byte_bits(values):
    """Bit matrix of shape (n, 8), LSB first, for an array of bytes."""
    v = np.asarray(values, dtype=np.uint8).reshape(-1, 1)
    return ((v >> np.arange(8, dtype=np.uint8)) & 1).astype(np.float64)


class LabelKind(IntEnum):
    """Which byte a classifier is trained to predict."""

    KEY_BYTE = 0
    SBOX_OUTPUT = 1


@dataclass(frozen=True)
class Trace:
    """One acquisition: sample vector plus its metadata."""

    samples: np.ndarray
    plaintext: int
    key: int
    device_id: int
    location: tuple[int, int]
    n_averaged: int = 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TraceSet:
    """Homogeneous collection of traces, stored as parallel arrays.

    samples      (n, L) float32
    plaintexts   (n,)   uint8
    keys         (n,)   uint8
    device_ids   (n,)   uint16
    rows, cols   (n,)   uint8      grid location of each trace
    n_averaged   (n,)   uint16     1 = raw capture

    Instances are immutable: arrays are marked read-only at construction
    and every operation returns a new set.
    """

    samples: np.ndarray
    plaintexts: np.ndarray
    keys: np.ndarray
    device_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    n_averaged: np.ndarray
    label_kind: LabelKind = LabelKind.KEY_BYTE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {samples.shape}")
        n = samples.shape[0]
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        meta = {
            "plaintexts": np.asarray(self.plaintexts, dtype=np.uint8),
            "keys": np.asarray(self.keys, dtype=np.uint8),
            "device_ids": np.asarray(self.device_ids, dtype=np.uint16),
            "rows": np.asarray(self.rows, dtype=np.uint8),
            "cols": np.asarray(self.cols, dtype=np.uint8),
            "n_averaged": np.asarray(self.n_averaged, dtype=np.uint16),
        }
        for name, arr in meta.items():
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        if n and meta["n_averaged"].min() < 1:
            raise ValueError("n_averaged must be >= 1")
        object.__setattr__(self, "samples", _readonly(samples))
        for name, arr in meta.items():
            object.__setattr__(self, name, _readonly(arr))
        object.__setattr__(self, "label_kind", LabelKind(self.label_kind))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def trace_length(self) -> int:
        return self.samples.shape[1]

    def labels(self) -> np.ndarray:
        """Class labels (uint8) under this set's label_kind."""
        if self.label_kind == LabelKind.KEY_BYTE:
            return self.keys.copy()
        return intermediate(self.plaintexts, self.keys)

    def trace(self, i: int) -> Trace:
        return Trace(
            samples=self.samples[i],
            plaintext=int(self.plaintexts[i]),
            key=int(self.keys[i]),
            device_id=int(self.device_ids[i]),
            location=(int(self.rows[i]), int(self.cols[i])),
            n_averaged=int(self.n_averaged[i]),
        )

    def subset(self, index) -> "TraceSet":
        """New TraceSet with the rows selected by a numpy index."""
        return TraceSet(
            samples=self.samples[index],
            plaintexts=self.plaintexts[index],
            keys=self.keys[index],
            device_ids=self.device_ids[index],
            rows=self.rows[index],
            cols=self.cols[index],
            n_averaged=self.n_averaged[index],
            label_kind=self.label_kind,
        )

    def split_by_device(self) -> dict[int, "TraceSet"]:
        return {
            int(d): self.subset(self.device_ids == d)
            for d in np.unique(self.device_ids)
        }

    def split_by_location(self) -> dict[tuple[int, int], "TraceSet"]:
        cells = np.unique(np.stack([self.rows, self.cols], axis=1), axis=0)
        return {
            (int(r), int(c)): self.subset((self.rows == r) & (self.cols == c))
            for r, c in cells
        }

    @classmethod
    def concatenate(cls, sets: "list[TraceSet]") -> "TraceSet":
        if not sets:
            raise ValueError("cannot concatenate an empty list of trace sets")
        lengths = {s.trace_length for s in sets}
        if len(lengths) != 1:
            raise ValueError(f"trace lengths differ: {sorted(lengths)}")
        kinds = {s.label_kind for s in sets}
        if len(kinds) != 1:
            raise ValueError("label_kind differs between sets")
        return cls(
            samples=np.concatenate([s.samples for s in sets]),
            plaintexts=np.concatenate([s.plaintexts for s in sets]),
            keys=np.concatenate([s.keys for s in sets]),
            device_ids=np.concatenate([s.device_ids for s in sets]),
            rows=np.concatenate([s.rows for s in sets]),
            cols=np.concatenate([s.cols for s in sets]),
            n_averaged=np.concatenate([s.n_averaged for s in sets]),
            label_kind=sets[0].label_kind,
        )


def traceset_from_traces(traces: list[Trace], label_kind=LabelKind.KEY_BYTE) -> TraceSet:
    """Build a TraceSet from individual Trace records (all same length)."""
    if not traces:
        raise ValueError("no traces given")
    return TraceSet(
        samples=np.stack([t.samples for t in traces]),
        plaintexts=np.array([t.plaintext for t in traces], dtype=np.uint8),
        keys=np.array([t.key for t in traces], dtype=np.uint8),
        device_ids=np.array([t.device_id for t in traces], dtype=np.uint16),
        rows=np.array([t.location[0] for t in traces], dtype=np.uint8),
        cols=np.array([t.location[1] for t in traces], dtype=np.uint8),
        n_averaged=np.array([t.n_averaged for t in traces], dtype=np.uint16),
        label_kind=label_kind,
    )
