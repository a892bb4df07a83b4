"""Bit-exact on-disk formats: traces, fitted transforms, model
checkpoints, heatmap exports, and JSON reports.

Trace container ("EMT1"): a 35-byte little-endian header (magic, format
version u16, n_traces u64, trace_length u32, label_kind u8, 16 reserved
zero bytes) followed by packed records of device_id u16, row u8, col u8,
plaintext u8, key u8, n_averaged u16 and trace_length float32 samples,
8 + 4*L bytes per record.

Transforms ("EMF1") and model checkpoints ("EMM1") share a simple blob
layout: magic, version u16, header length u32, a canonical JSON header,
then the raw array bytes in header order. All writes go through a
temp-file-plus-rename so partial files never appear, and nothing here
embeds timestamps, keeping repeated runs byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import LabelKind, TraceSet
from .leakage import Heatmap
from .mlp import MlpModel
from .preprocess import FeatureTransform, Standardizer, TransformKind

TRACE_MAGIC = b"EMT1"
TRANSFORM_MAGIC = b"EMF1"
MODEL_MAGIC = b"EMM1"
FORMAT_VERSION = 1

_HEADER_STRUCT = struct.Struct("<4sHQIB16s")

CSV_FIXED_COLUMNS = ["device_id", "row", "col", "plaintext", "key", "n_averaged"]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _record_dtype(trace_length: int) -> np.dtype:
    return np.dtype([
        ("device_id", "<u2"), ("row", "u1"), ("col", "u1"),
        ("plaintext", "u1"), ("key", "u1"), ("n_averaged", "<u2"),
        ("samples", "<f4", (trace_length,)),
    ])


def write_traces(path: str | Path, trace_set: TraceSet) -> None:
    n = len(trace_set)
    length = trace_set.trace_length
    header = _HEADER_STRUCT.pack(TRACE_MAGIC, FORMAT_VERSION, n, length,
                                 int(trace_set.label_kind), b"\x00" * 16)
    records = np.empty(n, dtype=_record_dtype(length))
    records["device_id"] = trace_set.device_ids
    records["row"] = trace_set.rows
    records["col"] = trace_set.cols
    records["plaintext"] = trace_set.plaintexts
    records["key"] = trace_set.keys
    records["n_averaged"] = trace_set.n_averaged
    records["samples"] = trace_set.samples
    atomic_write_bytes(path, header + records.tobytes())


def read_traces(path: str | Path) -> TraceSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_STRUCT.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, length, label_kind, reserved = _HEADER_STRUCT.unpack_from(raw)
    if magic != TRACE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, not a trace file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    dtype = _record_dtype(length)
    payload = raw[_HEADER_STRUCT.size:]
    if len(payload) != n * dtype.itemsize:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {n * dtype.itemsize}")
    records = np.frombuffer(payload, dtype=dtype)
    return TraceSet(
        samples=records["samples"].copy(),
        plaintexts=records["plaintext"].copy(),
        keys=records["key"].copy(),
        device_ids=records["device_id"].copy(),
        rows=records["row"].copy(),
        cols=records["col"].copy(),
        n_averaged=records["n_averaged"].copy(),
        label_kind=LabelKind(label_kind),
    )


# ---------------------------------------------------------------------------
# generic blob container

def _write_blob(path: str | Path, magic: bytes, meta: dict,
                arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        manifest.append({"name": name, "dtype": arr.dtype.str,
                         "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = magic + struct.pack("<HI", FORMAT_VERSION, len(header)) + header
    atomic_write_bytes(path, blob + b"".join(chunks))


def _read_blob(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != magic:
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(raw[10:10 + header_len].decode("utf-8"))
    offset = 10 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    return header["meta"], arrays


def save_transform(path: str | Path, transform: FeatureTransform) -> None:
    if not transform.fitted:
        raise ValueError("refusing to save an unfitted transform")
    meta = {
        "kind": transform.kind.value,
        "n_components": transform.n_components,
        "window_len": transform.window_len,
        "hop": transform.hop,
        "averaging_n": transform.averaging_n,
        "trace_length": transform.trace_length,
        "label_kind": int(transform.label_kind),
        "fingerprint": transform.fingerprint(),
    }
    arrays = {
        "std_mean": transform.standardizer.mean,
        "std_std": transform.standardizer.std,
        "std_kept": transform.standardizer.kept,
        "std_dropped": transform.standardizer.dropped,
    }
    for name in ("proj_mean", "components", "eigenvalues"):
        value = getattr(transform, name)
        if value is not None:
            arrays[name] = value
    _write_blob(path, TRANSFORM_MAGIC, meta, arrays)


def load_transform(path: str | Path) -> FeatureTransform:
    meta, arrays = _read_blob(path, TRANSFORM_MAGIC)
    transform = FeatureTransform(
        kind=TransformKind(meta["kind"]),
        n_components=meta["n_components"],
        window_len=meta["window_len"],
        hop=meta["hop"],
        averaging_n=meta["averaging_n"],
        trace_length=meta["trace_length"],
        label_kind=LabelKind(meta["label_kind"]),
        proj_mean=arrays.get("proj_mean"),
        components=arrays.get("components"),
        eigenvalues=arrays.get("eigenvalues"),
        standardizer=Standardizer(mean=arrays["std_mean"], std=arrays["std_std"],
                                  kept=arrays["std_kept"],
                                  dropped=arrays["std_dropped"]),
        fitted=True,
    )
    if transform.fingerprint() != meta["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch, file corrupt")
    return transform


def save_model(path: str | Path, model: MlpModel) -> None:
    meta = {
        "layer_dims": model.layer_dims,
        "dropout_rates": model.dropout_rates,
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
        "transform_fingerprint": model.transform_fingerprint,
    }
    arrays: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    for i in range(model.n_hidden):
        arrays[f"gamma{i}"] = model.gammas[i]
        arrays[f"beta{i}"] = model.betas[i]
        arrays[f"rmean{i}"] = model.running_means[i]
        arrays[f"rvar{i}"] = model.running_vars[i]
    _write_blob(path, MODEL_MAGIC, meta, arrays)


def load_model(path: str | Path) -> MlpModel:
    meta, arrays = _read_blob(path, MODEL_MAGIC)
    dims = meta["layer_dims"]
    n_hidden = len(dims) - 2
    model = MlpModel(
        layer_dims=dims,
        weights=[arrays[f"W{i}"] for i in range(n_hidden + 1)],
        biases=[arrays[f"b{i}"] for i in range(n_hidden + 1)],
        gammas=[arrays[f"gamma{i}"] for i in range(n_hidden)],
        betas=[arrays[f"beta{i}"] for i in range(n_hidden)],
        running_means=[arrays[f"rmean{i}"] for i in range(n_hidden)],
        running_vars=[arrays[f"rvar{i}"] for i in range(n_hidden)],
        dropout_rates=meta["dropout_rates"],
        bn_momentum=meta["bn_momentum"],
        bn_eps=meta["bn_eps"],
        transform_fingerprint=meta["transform_fingerprint"],
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# CSV interchange

def _parse_int(token: str, line_no: int, column: str) -> int:
    token = token.strip()
    try:
        return int(token, 16) if token.lower().startswith("0x") else int(token)
    except ValueError:
        raise ValueError(f"row {line_no}: bad integer {token!r} in {column}") from None


def import_csv(path: str | Path,
               label_kind: LabelKind = LabelKind.KEY_BYTE) -> TraceSet:
    """Strict-width CSV reader; byte columns accept decimal or 0x-hex."""
    rows = Path(path).read_text().splitlines()
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0].split(",")]
    if header[:len(CSV_FIXED_COLUMNS)] != CSV_FIXED_COLUMNS:
        raise ValueError(
            f"{path}: header must start with {','.join(CSV_FIXED_COLUMNS)}")
    length = len(header) - len(CSV_FIXED_COLUMNS)
    expected = [f"s{i}" for i in range(length)]
    if header[len(CSV_FIXED_COLUMNS):] != expected:
        raise ValueError(f"{path}: sample columns must be s0..s{length - 1}")
    if length < 1:
        raise ValueError(f"{path}: no sample columns")

    meta = {name: [] for name in CSV_FIXED_COLUMNS}
    samples = np.empty((len(rows) - 1, length), dtype=np.float32)
    for line_no, line in enumerate(rows[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(
                f"row {line_no}: has {len(parts)} fields, expected {len(header)}")
        for col, name in enumerate(CSV_FIXED_COLUMNS):
            meta[name].append(_parse_int(parts[col], line_no, name))
        try:
            vals = np.array(parts[len(CSV_FIXED_COLUMNS):], dtype=np.float32)
        except ValueError:
            raise ValueError(f"row {line_no}: unparseable sample value") from None
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"row {line_no}: non-finite sample value")
        samples[line_no - 2] = vals
    return TraceSet(
        samples=samples,
        plaintexts=np.array(meta["plaintext"], dtype=np.uint8),
        keys=np.array(meta["key"], dtype=np.uint8),
        device_ids=np.array(meta["device_id"], dtype=np.uint16),
        rows=np.array(meta["row"], dtype=np.uint8),
        cols=np.array(meta["col"], dtype=np.uint8),
        n_averaged=np.array(meta["n_averaged"], dtype=np.uint16),
        label_kind=label_kind,
    )


def export_csv(path: str | Path, trace_set: TraceSet) -> None:
    length = trace_set.trace_length
    lines = [",".join(CSV_FIXED_COLUMNS + [f"s{i}" for i in range(length)])]
    for i in range(len(trace_set)):
        fixed = [str(int(trace_set.device_ids[i])), str(int(trace_set.rows[i])),
                 str(int(trace_set.cols[i])), str(int(trace_set.plaintexts[i])),
                 str(int(trace_set.keys[i])), str(int(trace_set.n_averaged[i]))]
        # %.9g round-trips float32 exactly
        vals = ["%.9g" % v for v in trace_set.samples[i]]
        lines.append(",".join(fixed + vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# heatmap exports and JSON reports

def json_ready(obj):
    """Recursively convert to JSON-safe values; non-finite floats become
    strings so reports stay strictly valid JSON."""
    if isinstance(obj, dict):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_ready(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def write_json(path: str | Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(json_ready(payload), indent=2,
                                       sort_keys=True) + "\n")


def heatmap_to_csv(path: str | Path, heatmap: Heatmap) -> None:
    lines = [",".join("%.9g" % v if math.isfinite(v) else "nan" for v in row)
             for row in heatmap.values]
    atomic_write_text(path, "\n".join(lines) + "\n")


def heatmap_to_pgm(path: str | Path, heatmap: Heatmap) -> None:
    """P2 portable graymap, min-max normalized; NaN cells render as 0."""
    values = heatmap.values
    finite = values[np.isfinite(values)]
    if finite.size and finite.max() > finite.min():
        scaled = (values - finite.min()) / (finite.max() - finite.min()) * 255.0
    else:
        scaled = np.zeros_like(values)
    pixels = np.where(np.isfinite(values), np.round(scaled), 0).astype(int)
    rows, cols = pixels.shape
    body = "\n".join(" ".join(str(p) for p in row) for row in pixels)
    atomic_write_text(path, f"P2\n{cols} {rows}\n255\n{body}\n")


def heatmap_report(heatmap: Heatmap) -> dict:
    finite = heatmap.values[np.isfinite(heatmap.values)]
    report = {
        "metric": heatmap.metric.value,
        "complete": heatmap.complete,
        "metadata": heatmap.metadata,
    }
    if finite.size:
        r, c = heatmap.argmax_cell()
        report.update({
            "max_cell": [r, c],
            "max_value": float(heatmap.values[r, c]),
            "min_value": float(finite.min()),
        })
    return report
