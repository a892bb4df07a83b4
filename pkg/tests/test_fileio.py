import numpy as np
import pytest

from emsca.core import LabelKind, TraceSet
from emsca.fileio import (
    export_csv,
    heatmap_report,
    heatmap_to_csv,
    heatmap_to_pgm,
    import_csv,
    json_ready,
    load_model,
    load_transform,
    read_traces,
    save_model,
    save_transform,
    write_json,
    write_traces,
)
from emsca.leakage import Heatmap, MetricKind
from emsca.mlp import init_model
from emsca.preprocess import fit_lda, fit_pca
from emsca.simulate import GeneratorConfig, RandomPerDevice, gen_device_traces


@pytest.fixture
def sample_set():
    cfg = GeneratorConfig(trace_length=40, n_pois=4, seed=71)
    return gen_device_traces(cfg, 3, 64, RandomPerDevice(), 1,
                             LabelKind.SBOX_OUTPUT, location=(2, 5))


class TestTraceFile:
    def test_round_trip_bit_identical(self, tmp_path, sample_set):
        path = tmp_path / "t.emt"
        write_traces(path, sample_set)
        loaded = read_traces(path)
        assert np.array_equal(loaded.samples, sample_set.samples)
        assert np.array_equal(loaded.plaintexts, sample_set.plaintexts)
        assert np.array_equal(loaded.keys, sample_set.keys)
        assert np.array_equal(loaded.device_ids, sample_set.device_ids)
        assert np.array_equal(loaded.rows, sample_set.rows)
        assert np.array_equal(loaded.n_averaged, sample_set.n_averaged)
        assert loaded.label_kind == sample_set.label_kind

    def test_repeated_writes_byte_identical(self, tmp_path, sample_set):
        a, b = tmp_path / "a.emt", tmp_path / "b.emt"
        write_traces(a, sample_set)
        write_traces(b, sample_set)
        assert a.read_bytes() == b.read_bytes()

    def test_thousand_random_traces_round_trip(self, tmp_path):
        rng = np.random.default_rng(123)
        n, length = 1000, 24
        ts = TraceSet(
            samples=rng.normal(scale=7.0, size=(n, length)).astype(np.float32),
            plaintexts=rng.integers(0, 256, n, dtype=np.uint8),
            keys=rng.integers(0, 256, n, dtype=np.uint8),
            device_ids=rng.integers(0, 2 ** 16, n, dtype=np.uint16),
            rows=rng.integers(0, 10, n, dtype=np.uint8),
            cols=rng.integers(0, 10, n, dtype=np.uint8),
            n_averaged=rng.integers(1, 50, n, dtype=np.uint16),
            label_kind=LabelKind.KEY_BYTE,
        )
        path = tmp_path / "t.emt"
        write_traces(path, ts)
        loaded = read_traces(path)
        assert loaded.samples.tobytes() == ts.samples.tobytes()
        for field in ("plaintexts", "keys", "device_ids", "rows", "cols",
                      "n_averaged"):
            assert np.array_equal(getattr(loaded, field), getattr(ts, field))

    def test_record_size(self, tmp_path, sample_set):
        path = tmp_path / "t.emt"
        write_traces(path, sample_set)
        size = path.stat().st_size
        length = sample_set.trace_length
        assert size == 35 + len(sample_set) * (8 + 4 * length)

    def test_bad_magic_rejected(self, tmp_path, sample_set):
        path = tmp_path / "t.emt"
        write_traces(path, sample_set)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(data)
        with pytest.raises(ValueError, match="magic"):
            read_traces(path)

    def test_bad_version_rejected(self, tmp_path, sample_set):
        path = tmp_path / "t.emt"
        write_traces(path, sample_set)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(data)
        with pytest.raises(ValueError, match="version"):
            read_traces(path)

    def test_truncated_payload_rejected(self, tmp_path, sample_set):
        path = tmp_path / "t.emt"
        write_traces(path, sample_set)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(ValueError, match="payload"):
            read_traces(path)


class TestCsv:
    def test_single_row(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("device_id,row,col,plaintext,key,n_averaged,s0,s1,s2,s3\n"
                        "1,2,3,0x2B,0xA7,1,0.5,-1.25,3.0,4.5\n")
        ts = import_csv(path)
        assert len(ts) == 1 and ts.trace_length == 4
        assert ts.plaintexts[0] == 0x2B and ts.keys[0] == 0xA7
        assert ts.samples[0].tolist() == [0.5, -1.25, 3.0, 4.5]

    def test_ragged_row_reports_line_number(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("device_id,row,col,plaintext,key,n_averaged,s0,s1\n"
                        "1,2,3,4,5,1,0.5,0.5\n"
                        "1,2,3,4,5,1,0.5\n")
        with pytest.raises(ValueError, match="row 3"):
            import_csv(path)

    def test_non_finite_sample_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("device_id,row,col,plaintext,key,n_averaged,s0\n"
                        "1,2,3,4,5,1,nan\n")
        with pytest.raises(ValueError, match="row 2"):
            import_csv(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("device,row,col,plaintext,key,n_averaged,s0\n")
        with pytest.raises(ValueError, match="header"):
            import_csv(path)

    def test_csv_binary_csv_round_trip(self, tmp_path, sample_set):
        csv1 = tmp_path / "a.csv"
        export_csv(csv1, sample_set)
        ts = import_csv(csv1, label_kind=sample_set.label_kind)
        binary = tmp_path / "t.emt"
        write_traces(binary, ts)
        csv2 = tmp_path / "b.csv"
        export_csv(csv2, read_traces(binary))
        assert csv1.read_text() == csv2.read_text()
        assert np.array_equal(ts.samples, sample_set.samples)


class TestTransformBlob:
    def test_round_trip_preserves_fingerprint(self, tmp_path, sample_set):
        t = fit_pca(sample_set, 5)
        path = tmp_path / "t.emf"
        save_transform(path, t)
        loaded = load_transform(path)
        assert loaded.fingerprint() == t.fingerprint()
        assert np.array_equal(loaded.apply(sample_set), t.apply(sample_set))

    def test_lda_round_trip(self, tmp_path, sample_set):
        t = fit_lda(sample_set, 4)
        path = tmp_path / "t.emf"
        save_transform(path, t)
        loaded = load_transform(path)
        assert np.allclose(loaded.components, t.components)
        assert loaded.averaging_n == 1
        assert loaded.label_kind == LabelKind.SBOX_OUTPUT

    def test_unfitted_rejected(self, tmp_path):
        from emsca.preprocess import FeatureTransform, TransformKind
        with pytest.raises(ValueError, match="unfitted"):
            save_transform(tmp_path / "t.emf",
                           FeatureTransform(kind=TransformKind.FFT))

    def test_corruption_detected(self, tmp_path, sample_set):
        t = fit_pca(sample_set, 5)
        path = tmp_path / "t.emf"
        save_transform(path, t)
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(data)
        with pytest.raises(ValueError, match="corrupt"):
            load_transform(path)

    def test_repeated_saves_byte_identical(self, tmp_path, sample_set):
        t = fit_pca(sample_set, 5)
        a, b = tmp_path / "a.emf", tmp_path / "b.emf"
        save_transform(a, t)
        save_transform(b, t)
        assert a.read_bytes() == b.read_bytes()


class TestModelCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(16, seed=5, hidden_dims=(8, 8, 4),
                           dropout_rates=(0.4, 0.2, 0.2))
        model.transform_fingerprint = "ab" * 32
        path = tmp_path / "m.emm"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.layer_dims == model.layer_dims
        assert loaded.transform_fingerprint == model.transform_fingerprint
        for name, p in model.parameters().items():
            assert np.array_equal(p, loaded.parameters()[name])
        for i in range(model.n_hidden):
            assert np.array_equal(loaded.running_vars[i], model.running_vars[i])

    def test_repeated_saves_byte_identical(self, tmp_path):
        model = init_model(16, seed=5, hidden_dims=(8, 8, 4),
                           dropout_rates=(0.4, 0.2, 0.2))
        a, b = tmp_path / "a.emm", tmp_path / "b.emm"
        save_model(a, model)
        save_model(b, model)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_magic_rejected(self, tmp_path, sample_set):
        t = fit_pca(sample_set, 3)
        path = tmp_path / "t.emf"
        save_transform(path, t)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)


class TestHeatmapExports:
    def _heatmap(self):
        values = np.array([[1.0, 2.0], [np.nan, 4.0]])
        return Heatmap(values=values, metric=MetricKind.T_MAX, complete=False,
                       metadata={"cells": 3})

    def test_csv(self, tmp_path):
        path = tmp_path / "h.csv"
        heatmap_to_csv(path, self._heatmap())
        rows = path.read_text().splitlines()
        assert rows[0] == "1,2"
        assert rows[1].split(",")[0] == "nan"

    def test_pgm(self, tmp_path):
        path = tmp_path / "h.pgm"
        heatmap_to_pgm(path, self._heatmap())
        lines = path.read_text().splitlines()
        assert lines[0] == "P2"
        assert lines[1] == "2 2"
        assert lines[2] == "255"
        pixels = [int(v) for row in lines[3:] for v in row.split()]
        assert pixels == [0, 85, 0, 255]  # min->0, max->255, NaN->0

    def test_report(self):
        rep = heatmap_report(self._heatmap())
        assert rep["max_cell"] == [1, 1]
        assert rep["max_value"] == 4.0
        assert rep["complete"] is False


class TestJsonReady:
    def test_non_finite_floats_become_strings(self):
        out = json_ready({"a": float("inf"), "b": float("-inf"),
                          "c": float("nan"), "d": 1.5})
        assert out == {"a": "inf", "b": "-inf", "c": "nan", "d": 1.5}

    def test_numpy_types_converted(self, tmp_path):
        payload = {"arr": np.arange(3), "scalar": np.float64(2.5),
                   "int": np.int32(7)}
        write_json(tmp_path / "r.json", payload)
        import json
        loaded = json.loads((tmp_path / "r.json").read_text())
        assert loaded == {"arr": [0, 1, 2], "scalar": 2.5, "int": 7}
