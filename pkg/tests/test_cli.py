import json
from pathlib import Path

import numpy as np
import pytest

from emsca.cli import main
from emsca.config import ConfigError, RunConfig, config_from_dict, load_config
from emsca.fileio import read_traces


def write_config(tmp_path: Path, name: str = "config.json", **overrides) -> Path:
    cfg = {
        "generator": {"trace_length": 60, "n_pois": 6, "seed": 5,
                      "grid_size": 4, "hotspot": [1, 1], "noise_sigma": 0.3,
                      "base_weight_sigma": 0.8},
        "campaign": {"mode": "profiling", "n_devices": 2,
                     "traces_per_device": 512, "repeats_per_input": 2,
                     "key_mode": "random", "label_kind": "sbox_output"},
        "transform": {"kind": "lda", "n_components": 6, "averaging_n": 2},
        "training": {"max_epochs": 8, "batch_size": 32,
                     "hidden_dims": [16, 16, 8],
                     "dropout_rates": [0.1, 0.1, 0.1],
                     "validation_fraction": 0.15, "seed": 3},
        "selection": {"n_select": 2, "mode": "dissimilar"},
        "cema": {"schedule": [10, 20, 50, 100]},
    }
    for key, section in overrides.items():
        cfg.setdefault(key, {}).update(section)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults_load(self):
        cfg = config_from_dict({})
        assert cfg.generator.trace_length == 3000
        assert cfg.training.lr0 == 0.005
        assert cfg.transform.averaging_n == 20

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({"generatr": {}})

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError, match="training: unknown"):
            config_from_dict({"training": {"lr": 0.1}})

    def test_resolved_config_reloads_identically(self, tmp_path):
        cfg = config_from_dict({"generator": {"seed": 42}})
        path = tmp_path / "resolved.json"
        path.write_text(cfg.to_json())
        again = load_config(path)
        assert again.to_dict() == cfg.to_dict()

    def test_seed_override_hits_all_sections(self):
        cfg = RunConfig()
        cfg.override_seed(99)
        assert cfg.generator.seed == cfg.training.seed == cfg.selection.seed == 99

    def test_bad_generator_value_reports_section(self):
        with pytest.raises(ConfigError, match="generator"):
            config_from_dict({"generator": {"noise_sigma": -1}}
                             ).generator.to_generator_config()


@pytest.fixture(scope="module")
def gen_once(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp_path)
    out = tmp_path / "gen"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out)]) == 0
    return tmp_path, cfg_path, out


class TestGen:
    def test_outputs_present(self, gen_once):
        _, _, out = gen_once
        assert (out / "traces.emt").exists()
        assert (out / "resolved_config.json").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_traces"] == 1024
        assert summary["devices"] == [0, 1]

    def test_rerun_bit_identical(self, gen_once, tmp_path):
        _, cfg_path, out = gen_once
        out2 = tmp_path / "gen2"
        assert main(["gen", "--config", str(cfg_path), "--out", str(out2)]) == 0
        assert (out / "traces.emt").read_bytes() == (out2 / "traces.emt").read_bytes()
        assert ((out / "resolved_config.json").read_text()
                == (out2 / "resolved_config.json").read_text())

    def test_rerun_from_resolved_config_identical(self, gen_once, tmp_path):
        _, _, out = gen_once
        out2 = tmp_path / "gen_resolved"
        assert main(["gen", "--config", str(out / "resolved_config.json"),
                     "--out", str(out2)]) == 0
        assert (out / "traces.emt").read_bytes() == (out2 / "traces.emt").read_bytes()

    def test_seed_override_changes_traces(self, gen_once, tmp_path):
        _, cfg_path, out = gen_once
        out2 = tmp_path / "gen_seeded"
        assert main(["gen", "--config", str(cfg_path), "--seed", "77",
                     "--out", str(out2)]) == 0
        assert ((out / "traces.emt").read_bytes()
                != (out2 / "traces.emt").read_bytes())

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"generator": {"bogus_key": 1}}')
        assert main(["gen", "--config", str(bad), "--out",
                     str(tmp_path / "x")]) == 2

    def test_invalid_json_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["gen", "--config", str(bad), "--out",
                     str(tmp_path / "x")]) == 2


@pytest.fixture(scope="module")
def full_pipeline(gen_once, tmp_path_factory):
    tmp_path, cfg_path, gen_out = gen_once
    pre_out = tmp_path / "pre"
    assert main(["preprocess", "--config", str(cfg_path),
                 "--traces", str(gen_out / "traces.emt"),
                 "--out", str(pre_out)]) == 0
    train_out = tmp_path / "train"
    assert main(["train", "--config", str(cfg_path),
                 "--traces", str(gen_out / "traces.emt"),
                 "--transform", str(pre_out / "transform.emf"),
                 "--out", str(train_out)]) == 0
    return tmp_path, cfg_path, gen_out, pre_out, train_out


class TestPipeline:
    def test_preprocess_summary(self, full_pipeline):
        _, _, _, pre_out, _ = full_pipeline
        summary = json.loads((pre_out / "summary.json").read_text())
        assert summary["kind"] == "lda"
        assert summary["output_dim"] == 6
        assert len(summary["fingerprint"]) == 64

    def test_train_outputs(self, full_pipeline):
        _, _, _, _, train_out = full_pipeline
        assert (train_out / "model.emm").exists()
        history = json.loads((train_out / "history.json").read_text())
        assert len(history["val_accuracy"]) <= 8
        lrs = history["learning_rate"]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_train_rejects_mismatched_transform(self, full_pipeline, tmp_path):
        tmp, cfg_path, gen_out, pre_out, _ = full_pipeline
        # refit the transform on different traces -> fingerprint differs,
        # but worse: give train a transform fitted at another trace length
        other_cfg = write_config(tmp_path, generator={"trace_length": 80})
        other_gen = tmp_path / "og"
        assert main(["gen", "--config", str(other_cfg), "--out",
                     str(other_gen)]) == 0
        rc = main(["train", "--config", str(cfg_path),
                   "--traces", str(other_gen / "traces.emt"),
                   "--transform", str(pre_out / "transform.emf"),
                   "--out", str(tmp_path / "bad_train")])
        assert rc == 2

    def test_attack_stage(self, full_pipeline, tmp_path):
        tmp, cfg_path, gen_out, pre_out, train_out = full_pipeline
        scan_cfg = write_config(
            tmp_path,
            campaign={"mode": "scan", "traces_per_device": 64,
                      "repeats_per_input": 2, "key_byte": 0x4B,
                      "device_id": 1, "key_mode": "fixed"})
        scan_out = tmp_path / "scan"
        assert main(["gen", "--config", str(scan_cfg), "--out",
                     str(scan_out)]) == 0
        attack_out = tmp_path / "attack"
        rc = main(["attack", "--config", str(scan_cfg),
                   "--traces", str(scan_out / "traces.emt"),
                   "--model", str(train_out / "model.emm"),
                   "--transform", str(pre_out / "transform.emf"),
                   "--out", str(attack_out)])
        assert rc == 0
        report = json.loads((attack_out / "attack_report.json").read_text())
        assert 0 <= report["predicted_key"] <= 255
        assert (attack_out / "confidence_heatmap.pgm").exists()
        assert (attack_out / "accuracy_heatmap.csv").exists()

    def test_attack_wrong_transform_exits_2(self, full_pipeline, tmp_path):
        tmp, cfg_path, gen_out, pre_out, train_out = full_pipeline
        other_pre = tmp_path / "pre_pca"
        pca_cfg = write_config(tmp_path, transform={"kind": "pca",
                                                    "n_components": 6,
                                                    "averaging_n": 2})
        assert main(["preprocess", "--config", str(pca_cfg),
                     "--traces", str(gen_out / "traces.emt"),
                     "--out", str(other_pre)]) == 0
        rc = main(["attack", "--config", str(cfg_path),
                   "--traces", str(gen_out / "traces.emt"),
                   "--model", str(train_out / "model.emm"),
                   "--transform", str(other_pre / "transform.emf"),
                   "--out", str(tmp_path / "bad_attack")])
        assert rc == 2


class TestAssessmentCommands:
    def test_select(self, gen_once, tmp_path):
        _, cfg_path, gen_out = gen_once
        out = tmp_path / "select"
        assert main(["select", "--config", str(cfg_path),
                     "--traces", str(gen_out / "traces.emt"),
                     "--out", str(out)]) == 0
        selection = json.loads((out / "selection.json").read_text())
        assert len(selection["device_ids"]) == 2

    def test_snr(self, gen_once, tmp_path):
        _, cfg_path, gen_out = gen_once
        out = tmp_path / "snr"
        assert main(["snr", "--config", str(cfg_path),
                     "--traces", str(gen_out / "traces.emt"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert "snr_db" in summary
        assert (out / "snr_per_sample.csv").exists()

    def test_tvla_and_cema(self, gen_once, tmp_path):
        tmp, cfg_path, gen_out = gen_once
        fixed_cfg = write_config(
            tmp_path, name="fixed.json",
            campaign={"mode": "fixed", "traces_per_device": 400,
                      "device_id": 0, "fixed_plaintext": 0xA7,
                      "key_byte": 0x2B})
        random_cfg = write_config(
            tmp_path, name="random.json",
            campaign={"mode": "profiling", "n_devices": 1,
                      "traces_per_device": 400,
                      "repeats_per_input": 1, "key_mode": "fixed",
                      "key_byte": 0x2B, "label_kind": "sbox_output"})
        fixed_out, random_out = tmp / "fixed", tmp / "random"
        assert main(["gen", "--config", str(fixed_cfg), "--out",
                     str(fixed_out)]) == 0
        assert main(["gen", "--config", str(random_cfg), "--out",
                     str(random_out)]) == 0
        tvla_out = tmp / "tvla"
        assert main(["tvla", "--fixed", str(fixed_out / "traces.emt"),
                     "--random", str(random_out / "traces.emt"),
                     "--out", str(tvla_out)]) == 0
        summary = json.loads((tvla_out / "summary.json").read_text())
        assert summary["leak_detected"] is True  # hotspot leaks

        cema_out = tmp / "cema"
        assert main(["cema", "--config", str(random_cfg),
                     "--traces", str(random_out / "traces.emt"),
                     "--out", str(cema_out)]) == 0
        summary = json.loads((cema_out / "summary.json").read_text())
        assert summary["true_key"] == 0x2B

    def test_report_consolidates(self, gen_once, tmp_path):
        _, cfg_path, gen_out = gen_once
        out = tmp_path / "report"
        assert main(["report", str(gen_out), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert "summaries" in report

    def test_missing_traces_runtime_error(self, gen_once, tmp_path):
        _, cfg_path, _ = gen_once
        rc = main(["snr", "--config", str(cfg_path), "--traces",
                   str(tmp_path / "nope.emt"), "--out", str(tmp_path / "o")])
        assert rc == 1
