"""Run configuration: one JSON document drives every pipeline stage.

Loading is strict (unknown keys are rejected with their dotted path) and
every stage writes back the fully resolved configuration, so a run can
be reproduced bit-exactly from its output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import LabelKind
from .simulate import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class CampaignSection:
    mode: str = "profiling"              # profiling | fixed | scan
    n_devices: int = 20
    traces_per_device: int = 5120
    repeats_per_input: int = 20
    key_mode: str = "random"             # random | fixed
    key_byte: int = 0x2B
    label_kind: str = "sbox_output"      # key_byte | sbox_output
    location: list[int] | None = None    # null = generator hotspot
    fixed_plaintext: int = 0xA7          # only for mode == "fixed"
    device_id: int = 0                   # only for fixed / scan modes

    def label_kind_enum(self) -> LabelKind:
        try:
            return {"key_byte": LabelKind.KEY_BYTE,
                    "sbox_output": LabelKind.SBOX_OUTPUT}[self.label_kind]
        except KeyError:
            raise ConfigError(f"campaign.label_kind: unknown value {self.label_kind!r}")


@dataclass
class TransformSection:
    kind: str = "lda"                    # identity | pca | lda | fft | spectrogram
    n_components: int = 10
    window_len: int = 256
    hop: int = 128
    averaging_n: int = 20


@dataclass
class TrainingSection:
    lr0: float = 0.005
    plateau_patience: int = 5
    lr_factor: float = 0.5
    batch_size: int = 64
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int | None = 15
    validation_fraction: float = 0.1
    hidden_dims: list[int] = field(default_factory=lambda: [100, 1024, 512])
    dropout_rates: list[float] = field(default_factory=lambda: [0.45, 0.20, 0.20])
    seed: int = 0


@dataclass
class SelectionSection:
    n_select: int = 10
    mode: str = "dissimilar"             # dissimilar | similar | random
    min_separation: int = 5
    seed: int = 0


@dataclass
class AttackSection:
    r_min: float = 2.0
    max_traces: int = 20
    confidence_queries: int = 20
    blind: bool = False


@dataclass
class CemaSection:
    schedule: list[int] = field(
        default_factory=lambda: [10, 20, 50, 100, 200, 250, 500, 1000, 2000])


@dataclass
class SnrSection:
    class_fn: str = "byte"               # byte | hw


@dataclass
class GeneratorSection:
    trace_length: int = 3000
    n_pois: int = 8
    poi_positions: list[int] | None = None
    aux_poi_count: int | None = None
    base_weight_sigma: float = 0.6
    bit_weight_sigma: float = 0.15
    poi_amplitudes: list[float] | None = None
    poi_pulse_len: int = 1
    gain_sigma: float = 0.10
    offset_sigma: float = 0.05
    poi_jitter_sigma: float = 0.05
    noise_sigma: float = 0.15
    hotspot: list[int] = field(default_factory=lambda: [1, 2])
    spatial_scale: float = 1.5
    grid_size: int = 10
    seed: int = 0

    def to_generator_config(self) -> GeneratorConfig:
        try:
            return GeneratorConfig(
                trace_length=self.trace_length,
                n_pois=self.n_pois,
                poi_positions=None if self.poi_positions is None
                else tuple(self.poi_positions),
                aux_poi_count=self.aux_poi_count,
                base_weight_sigma=self.base_weight_sigma,
                bit_weight_sigma=self.bit_weight_sigma,
                poi_amplitudes=None if self.poi_amplitudes is None
                else tuple(self.poi_amplitudes),
                poi_pulse_len=self.poi_pulse_len,
                gain_sigma=self.gain_sigma,
                offset_sigma=self.offset_sigma,
                poi_jitter_sigma=self.poi_jitter_sigma,
                noise_sigma=self.noise_sigma,
                hotspot=tuple(self.hotspot),
                spatial_scale=self.spatial_scale,
                grid_size=self.grid_size,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(f"generator: {exc}") from exc


@dataclass
class RunConfig:
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    campaign: CampaignSection = field(default_factory=CampaignSection)
    transform: TransformSection = field(default_factory=TransformSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    attack: AttackSection = field(default_factory=AttackSection)
    cema: CemaSection = field(default_factory=CemaSection)
    snr: SnrSection = field(default_factory=SnrSection)

    def override_seed(self, seed: int) -> None:
        self.generator.seed = seed
        self.training.seed = seed
        self.selection.seed = seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected an object")
    sections = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"top level: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    types = {"generator": GeneratorSection, "campaign": CampaignSection,
             "transform": TransformSection, "training": TrainingSection,
             "selection": SelectionSection, "attack": AttackSection,
             "cema": CemaSection, "snr": SnrSection}
    for name, cls in types.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
