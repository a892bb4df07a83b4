"""Synthetic EM trace generation with device-to-device variation.

Each trace is Gaussian noise plus a DC offset, with leakage injected at a
small set of POI samples. A POI carries a per-bit weighted sum of one of
three byte values: the first-round intermediate sbox(pt ^ key), the
plaintext, or pt ^ key. The plaintext-dependent POIs make the key byte
identifiable from joint leakage even under random plaintexts. Leakage
amplitude falls off with a Gaussian kernel around a grid hotspot.

Bit weights have two parts: a base pattern shared by every device (drawn
once from the config seed; the silicon design each unit implements) and
a per-device deviation with std bit_weight_sigma (process variation).
Only the base pattern carries class structure that transfers to unseen
devices; with a flat base, byte values of equal Hamming weight would be
indistinguishable across devices no matter how many traces are used.

RNG streams are split per (device, group) with numpy's Philox, so traces
can be generated in any order, per device or per cell, with identical
results.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import INV_SBOX, LabelKind, Trace, TraceSet, byte_bits, intermediate
from .leakage import ClassFn, snr


@dataclass(frozen=True)
class FixedKey:
    key: int

    def __post_init__(self):
        if not 0 <= self.key <= 255:
            raise ValueError("key byte out of range")


@dataclass(frozen=True)
class RandomPerDevice:
    pass


KeyMode = FixedKey | RandomPerDevice


def default_poi_positions(trace_length: int, n_pois: int) -> tuple[int, ...]:
    """Evenly spaced POI positions away from the trace edges."""
    if n_pois == 0:
        return ()
    if n_pois == 1:
        return (trace_length // 2,)
    pos = np.linspace(0.05 * trace_length, 0.95 * trace_length, n_pois)
    out = tuple(int(round(p)) for p in pos)
    if len(set(out)) != n_pois:
        raise ValueError("trace too short for the requested POI count")
    return out


@dataclass(frozen=True)
class GeneratorConfig:
    """Geometry and variation parameters of the simulated capture bench."""

    trace_length: int = 3000
    n_pois: int = 8
    poi_positions: tuple[int, ...] | None = None
    aux_poi_count: int | None = None     # leading POIs leaking pt / pt^key
    base_weight_sigma: float = 0.6       # device-independent bit pattern spread
    bit_weight_sigma: float = 0.15       # per-device weight deviation
    poi_amplitudes: tuple[float, ...] | None = None  # per-POI coupling, 1 = full
    poi_pulse_len: int = 1               # 1 = single-sample leak; odd if > 1
    gain_sigma: float = 0.10
    offset_sigma: float = 0.05
    poi_jitter_sigma: float = 0.05
    noise_sigma: float = 0.15            # ~19.5 dB single-device SNR at the hotspot
    hotspot: tuple[int, int] = (1, 2)
    spatial_scale: float = 1.5
    grid_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trace_length < 1:
            raise ValueError("trace_length must be positive")
        if self.n_pois < 0:
            raise ValueError("n_pois must be >= 0")
        if self.poi_positions is None:
            object.__setattr__(
                self, "poi_positions",
                default_poi_positions(self.trace_length, self.n_pois))
        else:
            object.__setattr__(self, "poi_positions",
                               tuple(int(p) for p in self.poi_positions))
        if len(self.poi_positions) != self.n_pois:
            raise ValueError("poi_positions length must equal n_pois")
        if len(set(self.poi_positions)) != self.n_pois:
            raise ValueError("poi_positions must be distinct")
        if any(not 0 <= p < self.trace_length for p in self.poi_positions):
            raise ValueError("poi_positions out of range")
        if self.aux_poi_count is None:
            object.__setattr__(self, "aux_poi_count",
                               min(3, max(0, self.n_pois - 1)))
        if not 0 <= self.aux_poi_count <= self.n_pois:
            raise ValueError("aux_poi_count out of range")
        for name in ("base_weight_sigma", "bit_weight_sigma", "gain_sigma",
                     "offset_sigma", "poi_jitter_sigma", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.poi_amplitudes is not None:
            amps = tuple(float(a) for a in self.poi_amplitudes)
            object.__setattr__(self, "poi_amplitudes", amps)
            if len(amps) != self.n_pois:
                raise ValueError("poi_amplitudes length must equal n_pois")
            if any(a <= 0 for a in amps):
                raise ValueError("poi_amplitudes entries must be > 0")
        if self.poi_pulse_len < 1 or (self.poi_pulse_len > 1
                                      and self.poi_pulse_len % 2 == 0):
            raise ValueError("poi_pulse_len must be 1 or an odd integer > 1")
        if self.poi_pulse_len > 1:
            half = self.poi_pulse_len // 2
            for p in self.poi_positions:
                if p - half < 0 or p + half >= self.trace_length:
                    raise ValueError(
                        f"pulse around POI {p} spills outside the trace")
        if self.spatial_scale <= 0:
            raise ValueError("spatial_scale must be > 0")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        r, c = self.hotspot
        if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
            raise ValueError("hotspot outside the grid")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def spatial_gain(self, location: tuple[int, int]) -> float:
        """Gaussian falloff exp(-d^2 / (2 s^2)) from the hotspot."""
        r, c = location
        if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
            raise ValueError(f"location {location} outside the grid")
        d2 = (r - self.hotspot[0]) ** 2 + (c - self.hotspot[1]) ** 2
        return math.exp(-d2 / (2.0 * self.spatial_scale ** 2))


@dataclass(frozen=True)
class DeviceProfile:
    """Per-device process variation realization."""

    device_id: int
    bit_weights: np.ndarray   # (n_pois, 8), strictly positive, near 1
    gain: float               # > 0, near 1
    dc_offset: float
    poi_jitter: np.ndarray    # (n_pois,), near 1


def _stream(config: GeneratorConfig, *spawn_key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=config.seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))


def base_bit_weights(config: GeneratorConfig) -> np.ndarray:
    """Device-independent weight pattern, (n_pois, 8).

    Rows are scaled by the per-POI coupling profile when one is
    configured, so some POIs emit weaker leakage than others. Depends
    only on (seed, n_pois, base_weight_sigma, poi_amplitudes), so
    calibration sweeps over noise_sigma keep the same pattern.
    """
    rng = _stream(config, 7)
    base = 1.0 + config.base_weight_sigma * rng.standard_normal((config.n_pois, 8))
    base = np.maximum(base, 0.1)
    if config.poi_amplitudes is not None:
        base = base * np.asarray(config.poi_amplitudes)[:, None]
    return base


def gen_device(config: GeneratorConfig, device_id: int) -> DeviceProfile:
    """Deterministic device realization for (config.seed, device_id).

    The weight deviation (and the positivity floor) scales with the POI
    coupling profile: weakly coupled POIs vary proportionally less.
    """
    if device_id < 0:
        raise ValueError("device_id must be non-negative")
    rng = _stream(config, 0, device_id)
    deviation = config.bit_weight_sigma * rng.standard_normal((config.n_pois, 8))
    floor = np.full((config.n_pois, 1), 0.05)
    if config.poi_amplitudes is not None:
        amps = np.asarray(config.poi_amplitudes)[:, None]
        deviation = deviation * amps
        floor = floor * amps
    weights = np.maximum(base_bit_weights(config) + deviation, floor)
    gain = max(1.0 + config.gain_sigma * float(rng.standard_normal()), 0.1)
    offset = config.offset_sigma * float(rng.standard_normal())
    jitter = 1.0 + config.poi_jitter_sigma * rng.standard_normal(config.n_pois)
    jitter = np.maximum(jitter, 0.05)
    weights.setflags(write=False)
    jitter.setflags(write=False)
    return DeviceProfile(device_id=device_id, bit_weights=weights, gain=gain,
                         dc_offset=offset, poi_jitter=jitter)


def _leaked_bytes(config: GeneratorConfig, plaintexts: np.ndarray,
                  keys: np.ndarray) -> np.ndarray:
    """Byte value leaked at each POI, shape (n_traces, n_pois).

    Auxiliary POIs alternate plaintext / pt^key; the rest leak the
    first-round intermediate.
    """
    n = plaintexts.shape[0]
    out = np.empty((n, config.n_pois), dtype=np.uint8)
    inter = intermediate(plaintexts, keys)
    for j in range(config.n_pois):
        if j < config.aux_poi_count:
            out[:, j] = plaintexts if j % 2 == 0 else plaintexts ^ keys
        else:
            out[:, j] = inter
    return out


def noiseless_poi_amplitudes(profile: DeviceProfile, config: GeneratorConfig,
                             plaintexts: np.ndarray, keys: np.ndarray,
                             location: tuple[int, int]) -> np.ndarray:
    """Leakage amplitude at each POI without noise or offset, (n, n_pois)."""
    a = config.spatial_gain(location)
    leaked = _leaked_bytes(config, np.asarray(plaintexts, dtype=np.uint8),
                           np.asarray(keys, dtype=np.uint8))
    amps = np.empty(leaked.shape, dtype=np.float64)
    for j in range(config.n_pois):
        bits = byte_bits(leaked[:, j])               # (n, 8)
        amps[:, j] = bits @ profile.bit_weights[j]
        amps[:, j] *= profile.gain * profile.poi_jitter[j] * a
    return amps


def poi_pulse_kernels(config: GeneratorConfig) -> np.ndarray:
    """Per-POI emission kernel, (n_pois, pulse_len), peak-normalized.

    A pulse is a Hann-windowed cosine burst at a POI-specific frequency
    (spread over 0.08..0.42 cycles/sample), with value exactly 1 at the
    center sample, so the configured amplitude lands on the POI position
    itself and the ringing decays around it. Length 1 reduces to the
    plain single-sample leak.
    """
    length = config.poi_pulse_len
    if length == 1 or config.n_pois == 0:
        return np.ones((config.n_pois, 1))
    t = np.arange(length) - length // 2
    window = np.hanning(length + 2)[1:-1]  # nonzero at the edges
    if config.n_pois == 1:
        freqs = np.array([0.25])
    else:
        freqs = np.linspace(0.08, 0.42, config.n_pois)
    kernels = window[None, :] * np.cos(2 * np.pi * freqs[:, None] * t[None, :])
    return kernels / kernels[:, length // 2:length // 2 + 1]


def _synth_block(profile: DeviceProfile, config: GeneratorConfig,
                 plaintexts: np.ndarray, keys: np.ndarray,
                 location: tuple[int, int],
                 rng: np.random.Generator) -> np.ndarray:
    """Sample matrix (n, L) for traces sharing one location."""
    n = plaintexts.shape[0]
    block = rng.standard_normal((n, config.trace_length))
    block *= config.noise_sigma
    block += profile.dc_offset
    if config.n_pois:
        amps = noiseless_poi_amplitudes(profile, config, plaintexts, keys, location)
        if config.poi_pulse_len == 1:
            block[:, np.asarray(config.poi_positions)] += amps
        else:
            kernels = poi_pulse_kernels(config)
            half = config.poi_pulse_len // 2
            for j, p in enumerate(config.poi_positions):
                block[:, p - half:p + half + 1] += np.outer(amps[:, j],
                                                            kernels[j])
    return block.astype(np.float32)


def gen_trace(profile: DeviceProfile, config: GeneratorConfig, plaintext: int,
              key: int, location: tuple[int, int],
              rng: np.random.Generator) -> Trace:
    """One trace from an explicit RNG stream."""
    pts = np.array([plaintext], dtype=np.uint8)
    keys = np.array([key], dtype=np.uint8)
    block = _synth_block(profile, config, pts, keys, location, rng)
    return Trace(samples=block[0], plaintext=plaintext, key=key,
                 device_id=profile.device_id, location=location, n_averaged=1)


def _balanced_values(count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` bytes covering 0..255 as evenly as possible (max-min <= 1)."""
    base = count // 256
    rem = count % 256
    vals = np.repeat(np.arange(256, dtype=np.uint8), base)
    if rem:
        extra = rng.choice(256, size=rem, replace=False).astype(np.uint8)
        vals = np.concatenate([vals, extra])
    rng.shuffle(vals)
    return vals


def gen_device_traces(
    config: GeneratorConfig,
    device_id: int,
    traces_per_device: int,
    key_mode: KeyMode,
    repeats_per_input: int = 1,
    label_kind: LabelKind = LabelKind.KEY_BYTE,
    location: tuple[int, int] | None = None,
    stream: int = 0,
) -> TraceSet:
    """One device's campaign: balanced labels, repeated inputs for averaging.

    Emits `repeats_per_input` raw traces per (plaintext, key) group so the
    groups can be n-way averaged downstream. The varying byte (the key
    under RandomPerDevice, otherwise the plaintext) is balanced across
    256 values to within one group. `stream` namespaces the RNG so
    disjoint campaigns for the same device stay independent.
    """
    if repeats_per_input < 1:
        raise ValueError("repeats_per_input must be >= 1")
    if traces_per_device % repeats_per_input != 0:
        raise ValueError(
            f"traces_per_device={traces_per_device} not divisible by "
            f"repeats_per_input={repeats_per_input}")
    loc = config.hotspot if location is None else (int(location[0]), int(location[1]))
    config.spatial_gain(loc)  # validates the location
    n_groups = traces_per_device // repeats_per_input
    profile = gen_device(config, device_id)

    draw = _stream(config, 2, device_id, stream)
    balanced = _balanced_values(n_groups, draw)
    if label_kind == LabelKind.SBOX_OUTPUT:
        if isinstance(key_mode, FixedKey):
            keys = np.full(n_groups, key_mode.key, dtype=np.uint8)
        else:
            keys = draw.integers(0, 256, size=n_groups, dtype=np.uint8)
        pts = INV_SBOX[balanced] ^ keys
    else:
        if isinstance(key_mode, FixedKey):
            keys = np.full(n_groups, key_mode.key, dtype=np.uint8)
            pts = balanced  # keys are constant, balance the plaintexts
        else:
            keys = balanced
            pts = draw.integers(0, 256, size=n_groups, dtype=np.uint8)

    blocks = []
    for g in range(n_groups):
        rng = _stream(config, 1, device_id, stream, g)
        gp = np.full(repeats_per_input, pts[g], dtype=np.uint8)
        gk = np.full(repeats_per_input, keys[g], dtype=np.uint8)
        blocks.append(_synth_block(profile, config, gp, gk, loc, rng))
    samples = np.concatenate(blocks) if blocks else np.empty(
        (0, config.trace_length), dtype=np.float32)
    return TraceSet(
        samples=samples,
        plaintexts=np.repeat(pts, repeats_per_input),
        keys=np.repeat(keys, repeats_per_input),
        device_ids=np.full(traces_per_device, device_id, dtype=np.uint16),
        rows=np.full(traces_per_device, loc[0], dtype=np.uint8),
        cols=np.full(traces_per_device, loc[1], dtype=np.uint8),
        n_averaged=np.ones(traces_per_device, dtype=np.uint16),
        label_kind=label_kind,
    )


def gen_campaign(
    config: GeneratorConfig,
    n_devices: int,
    traces_per_device: int,
    key_mode: KeyMode,
    repeats_per_input: int = 1,
    label_kind: LabelKind = LabelKind.KEY_BYTE,
    location: tuple[int, int] | None = None,
) -> dict[int, TraceSet]:
    """Campaign over devices 0..n_devices-1; one TraceSet per device."""
    return {
        dev: gen_device_traces(config, dev, traces_per_device, key_mode,
                               repeats_per_input, label_kind, location)
        for dev in range(n_devices)
    }


def gen_fixed_input_set(config: GeneratorConfig, device_id: int, plaintext: int,
                        key: int, n_traces: int,
                        location: tuple[int, int] | None = None,
                        stream: int = 0) -> TraceSet:
    """n traces of one (plaintext, key) pair, e.g. the fixed TVLA group."""
    loc = config.hotspot if location is None else (int(location[0]), int(location[1]))
    config.spatial_gain(loc)
    profile = gen_device(config, device_id)
    rng = _stream(config, 4, device_id, stream)
    pts = np.full(n_traces, plaintext, dtype=np.uint8)
    keys = np.full(n_traces, key, dtype=np.uint8)
    samples = _synth_block(profile, config, pts, keys, loc, rng)
    return TraceSet(
        samples=samples, plaintexts=pts, keys=keys,
        device_ids=np.full(n_traces, device_id, dtype=np.uint16),
        rows=np.full(n_traces, loc[0], dtype=np.uint8),
        cols=np.full(n_traces, loc[1], dtype=np.uint8),
        n_averaged=np.ones(n_traces, dtype=np.uint16),
        label_kind=LabelKind.SBOX_OUTPUT,
    )


def gen_grid_scan(
    config: GeneratorConfig,
    device_id: int,
    key: int,
    traces_per_cell: int,
    repeats_per_input: int = 1,
    label_kind: LabelKind = LabelKind.SBOX_OUTPUT,
) -> dict[tuple[int, int], TraceSet]:
    """Fixed-key scan over every grid cell of one device."""
    out: dict[tuple[int, int], TraceSet] = {}
    for r in range(config.grid_size):
        for c in range(config.grid_size):
            out[(r, c)] = gen_device_traces(
                config, device_id, traces_per_cell, FixedKey(key),
                repeats_per_input, label_kind, location=(r, c),
                stream=1 + r * config.grid_size + c)
    return out


@dataclass(frozen=True)
class CalibrationResult:
    noise_sigma: float
    achieved_db: float
    target_db: float
    warning: str | None = None


def snr_calibrate(config: GeneratorConfig, target_snr_db: float,
                  n_traces: int = 10240, device_id: int = 0,
                  tolerance_db: float = 0.5, sigma_floor: float = 1e-6,
                  max_iterations: int = 8) -> CalibrationResult:
    """Noise level that hits a target single-device SNR at the hotspot.

    SNR is measured with the byte-class estimator at the top DOM POI. The
    closed-form guess sigma = sqrt(signal_var / 10^(dB/10)) is refined by
    measurement until within +-tolerance_db (an inner margin of 0.7x the
    tolerance absorbs estimator noise). Targets above what the smallest
    searched sigma can reach return that floor with a warning.
    """
    if not math.isfinite(target_snr_db):
        raise ValueError("target SNR must be finite")
    if config.n_pois == 0:
        raise ValueError("cannot calibrate a generator with no POIs")

    def measure(sigma: float) -> float:
        cfg = replace(config, noise_sigma=sigma, poi_positions=None)
        ts = gen_device_traces(cfg, device_id, n_traces, RandomPerDevice(),
                               repeats_per_input=1,
                               label_kind=LabelKind.SBOX_OUTPUT,
                               location=cfg.hotspot, stream=900)
        return snr(ts, ClassFn.BYTE_CLASS).snr_db

    noiseless_cfg = replace(config, noise_sigma=0.0, poi_positions=None)
    probe = gen_device_traces(noiseless_cfg, device_id, 4096, RandomPerDevice(),
                              repeats_per_input=1,
                              label_kind=LabelKind.SBOX_OUTPUT,
                              location=config.hotspot, stream=901)
    est = snr(probe, ClassFn.BYTE_CLASS)
    signal_var = float(est.signal_var[est.top_poi])
    if signal_var <= 0:
        raise ValueError("generator produces no leakage signal at the top POI")

    target_linear = 10.0 ** (target_snr_db / 10.0)
    sigma = math.sqrt(signal_var / target_linear)
    warning = None
    if sigma < sigma_floor:
        sigma = sigma_floor
        warning = (f"target {target_snr_db} dB needs noise below the search floor "
                   f"{sigma_floor}; returning the floor")
        warnings.warn(warning)
        return CalibrationResult(sigma, measure(sigma), target_snr_db, warning)

    inner = 0.7 * tolerance_db
    achieved = measure(sigma)
    for _ in range(max_iterations):
        if abs(achieved - target_snr_db) <= inner:
            break
        sigma *= 10.0 ** ((achieved - target_snr_db) / 20.0)
        if sigma < sigma_floor:
            sigma = sigma_floor
            warning = (f"target {target_snr_db} dB unreachable above the search "
                       f"floor {sigma_floor}; returning the floor")
            warnings.warn(warning)
            achieved = measure(sigma)
            break
        achieved = measure(sigma)
    if warning is None and abs(achieved - target_snr_db) > tolerance_db:
        raise ValueError(
            f"calibration did not converge: achieved {achieved:.2f} dB for "
            f"target {target_snr_db:.2f} dB")
    return CalibrationResult(sigma, achieved, target_snr_db, warning)
