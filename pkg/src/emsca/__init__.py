"""Simulated-EM side-channel analysis toolkit."""

from .core import (
    INV_SBOX,
    SBOX,
    LabelKind,
    Trace,
    TraceSet,
    hamming_weight,
    intermediate,
    inv_sbox,
    sbox,
)
from .simulate import (
    CalibrationResult,
    DeviceProfile,
    FixedKey,
    GeneratorConfig,
    RandomPerDevice,
    gen_campaign,
    gen_device,
    gen_device_traces,
    gen_fixed_input_set,
    gen_grid_scan,
    gen_trace,
    snr_calibrate,
)
from .preprocess import (
    FeatureTransform,
    TransformKind,
    average_traces,
    fft_features,
    fit_fft,
    fit_identity,
    fit_lda,
    fit_pca,
    fit_spectrogram,
    spectrogram_features,
)
from .mlp import (
    MlpModel,
    Mode,
    TrainConfig,
    TrainHistory,
    adam_step,
    evaluate,
    forward,
    init_model,
    loss_and_grads,
    train,
)
from .selection import (
    PoiPair,
    SelectionMode,
    SelectionResult,
    device_means,
    find_pois,
    select_devices,
)
from .leakage import (
    ClassFn,
    Heatmap,
    MetricKind,
    cema,
    heatmap_scan,
    pooled_snr_curve,
    snr,
    tvla,
)
from .attack import (
    AttackReport,
    Verdict,
    attack_budget,
    key_guesses,
    predict_batch,
    recover_key,
    scan_attack,
)

__version__ = "0.1.0"
