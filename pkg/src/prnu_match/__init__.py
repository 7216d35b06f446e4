"""PRNU source-device identification.

Classical pipeline (fingerprint estimation, wavelet Wiener residuals, PCE) plus
a learned 2-channel pair-wise correlation matcher with from-scratch training,
and a synthetic sensor simulator for reproducible desk-scale experiments.
"""

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DuplicateError,
    EmptyInputError,
    FormatError,
    IoError,
    NumericError,
    PrnuMatchError,
)
from .imaging import (
    CropSpec,
    Image,
    central_crop,
    crop_center,
    load_image,
    normalize_by_std,
    recompress_jpeg,
    save_jpeg,
    save_pgm,
)
from .residual import (
    DenoiserConfig,
    NoiseResidual,
    SubbandPyramid,
    dwt2,
    extract_residual,
    idwt2,
    load_residual,
    save_residual,
    wiener_shrink,
    zero_mean,
)
from .fingerprint import (
    Fingerprint,
    FingerprintDb,
    estimate_prnu,
    estimate_prnu_from_residuals,
    load_fingerprint,
    save_fingerprint,
)
from .pce import PceScore, corr_surface, ncc, pce
from .pcn import (
    ConvSpec,
    MatchScore,
    PcnArch,
    PcnModel,
    build_pair,
    init_model,
    load_model,
    pcn_forward,
    pcn_forward_batch,
    save_model,
    sigmoid,
)
from .training import (
    AdamState,
    DeviceEntry,
    DeviceSet,
    TrainConfig,
    TrainHistory,
    adam_step,
    bce_with_logits,
    build_epoch_batches,
    train,
)
from .synth import SynthConfig, SynthDevice, build_dataset, gen_device, gen_flat, gen_natural, load_dataset
from .evaluation import (
    EvalReport,
    GridReport,
    ScoreMatrix,
    closed_set_accuracy,
    domain_grid,
    make_pce_scorer,
    make_pcn_scorer,
    open_set_eval,
    report_from_matrix,
    roc_auc,
    score_matrix,
)
from .bench import BenchResult, bench_batch, bench_single, write_bench_csv

__version__ = "0.1.0"
