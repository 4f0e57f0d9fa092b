"""Risk-controlling pixelwise uncertainty intervals for image-to-image regression.

Train a heuristic uncertainty head, calibrate a multiplicative scale on
held-out data against an upper confidence bound, and emit per-pixel intervals
that miss at most an alpha fraction of true values with probability 1 - delta
over the calibration draw.
"""

from .calibration import (
    CalibrationResult,
    LambdaGrid,
    RiskSpec,
    build_lambda_grid,
    calibrate,
    hoeffding_ucb,
    risk_curve,
    select_lambda,
)
from .core import (
    CoverageMask,
    ImageTensor,
    IntervalField,
    PredictionTriple,
    coverage_mask,
    make_interval_field,
    pixel_loss,
)
from .evaluation import (
    MetricsReport,
    empirical_risk,
    metrics_report,
    mse,
    risk_trials,
    set_size_stats,
    size_stratified_risk,
)
from .exceptions import (
    ArgumentError,
    ConfigError,
    DomainError,
    FormatError,
    InfeasibleError,
    RcpsError,
    ShapeError,
    TrainingError,
)
from .heuristics import (
    QuantileLevel,
    SoftmaxHead,
    discretize,
    gaussian_nll_loss,
    pinball_loss,
    qr_joint_loss,
    residual_magnitude_loss,
    softmax_ce_loss,
    softmax_extract,
)
from .trainer import (
    PatchModel,
    TrainConfig,
    backward,
    forward,
    init_model,
    load_model,
    predict_triple,
    save_model,
    train,
)

__version__ = "0.1.0"
