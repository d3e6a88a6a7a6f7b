"""Margin-based label smoothing for calibrated segmentation, on a synthetic desk-scale task."""

__version__ = "0.1.0"

from .tensor_store import (  # noqa: E402
    LabelField,
    LogitField,
    ProbField,
    SoftLabelField,
    TensorFormatError,
    ValidationError,
    load_tensor,
    logit_distances,
    save_tensor,
    softmax,
)
from .losses import LossConfig, LossEval, compound_loss, mbls_loss  # noqa: E402
from .metrics import cece, dsc, asd, ece, mean_case_rank, sum_rank  # noqa: E402
from .posthoc import TemperatureFit, apply_temperature, fit_temperature  # noqa: E402
from .trainer import PixelModel, SyntheticTask, TrainSchedule, generate_dataset, train  # noqa: E402
