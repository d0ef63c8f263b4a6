"""Fourier-feature SIREN trained with a projection-regularised loss."""
from .checkpoint import load_checkpoint, save_checkpoint, write_history_csv
from .estimator import OrthogonalSirenRegressor
from .optim import AdamAMSGrad, PlateauScheduler
from .siren import (
    FourierEncoding,
    NonFiniteActivationError,
    SirenModel,
    backward,
    build_model,
    forward,
    fourier_encode,
    siren_init,
)
from .training import (
    EpochRecord,
    LossBreakdown,
    TrainConfig,
    TrainState,
    init_state,
    loss_and_grad,
    make_batches,
    predict_and_decompose,
    train,
)
