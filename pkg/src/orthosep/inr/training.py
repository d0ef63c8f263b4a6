"""Projection-regularised loss, minibatch training and post-hoc decomposition."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..projection import (
    GramFactorization,
    ProjectorSpec,
    ResidualDecomposition,
    decompose_residual,
    gram_factorize,
    project_parallel,
)
from .optim import AdamAMSGrad, PlateauScheduler
from .siren import (
    DEFAULT_BANDWIDTH,
    DEFAULT_FOURIER_FEATURES,
    DEFAULT_HIDDEN,
    DEFAULT_HIDDEN_LAYERS,
    DEFAULT_OMEGA0,
    SirenModel,
    backward,
    build_model,
    forward,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    epochs: int = 75
    batch_size: int = 4096
    lr: float = 1e-5
    factor: float = 0.5
    patience: int = 5
    rel_threshold: float = 1e-4
    min_lr: float = 1e-8
    seed: int = 0
    projector: ProjectorSpec = field(default_factory=ProjectorSpec)
    projection_scope: str = "batch"
    n_fourier: int = DEFAULT_FOURIER_FEATURES
    sigma_b: float = DEFAULT_BANDWIDTH
    hidden: int = DEFAULT_HIDDEN
    n_hidden: int = DEFAULT_HIDDEN_LAYERS
    omega0: float = DEFAULT_OMEGA0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.projection_scope not in ("batch", "global"):
            raise ValueError(f"unknown projection_scope {self.projection_scope!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projector"] = self.projector.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("projector"), dict):
            d["projector"] = ProjectorSpec(**d["projector"])
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    mse_e: float
    mse_par: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    mse_e: float
    mse_par: float
    total: float
    lr: float


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model: SirenModel
    optimizer: AdamAMSGrad
    scheduler: PlateauScheduler
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)


def loss_and_grad(model: SirenModel, X, y, fact: GramFactorization, lam: float = 1.0, X_enc=None):
    """Loss ``MSE(e) + lam * MSE(P e)`` and its gradient for every parameter.

    ``P`` depends on ``X`` only, so ``d loss / d y_hat = 2/M (e + lam P^T P e)``
    with ``P`` symmetric; nothing is differentiated through the SVD.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_enc = model.encoding(X) if X_enc is None else X_enc
    y_hat, acts = forward(model, X_enc, cache=True)
    M = y.shape[0]
    e = y_hat - y
    r_par = project_parallel(X, fact, e)
    mse_e = float(e @ e) / M
    mse_par = float(r_par @ r_par) / M
    grad_out = e if lam == 0 else e + lam * project_parallel(X, fact, r_par)
    grads = backward(model, acts, (2.0 / M) * grad_out)
    return LossBreakdown(mse_e, mse_par, mse_e + lam * mse_par), grads


def make_batches(n_rows: int, batch_size: int, seed: int, epoch: int, min_rows: int = 1) -> list[np.ndarray]:
    """Shuffled row batches; a pure function of ``(seed, epoch)``.

    A trailing batch shorter than ``min_rows`` is merged into the one before it.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch]))
    perm = rng.permutation(n_rows)
    batches = [perm[s:s + batch_size] for s in range(0, n_rows, batch_size)]
    if len(batches) > 1 and batches[-1].size < min_rows:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def init_state(n_inputs: int, config: TrainConfig) -> TrainState:
    model = build_model(n_inputs, config.n_fourier, config.sigma_b, config.hidden,
                        config.n_hidden, config.omega0, config.seed)
    return TrainState(
        model,
        AdamAMSGrad(model.params),
        PlateauScheduler(config.lr, config.factor, config.patience, config.rel_threshold, config.min_lr),
    )


def train(X, y, config: TrainConfig = TrainConfig(), state: TrainState | None = None,
          epochs: int | None = None, callback=None) -> TrainState:
    """Train (or continue training) up to ``config.epochs`` total epochs.

    ``epochs`` caps how many epochs this call runs, which is how partial runs
    and resume-from-checkpoint are driven.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    M, N = X.shape
    if y.size != M:
        raise ValueError("X and y have different row counts")
    if config.projection_scope == "batch" and config.batch_size < N:
        raise ValueError("batch_size must be >= number of features for batch-scope projection")
    state = init_state(N, config) if state is None else state
    model = state.model
    params = model.params
    X_enc = model.encoding(X)
    global_fact = gram_factorize(X, config.projector) if config.projection_scope == "global" else None

    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)
    while state.epoch < stop:
        lr = state.scheduler.lr
        sums = np.zeros(3)
        for idx in make_batches(M, config.batch_size, config.seed, state.epoch, min_rows=N):
            Xb = X[idx]
            fact = global_fact if global_fact is not None else gram_factorize(Xb, config.projector)
            loss, grads = loss_and_grad(model, Xb, y[idx], fact, config.lam, X_enc[idx])
            state.optimizer.step(params, grads, lr)
            sums += idx.size * np.array([loss.mse_e, loss.mse_par, loss.total])
        mse_e, mse_par, total = sums / M
        rec = EpochRecord(state.epoch, float(mse_e), float(mse_par), float(total), float(lr))
        state.history.append(rec)
        state.scheduler.step(total)
        state.epoch += 1
        log.info("epoch %d total=%.6g mse_e=%.6g mse_par=%.3g lr=%.3g",
                 rec.epoch, total, mse_e, mse_par, lr)
        if callback is not None:
            callback(state)
    return state


def predict_and_decompose(model: SirenModel, X, y, spec: ProjectorSpec = ProjectorSpec(),
                          index_map=None) -> ResidualDecomposition:
    """Forward over all rows, then split ``e = y_hat - y`` with a whole-matrix projector."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.size or X.shape[1] != model.encoding.n_inputs:
        raise ValueError(f"dimension mismatch: X {X.shape}, y {y.shape}, model expects {model.encoding.n_inputs}")
    e = model.predict(X) - y
    return decompose_residual(X, gram_factorize(X, spec), e, index_map)
