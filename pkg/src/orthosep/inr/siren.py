"""Gaussian Fourier features and a sine-activated MLP with hand-written backprop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_OMEGA0 = 30.0
DEFAULT_FOURIER_FEATURES = 128
DEFAULT_BANDWIDTH = 1.0
DEFAULT_HIDDEN = 512
DEFAULT_HIDDEN_LAYERS = 3


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class FourierEncoding:
    """``phi(x) = [sin(2 pi B x), cos(2 pi B x)]`` with a fixed Gaussian ``B`` (F x N)."""

    B: np.ndarray
    sigma: float = DEFAULT_BANDWIDTH

    @classmethod
    def random(cls, n_inputs: int, n_features: int = DEFAULT_FOURIER_FEATURES,
               sigma: float = DEFAULT_BANDWIDTH, seed=0) -> "FourierEncoding":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, sigma, size=(n_features, n_inputs)), sigma)

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_features(self) -> int:
        return self.B.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[0]

    def __call__(self, X) -> np.ndarray:
        return fourier_encode(self, X)


def fourier_encode(enc: FourierEncoding, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.shape[1] != enc.n_inputs:
        raise ValueError(f"expected {enc.n_inputs} features, got {X2.shape[1]}")
    arg = (2.0 * np.pi) * (X2 @ enc.B.T)
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    return out[0] if single else out


@dataclass
class SirenModel:
    encoding: FourierEncoding
    weights: list[np.ndarray]   # weights[k] has shape (fan_in, fan_out)
    biases: list[np.ndarray]
    omega0: float = DEFAULT_OMEGA0
    seed: int | None = field(default=None, compare=False)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "SirenModel":
        return SirenModel(self.encoding, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.omega0, self.seed)

    def predict(self, X, batch_size: int = 16384) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], batch_size):
            out[s:s + batch_size] = forward(self, self.encoding(X[s:s + batch_size]))
        return out


def siren_init(widths, omega0: float = DEFAULT_OMEGA0, seed=0) -> tuple[list, list]:
    """SIREN initialisation: first layer U(+-1/fan_in), later U(+-sqrt(6/fan_in)/omega0), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / fan_in if k == 0 else np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def build_model(n_inputs: int, n_fourier: int = DEFAULT_FOURIER_FEATURES, sigma: float = DEFAULT_BANDWIDTH,
                hidden: int = DEFAULT_HIDDEN, n_hidden: int = DEFAULT_HIDDEN_LAYERS,
                omega0: float = DEFAULT_OMEGA0, seed: int = 0) -> SirenModel:
    """Sine input layer, ``n_hidden`` sine hidden layers and a linear scalar output."""
    enc_seed, init_seed = np.random.SeedSequence(seed).spawn(2)
    enc = FourierEncoding.random(n_inputs, n_fourier, sigma, enc_seed)
    widths = (enc.out_dim,) + (hidden,) * (n_hidden + 1) + (1,)
    weights, biases = siren_init(widths, omega0, init_seed)
    return SirenModel(enc, weights, biases, omega0, seed)


def forward(model: SirenModel, X_enc, cache: bool = False):
    """Predictions for an encoded batch; with ``cache`` also the activations for backprop."""
    h = np.asarray(X_enc, dtype=np.float64)
    hs, pre = [h], []
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        if k == last:
            h = z
        else:
            z *= model.omega0
            with np.errstate(invalid="ignore"):
                h = np.sin(z)
            if cache:
                pre.append(z)
                hs.append(h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivationError(k)
    y_hat = h[:, 0]
    return (y_hat, (hs, pre)) if cache else y_hat


def backward(model: SirenModel, activations, grad_out) -> list[np.ndarray]:
    """Gradients of a scalar loss given d loss / d y_hat; same order as ``model.params``."""
    hs, pre = activations
    n = len(model.weights)
    grads: list[np.ndarray] = [None] * (2 * n)
    delta = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            delta = delta * (model.omega0 * np.cos(pre[k]))
        grads[2 * k] = hs[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ model.weights[k].T
    return grads
