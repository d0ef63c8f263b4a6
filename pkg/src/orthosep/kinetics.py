"""One-compartment Tofts model, a parametric AIF, and a voxel-wise LM fitter.

The convolution ``int_0^t Cp(tau) exp(-kep (t - tau)) dtau`` is evaluated with
the trapezoid rule on the sample grid. Summing the trapezoid panels interval by
interval gives the exact recursion

    I[n+1] = exp(-kep dt_n) * (I[n] + dt_n/2 * Cp[n]) + dt_n/2 * Cp[n+1]

which is the same sum as the O(T^2) panel form, costs O(T), and vectorises
across voxels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volumes import ChannelVolume, GridSpec, load_volume, save_volume

log = logging.getLogger(__name__)

MAX_ITER = 200
REL_STEP_TOL = 1e-8
VE_MIN = 1e-6


@dataclass(frozen=True)
class TimeGrid:
    t: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).ravel()
        if t.size < 2:
            raise ValueError("time grid needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if t[0] != 0:
            raise ValueError("time grid must start at t = 0")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, duration: float = 240.0, dt: float = 1.0) -> "TimeGrid":
        n = int(round(duration / dt))
        return cls(np.arange(n + 1) * dt)

    def __len__(self):
        return self.t.size


@dataclass(frozen=True)
class AIF:
    """Plasma concentration samples on a :class:`TimeGrid` (arbitrary units)."""

    cp: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        cp = np.array(self.cp, dtype=np.float64).ravel()
        if cp.size != len(self.grid):
            raise ValueError("AIF length does not match time grid")
        if np.any(cp < 0) or not np.all(np.isfinite(cp)):
            raise ValueError("AIF must be finite and non-negative")
        cp.setflags(write=False)
        object.__setattr__(self, "cp", cp)

    def scaled(self, c: float) -> "AIF":
        return AIF(self.cp * c, self.grid)


@dataclass(frozen=True)
class ToftsParams:
    """Ktrans in 1/s; ve and vp are volume fractions. Fields may be arrays."""

    Ktrans: float | np.ndarray
    ve: float | np.ndarray
    vp: float | np.ndarray

    def check(self) -> None:
        k, ve, vp = (np.asarray(a, dtype=np.float64) for a in (self.Ktrans, self.ve, self.vp))
        if np.any(k < 0):
            raise ValueError("Ktrans must be >= 0")
        if np.any((k > 0) & (ve <= 0)):
            raise ValueError("ve = 0 with Ktrans > 0")
        if np.any(ve > 1) or np.any(vp < 0) or np.any(vp >= 1) or np.any(vp + ve > 1 + 1e-12):
            raise ValueError("volume fractions out of range")

    def as_array(self) -> np.ndarray:
        return np.array([self.Ktrans, self.ve, self.vp], dtype=np.float64)


def population_aif(
    grid: TimeGrid,
    delay: float = 10.0,
    amplitude: float = 5.0,
    decay1: float = 0.1,
    decay2: float = 0.005,
) -> AIF:
    """Bi-exponential AIF ``A (exp(-d2 s) - exp(-d1 s))`` for ``s = t - delay >= 0``.

    The peak sits at ``delay + ln(d1/d2) / (d1 - d2)``.
    """
    if not decay1 > decay2 > 0:
        raise ValueError("need decay1 > decay2 > 0")
    s = grid.t - delay
    cp = np.where(s >= 0, amplitude * (np.exp(-decay2 * np.maximum(s, 0)) - np.exp(-decay1 * np.maximum(s, 0))), 0.0)
    return AIF(np.maximum(cp, 0.0), grid)


def _convolve(cp: np.ndarray, t: np.ndarray, kep, with_derivative: bool = False):
    """Trapezoid convolution of ``cp`` with ``exp(-kep t)``; ``kep`` may be a vector.

    Returns arrays of shape ``(T,) + kep.shape``; optionally also d/dkep.
    """
    kep = np.asarray(kep, dtype=np.float64)
    dt = np.diff(t)
    out = np.zeros((t.size,) + kep.shape)
    d_out = np.zeros_like(out) if with_derivative else None
    for n in range(t.size - 1):
        h = 0.5 * dt[n]
        decay = np.exp(-kep * dt[n])
        carry = out[n] + h * cp[n]
        out[n + 1] = decay * carry + h * cp[n + 1]
        if with_derivative:
            d_out[n + 1] = decay * (d_out[n] - dt[n] * carry)
    return (out, d_out) if with_derivative else out


def _kep(ktrans, ve):
    ktrans = np.asarray(ktrans, dtype=np.float64)
    ve = np.asarray(ve, dtype=np.float64)
    return np.divide(ktrans, ve, out=np.zeros(np.broadcast(ktrans, ve).shape), where=ve > 0)


def tofts_forward(p: ToftsParams, aif: AIF, grid: TimeGrid | None = None) -> np.ndarray:
    """Tissue concentration ``vp Cp + Ktrans (Cp * exp(-Ktrans/ve t))``.

    Scalar parameters give a curve of shape ``(T,)``; array parameters of
    shape ``(V,)`` give ``(T, V)``.
    """
    grid = aif.grid if grid is None else grid
    if grid is not aif.grid and not np.array_equal(grid.t, aif.grid.t):
        raise ValueError("AIF is sampled on a different time grid")
    p.check()
    k = np.asarray(p.Ktrans, dtype=np.float64)
    vp = np.asarray(p.vp, dtype=np.float64)
    conv = _convolve(aif.cp, grid.t, _kep(k, p.ve))
    cp = aif.cp.reshape((-1,) + (1,) * k.ndim)
    return vp * cp + k * conv


def tofts_constant_aif_closed_form(p: ToftsParams, c0: float, t) -> np.ndarray:
    """Exact response to ``Cp(t) = c0`` for t > 0 (reference for the trapezoid)."""
    t = np.asarray(t, dtype=np.float64)
    return p.vp * c0 + c0 * p.ve * (1.0 - np.exp(-p.Ktrans * t / p.ve))


# --- fitting ----------------------------------------------------------------

@dataclass(frozen=True)
class ToftsFit:
    params: ToftsParams
    offset: float
    residual_norm: float
    n_iter: int
    converged: bool
    degenerate: bool = False
    diverged: bool = False


def _project(theta: np.ndarray) -> np.ndarray:
    k, ve, vp, off = theta
    k = max(k, 0.0)
    ve = min(max(ve, VE_MIN), 1.0)
    vp = min(max(vp, 0.0), 1.0 - VE_MIN)
    if vp + ve > 1.0:
        s = 1.0 / (vp + ve)
        ve, vp = ve * s, vp * s
    return np.array([k, ve, vp, off])


def _model_and_jacobian(theta, cp, t):
    k, ve, vp, off = theta
    kep = k / ve
    conv, dconv = _convolve(cp, t, kep, with_derivative=True)
    model = vp * cp + k * conv + off
    jac = np.empty((t.size, 4))
    jac[:, 0] = conv + k * dconv / ve
    jac[:, 1] = -k * dconv * k / ve**2
    jac[:, 2] = cp
    jac[:, 3] = 1.0
    return model, jac


def fit_tofts(
    curve,
    aif: AIF,
    grid: TimeGrid | None = None,
    init: ToftsParams | None = None,
    max_iter: int = MAX_ITER,
    rel_step_tol: float = REL_STEP_TOL,
) -> ToftsFit:
    """Least-squares fit of ``tofts_forward + offset`` by Levenberg-Marquardt.

    Each trial step is projected back onto the parameter bounds. Iteration
    stops when the relative step falls below ``rel_step_tol`` or after
    ``max_iter`` iterations.
    """
    grid = aif.grid if grid is None else grid
    curve = np.asarray(curve, dtype=np.float64).ravel()
    if curve.size != len(grid):
        raise ValueError("curve and time grid lengths differ")
    if not np.all(np.isfinite(curve)):
        raise ValueError("non-finite values in concentration curve")
    cp, t = aif.cp, grid.t

    if not np.any(cp):
        # nothing drives the tissue: only the offset is identifiable
        off = float(np.mean(curve))
        res = float(np.linalg.norm(curve - off))
        return ToftsFit(ToftsParams(0.0, 1.0 if init is None else float(init.ve), 0.0), off, res, 0, True, degenerate=True)

    init = init or ToftsParams(0.005, 0.3, 0.05)
    theta = _project(np.array([init.Ktrans, init.ve, init.vp, curve[0]], dtype=np.float64))
    model, jac = _model_and_jacobian(theta, cp, t)
    r = model - curve
    cost = r @ r
    best = (theta, cost)
    mu = 1e-3
    converged = False
    diverged = False
    it = 0
    for it in range(1, max_iter + 1):
        jtj = jac.T @ jac
        g = jac.T @ r
        scale = np.diag(jtj).copy()
        scale[scale <= 0] = 1.0
        accepted = False
        while mu < 1e16:
            try:
                step = -np.linalg.solve(jtj + mu * np.diag(scale), g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            trial = _project(theta + step)
            t_model, t_jac = _model_and_jacobian(trial, cp, t)
            t_r = t_model - curve
            t_cost = t_r @ t_r
            if not np.isfinite(t_cost):
                diverged = True
                break
            if t_cost <= cost:
                accepted = True
                break
            mu *= 4.0
        if diverged or not accepted:
            converged = not diverged
            break
        delta = trial - theta
        theta, model, jac, r, cost = trial, t_model, t_jac, t_r, t_cost
        best = (theta, cost)
        mu = max(mu / 3.0, 1e-12)
        if np.linalg.norm(delta) <= rel_step_tol * (np.linalg.norm(theta) + rel_step_tol):
            converged = True
            break
    theta, cost = best
    if diverged:
        log.warning("Tofts fit diverged after %d iterations; returning best-so-far", it)
    return ToftsFit(
        ToftsParams(float(theta[0]), float(theta[1]), float(theta[2])),
        float(theta[3]),
        float(np.sqrt(cost)),
        it,
        converged,
        diverged=diverged,
    )


def generate_dce(
    params: ToftsParams,
    aif: AIF,
    volume_grid: GridSpec,
    noise_sd: float = 0.0,
    seed: int = 0,
    prefix: str = "DCE",
) -> list[ChannelVolume]:
    """Per-voxel Tofts curves plus seeded i.i.d. Gaussian noise, one volume per frame."""
    k = np.broadcast_to(np.asarray(params.Ktrans, dtype=np.float64), (volume_grid.size,))
    ve = np.broadcast_to(np.asarray(params.ve, dtype=np.float64), (volume_grid.size,))
    vp = np.broadcast_to(np.asarray(params.vp, dtype=np.float64), (volume_grid.size,))
    curves = tofts_forward(ToftsParams(k, ve, vp), aif)
    if noise_sd > 0:
        curves = curves + np.random.default_rng(seed).normal(0.0, noise_sd, curves.shape)
    return [ChannelVolume(f"{prefix}_{i:03d}", volume_grid, curves[i]) for i in range(curves.shape[0])]


def save_series(series: Sequence[ChannelVolume], grid: TimeGrid, directory, name: str = "dce") -> Path:
    """Write frames as volumes plus ``<name>.json`` listing times in seconds."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for vol in series:
        save_volume(vol, directory / vol.name)
        frames.append(vol.name)
    manifest = directory / f"{name}.json"
    manifest.write_text(json.dumps({"times_s": grid.t.tolist(), "frames": frames}, indent=2) + "\n")
    return manifest


def load_series(manifest) -> tuple[list[ChannelVolume], TimeGrid]:
    manifest = Path(manifest)
    meta = json.loads(manifest.read_text())
    frames = [load_volume(manifest.parent / f) for f in meta["frames"]]
    return frames, TimeGrid(meta["times_s"])
