"""Per-channel normalisation, TTP maps, soft-tissue masking and feature assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volumes import ChannelVolume, FeatureMatrix, MultiChannelVolume, RegionMask, flatten_masked

CANONICAL_FEATURES = ("T1", "T2", "ADC", "Ktrans", "ve", "vp", "TTP")
STRUCTURAL = ("T1", "T2")
TOFTS = ("Ktrans", "ve", "vp")
DYNAMIC = ("TTP",) + TOFTS

TTP_NORM_SECONDS = 240.0
TOFTS_SCALE = 1.0 / 20.0
HU_SOFT_TISSUE = (-300.0, 300.0)


class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSelection:
    name: str
    included: tuple[str, ...]

    def __post_init__(self):
        if not self.included:
            raise ValueError(f"feature selection {self.name!r} is empty")
        unknown = set(self.included) - set(CANONICAL_FEATURES)
        if unknown:
            raise ValueError(f"unknown feature(s) {sorted(unknown)}")
        # canonical order regardless of how the caller listed them
        object.__setattr__(
            self, "included", tuple(f for f in CANONICAL_FEATURES if f in self.included)
        )

    @classmethod
    def without(cls, name: str, removed: Sequence[str]) -> "FeatureSelection":
        return cls(name, tuple(f for f in CANONICAL_FEATURES if f not in removed))


FULL = FeatureSelection("full", CANONICAL_FEATURES)

# Table-2 row set: full model, seven leave-one-out sets and three groups.
ABLATIONS: dict[str, FeatureSelection] = {"full": FULL}
ABLATIONS.update({f"minus_{f}": FeatureSelection.without(f"minus_{f}", [f]) for f in CANONICAL_FEATURES})
ABLATIONS["no_structural"] = FeatureSelection.without("no_structural", STRUCTURAL)
ABLATIONS["no_tofts"] = FeatureSelection.without("no_tofts", TOFTS)
ABLATIONS["no_dynamic"] = FeatureSelection.without("no_dynamic", DYNAMIC)


@dataclass(frozen=True)
class NormalizationRule:
    """One of ``minmax01``, ``divide_by`` (uses ``value``) or ``zscore_scaled`` (uses ``value`` as scale)."""

    kind: str
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("minmax01", "divide_by", "zscore_scaled", "none"):
            raise ValueError(f"unknown normalization {self.kind!r}")
        if self.kind in ("divide_by", "zscore_scaled") and not (self.value is not None and self.value > 0):
            raise ValueError(f"{self.kind} needs a positive value")

    def apply(self, ch: ChannelVolume, mask) -> ChannelVolume:
        if self.kind == "minmax01":
            return minmax_normalize(ch, mask)
        if self.kind == "zscore_scaled":
            return zscore_scaled(ch, mask, self.value)
        if self.kind == "divide_by":
            out = np.where(np.asarray(mask, bool), ch.data / self.value, 0.0)
            return ch.with_data(out)
        return ch

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


DEFAULT_RULES: dict[str, NormalizationRule] = {
    "T1": NormalizationRule("minmax01"),
    "T2": NormalizationRule("minmax01"),
    "ADC": NormalizationRule("minmax01"),
    "SUV": NormalizationRule("minmax01"),
    "TTP": NormalizationRule("divide_by", TTP_NORM_SECONDS),
    "Ktrans": NormalizationRule("zscore_scaled", TOFTS_SCALE),
    "ve": NormalizationRule("zscore_scaled", TOFTS_SCALE),
    "vp": NormalizationRule("zscore_scaled", TOFTS_SCALE),
}


def sanitize(ch: ChannelVolume) -> ChannelVolume:
    """Replace NaN and +/-Inf with zero."""
    data = ch.data
    if np.all(np.isfinite(data)):
        return ch
    return ch.with_data(np.where(np.isfinite(data), data, 0.0))


def _mask_of(ch: ChannelVolume, mask) -> np.ndarray:
    if mask is None:
        return np.ones(ch.data.size, dtype=bool)
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != ch.data.size:
        raise ValueError("mask length does not match channel")
    return mask


def minmax_normalize(ch: ChannelVolume, mask=None) -> ChannelVolume:
    m = _mask_of(ch, mask)
    vals = ch.data[m]
    if vals.size < 2 or vals.max() == vals.min():
        raise DegenerateChannelError(f"degenerate channel {ch.name!r}: constant over mask")
    lo, hi = vals.min(), vals.max()
    out = np.zeros_like(ch.data)
    out[m] = (vals - lo) / (hi - lo)
    return ch.with_data(out)


def zscore_scaled(ch: ChannelVolume, mask=None, scale: float = TOFTS_SCALE) -> ChannelVolume:
    """Z-score over the mask (population std) times ``scale``; zero outside."""
    m = _mask_of(ch, mask)
    vals = ch.data[m]
    if vals.size == 0:
        raise DegenerateChannelError(f"empty mask for channel {ch.name!r}")
    # np.mean/np.std reduce pairwise, so the result does not depend on threading
    mean = np.mean(vals)
    std = np.sqrt(np.mean((vals - mean) ** 2))
    if not std > 0:
        raise DegenerateChannelError(f"zero variance in channel {ch.name!r}")
    out = np.zeros_like(ch.data)
    out[m] = scale * (vals - mean) / std
    return ch.with_data(out)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """The ceil(q * n)-th order statistic (1-based), at least the minimum."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    k = max(int(math.ceil(q * values.size)), 1)
    return float(values[k - 1])


def ttp_map(
    series: Sequence[ChannelVolume],
    times,
    norm_const: float = TTP_NORM_SECONDS,
    valid=None,
    percentile: float = 0.2,
    name: str = "TTP",
) -> ChannelVolume:
    """Time-to-peak divided by ``norm_const``.

    Voxels whose peak is below the nearest-rank ``percentile`` of peaks over
    valid voxels are zeroed, as are invalid voxels. Ties go to the earliest time.
    """
    times = np.asarray(times, dtype=np.float64)
    if len(series) < 2 or times.size != len(series):
        raise ValueError("need one time per frame and at least two frames")
    if np.any(np.diff(times) <= 0):
        raise ValueError("non-monotone time vector")
    stack = np.stack([s.data for s in series])
    k_hat = np.argmax(stack, axis=0)  # first maximum wins
    peaks = stack[k_hat, np.arange(stack.shape[1])]
    m = _mask_of(series[0], valid)
    out = times[k_hat] / norm_const
    if m.any():
        cut = nearest_rank_percentile(peaks[m], percentile)
        out = np.where(peaks < cut, 0.0, out)
    out = np.where(m, out, 0.0)
    return ChannelVolume(name, series[0].grid, out)


def soft_tissue_mask(ct: ChannelVolume, lo: float = HU_SOFT_TISSUE[0], hi: float = HU_SOFT_TISSUE[1]) -> np.ndarray:
    return (ct.data >= lo) & (ct.data <= hi)


def normalize_channels(
    mcv: MultiChannelVolume,
    mask,
    rules: dict[str, NormalizationRule] | None = None,
) -> MultiChannelVolume:
    """Sanitize every channel, then apply its bound rule (if any) over ``mask``."""
    rules = DEFAULT_RULES if rules is None else rules
    out = mcv
    for c in mcv.channels:
        c = sanitize(c)
        rule = rules.get(c.name)
        out = out.replace(rule.apply(c, mask) if rule else c)
    return out


def assemble_features(
    mcv: MultiChannelVolume,
    mask: RegionMask,
    sel: FeatureSelection = FULL,
    target_name: str | None = "SUV",
    include=None,
) -> tuple[FeatureMatrix, np.ndarray | None]:
    """Build ``(X, y)`` over the selected voxels with canonical column order."""
    missing = [f for f in sel.included if f not in mcv]
    if missing:
        raise KeyError(f"unknown channel name(s) {missing}")
    names = list(sel.included)
    if target_name is not None:
        if target_name not in mcv:
            raise KeyError(f"target channel {target_name!r} not present")
        names.append(target_name)
    return flatten_masked(mcv.select(names), mask, include=include, target=target_name)
