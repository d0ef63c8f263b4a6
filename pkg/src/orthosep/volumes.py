"""Grid-aligned volumes, region masks, masked flattening and raw binary I/O.

All volumes are stored flat with the x axis running fastest::

    index = z * (ny * nx) + y * nx + x

On disk a volume is a ``<name>.json`` header next to a ``<name>.raw`` blob of
little-endian float32 (``"f32"``) or uint8 (``"u8"``) values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

BACKGROUND, SURROUNDING, PROSTATE, TUMOUR = 0, 1, 2, 3
LABEL_NAMES = {SURROUNDING: "surrounding", PROSTATE: "prostate", TUMOUR: "tumour"}

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed headers, raw blobs or inconsistent grids."""


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise VolumeFormatError("dims, spacing_mm and origin_mm need 3 entries each")
        if any(d < 1 for d in dims):
            raise VolumeFormatError(f"non-positive dims {dims}")
        if any(not s > 0 for s in spacing):
            raise VolumeFormatError(f"non-positive spacing {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        """Array shape of ``data.reshape(...)`` under the x-fastest order."""
        nx, ny, nz = self.dims
        return nz, ny, nx

    def linear_index(self, x, y, z):
        nx, ny, _ = self.dims
        return np.asarray(z) * (ny * nx) + np.asarray(y) * nx + np.asarray(x)

    def coords(self, index):
        """Inverse of :meth:`linear_index`; returns ``(x, y, z)``."""
        nx, ny, _ = self.dims
        index = np.asarray(index)
        return index % nx, (index // nx) % ny, index // (nx * ny)

    def header(self, dtype: str) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "origin_mm": list(self.origin_mm),
            "dtype": dtype,
            "order": "x-fastest",
        }


@dataclass(frozen=True)
class ChannelVolume:
    name: str
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        if not self.name:
            raise VolumeFormatError("channel name must be non-empty")
        data = np.array(self.data, dtype=np.float64).ravel()
        if data.size != self.grid.size:
            raise VolumeFormatError(
                f"channel {self.name!r}: length mismatch ({data.size} values for {self.grid.size} voxels)"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def with_data(self, data, name: str | None = None) -> "ChannelVolume":
        return ChannelVolume(name or self.name, self.grid, data)

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.grid.shape_zyx)


@dataclass(frozen=True)
class MultiChannelVolume:
    grid: GridSpec
    channels: tuple[ChannelVolume, ...]

    def __post_init__(self):
        channels = tuple(self.channels)
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise VolumeFormatError(f"duplicate channel names in {names}")
        for c in channels:
            if c.grid != self.grid:
                raise VolumeFormatError(f"channel {c.name!r} is on a different grid")
        object.__setattr__(self, "channels", channels)

    @classmethod
    def from_channels(cls, channels: Sequence[ChannelVolume]) -> "MultiChannelVolume":
        if not channels:
            raise VolumeFormatError("empty channel list")
        return cls(channels[0].grid, tuple(channels))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    def __getitem__(self, name: str) -> ChannelVolume:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.channels)

    def replace(self, channel: ChannelVolume) -> "MultiChannelVolume":
        """Return a copy with ``channel`` swapped in (or appended) by name."""
        chans = [channel if c.name == channel.name else c for c in self.channels]
        if channel.name not in self:
            chans.append(channel)
        return MultiChannelVolume(self.grid, tuple(chans))

    def select(self, names: Sequence[str]) -> "MultiChannelVolume":
        return MultiChannelVolume(self.grid, tuple(self[n] for n in names))


@dataclass(frozen=True)
class RegionMask:
    grid: GridSpec
    labels: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels).ravel()
        valid = np.array(self.valid, dtype=bool).ravel()
        if labels.size != self.grid.size or valid.size != self.grid.size:
            raise VolumeFormatError("mask length mismatch")
        if labels.size and (labels.min() < 0 or labels.max() > TUMOUR):
            raise VolumeFormatError("labels must be in {0, 1, 2, 3}")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def all_valid(cls, grid: GridSpec, label: int = SURROUNDING) -> "RegionMask":
        return cls(grid, np.full(grid.size, label, np.uint8), np.ones(grid.size, bool))

    def region(self, name: str) -> np.ndarray:
        """Boolean selector for an evaluation region.

        ``prostate`` is the non-tumoural prostate; ``surrounding`` is every other
        valid voxel outside prostate and tumour.
        """
        if name == "tumour":
            return self.valid & (self.labels == TUMOUR)
        if name == "prostate":
            return self.valid & (self.labels == PROSTATE)
        if name == "surrounding":
            return self.valid & (self.labels != PROSTATE) & (self.labels != TUMOUR)
        if name == "valid":
            return self.valid.copy()
        raise KeyError(name)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    index_map: np.ndarray
    feature_names: tuple[str, ...]
    grid: GridSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature values must be 2-D")
        index_map = np.array(self.index_map, dtype=np.int64).ravel()
        if index_map.size != values.shape[0]:
            raise ValueError("index_map length does not match row count")
        if index_map.size > 1 and np.any(np.diff(index_map) <= 0):
            raise ValueError("index_map must be strictly increasing")
        if len(self.feature_names) != values.shape[1]:
            raise ValueError("feature_names length does not match column count")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains NaN/Inf; sanitize first")
        values.setflags(write=False)
        index_map.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "index_map", index_map)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


# --- masks ----------------------------------------------------------------

def intersect_valid_mask(mcv: MultiChannelVolume) -> np.ndarray:
    """Voxels that are non-zero in every channel."""
    if len(mcv) == 0:
        raise VolumeFormatError("empty channel list")
    valid = np.ones(mcv.grid.size, dtype=bool)
    for c in mcv.channels:
        valid &= c.data != 0
    return valid


def bounding_box_crop(mcv: MultiChannelVolume, mask: RegionMask):
    """Crop channels and mask to the tight box around ``mask.valid``."""
    if not mask.valid.any():
        raise VolumeFormatError("all-invalid mask, nothing to crop to")
    grid = mcv.grid
    vz, vy, vx = np.nonzero(mask.valid.reshape(grid.shape_zyx))
    lo = np.array([vx.min(), vy.min(), vz.min()])
    hi = np.array([vx.max(), vy.max(), vz.max()]) + 1
    sl = (slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0]))
    origin = tuple(o + int(l) * s for o, l, s in zip(grid.origin_mm, lo, grid.spacing_mm))
    new_grid = GridSpec(tuple(int(d) for d in hi - lo), grid.spacing_mm, origin)

    def crop(flat):
        return flat.reshape(grid.shape_zyx)[sl].ravel()

    channels = tuple(ChannelVolume(c.name, new_grid, crop(c.data)) for c in mcv.channels)
    new_mask = RegionMask(new_grid, crop(mask.labels), crop(mask.valid))
    return MultiChannelVolume(new_grid, channels), new_mask


# --- flatten / scatter ----------------------------------------------------

def flatten_masked(
    mcv: MultiChannelVolume,
    mask: RegionMask,
    include: Callable[[RegionMask], np.ndarray] | np.ndarray | None = None,
    target: str | None = None,
):
    """Gather selected voxels into a feature matrix in ascending index order.

    ``include`` is either a boolean voxel selector or a callable mapping the
    mask to one; by default every valid voxel is taken. When ``target`` names a
    channel it is split off and returned as the ``y`` vector, otherwise ``y``
    is ``None``.
    """
    if include is None:
        sel = mask.valid
    elif callable(include):
        sel = np.asarray(include(mask), dtype=bool)
    else:
        sel = np.asarray(include, dtype=bool)
    index_map = np.flatnonzero(sel)
    if index_map.size == 0:
        raise ValueError("empty selection")
    names = [n for n in mcv.names if n != target]
    values = np.column_stack([mcv[n].data[index_map] for n in names]) if names else np.empty((index_map.size, 0))
    y = mcv[target].data[index_map].copy() if target is not None else None
    return FeatureMatrix(values, index_map, tuple(names), mcv.grid), y


def scatter_to_volume(values, index_map, grid: GridSpec, fill: float = 0.0, name: str = "scattered") -> ChannelVolume:
    values = np.asarray(values, dtype=np.float64).ravel()
    index_map = np.asarray(index_map, dtype=np.int64).ravel()
    if values.size != index_map.size:
        raise ValueError("values and index_map lengths differ")
    if index_map.size and (index_map.min() < 0 or index_map.max() >= grid.size):
        raise IndexError("index out of range for grid")
    out = np.full(grid.size, float(fill))
    out[index_map] = values
    return ChannelVolume(name, grid, out)


# --- I/O ------------------------------------------------------------------

def _pair(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _read(path, expect: str | None = None):
    header_path, raw_path = _pair(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    header = json.loads(header_path.read_text())
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype!r}")
    if expect is not None and dtype != expect:
        raise VolumeFormatError(f"expected dtype {expect!r}, got {dtype!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported order {header['order']!r}")
    grid = GridSpec(
        tuple(header["dims"]),
        tuple(header.get("spacing_mm", (1.0, 1.0, 1.0))),
        tuple(header.get("origin_mm", (0.0, 0.0, 0.0))),
    )
    raw = raw_path.read_bytes()
    itemsize = _DTYPES[dtype].itemsize
    if len(raw) != grid.size * itemsize:
        raise VolumeFormatError(
            f"{raw_path.name}: length mismatch ({len(raw)} bytes for {grid.size} voxels of {dtype})"
        )
    return grid, np.frombuffer(raw, dtype=_DTYPES[dtype]), header_path.stem


def _write(path, grid: GridSpec, data: np.ndarray, dtype: str) -> None:
    header_path, raw_path = _pair(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(grid.header(dtype), indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())


def load_volume(path) -> ChannelVolume:
    grid, data, name = _read(path, expect="f32")
    return ChannelVolume(name, grid, data.astype(np.float64))


def save_volume(vol: ChannelVolume, path) -> None:
    if not np.all(np.isfinite(vol.data)):
        raise ValueError(f"unsanitized data in channel {vol.name!r} (NaN/Inf)")
    _write(path, vol.grid, vol.data, "f32")


def save_mask(mask: RegionMask, path) -> None:
    """Write labels to ``<name>`` and validity to ``<name>_valid``."""
    header_path, _ = _pair(path)
    base = header_path.with_suffix("")
    _write(base, mask.grid, mask.labels, "u8")
    _write(base.with_name(base.name + "_valid"), mask.grid, mask.valid.astype(np.uint8), "u8")


def load_mask(path) -> RegionMask:
    header_path, _ = _pair(path)
    base = header_path.with_suffix("")
    grid, labels, _ = _read(base, expect="u8")
    vgrid, valid, _ = _read(base.with_name(base.name + "_valid"), expect="u8")
    if vgrid != grid:
        raise VolumeFormatError("label and validity volumes are on different grids")
    return RegionMask(grid, labels.copy(), valid.astype(bool))


def save_multichannel(mcv: MultiChannelVolume, directory) -> None:
    directory = Path(directory)
    for c in mcv.channels:
        save_volume(c, directory / c.name)


def load_multichannel(directory, names: Sequence[str]) -> MultiChannelVolume:
    directory = Path(directory)
    return MultiChannelVolume.from_channels([load_volume(directory / n) for n in names])
