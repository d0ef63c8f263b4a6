"""Synthetic co-registered feature/target volumes with known ground truth.

The target is ``y = g(x) + c * u + noise`` where ``g`` is a smooth function of
the normalised feature vector and ``u`` is a unit-RMS field supported on the
tumour that is exactly orthogonal to every feature column over the masked
voxels. ``g`` is therefore learnable from ``x`` while ``c * u`` is not
reachable by any linear combination of the features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import CANONICAL_FEATURES, DEFAULT_RULES, normalize_channels, soft_tissue_mask
from .projection import ProjectorSpec, gram_factorize, project_parallel
from .volumes import (
    PROSTATE,
    SURROUNDING,
    TUMOUR,
    ChannelVolume,
    GridSpec,
    MultiChannelVolume,
    RegionMask,
    intersect_valid_mask,
    save_mask,
    save_volume,
)

# Physical ranges the raw blob fields are mapped into (inside the body).
RAW_RANGES = {
    "T1": (200.0, 1500.0),      # ms
    "T2": (40.0, 200.0),        # ms
    "ADC": (300.0, 2500.0),     # 1e-6 mm^2/s
    "Ktrans": (0.001, 0.02),    # 1/s
    "ve": (0.05, 0.6),
    "vp": (0.005, 0.1),
    "TTP": (20.0, 240.0),       # s
}
CT_RANGE = (-150.0, 150.0)
AIR_HU = -1000.0

ENVELOPES = ("softplus_affine", "linear")
DEFAULT_COEFFICIENTS = {
    "T1": 0.4, "T2": 1.2, "ADC": -0.8, "Ktrans": 4.0, "ve": 2.0, "vp": 0.0, "TTP": 0.6,
}
DEFAULT_INTERCEPT = -0.3


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (42, 42, 36)
    seed: int = 0
    n_blobs: int = 6
    prostate_radius_vox: float = 8.0
    tumour_radius_vox: float = 4.0
    envelope: str = "softplus_affine"
    coefficients: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    intercept: float = DEFAULT_INTERCEPT
    ortho_amplitude: float = 0.0
    noise_sd: float = 0.0
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if self.envelope not in ENVELOPES:
            raise ValueError(f"unknown envelope {self.envelope!r}; choose from {ENVELOPES}")
        unknown = set(self.coefficients) - set(CANONICAL_FEATURES)
        if unknown:
            raise ValueError(f"coefficients for unknown features {sorted(unknown)}")
        # canonical key order keeps serialized outputs independent of how the dict was built
        object.__setattr__(self, "coefficients",
                           {k: self.coefficients[k] for k in CANONICAL_FEATURES if k in self.coefficients})
        if not (self.ortho_amplitude >= 0 and np.isfinite(self.ortho_amplitude)):
            raise ValueError("ortho_amplitude must be finite and >= 0")
        if not (self.noise_sd >= 0 and np.isfinite(self.noise_sd)):
            raise ValueError("noise_sd must be finite and >= 0")
        if not 0 < self.tumour_radius_vox < self.prostate_radius_vox:
            raise ValueError("tumour sphere must lie strictly inside the prostate sphere")
        if self.prostate_radius_vox + 2 >= 0.48 * min(self.dims):
            raise ValueError("prostate sphere does not fit inside the body")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing_mm)

    def used_features(self) -> list[str]:
        return [f for f in CANONICAL_FEATURES if self.coefficients.get(f, 0.0) != 0.0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing_mm"] = list(self.spacing_mm)
        return d


@dataclass(frozen=True)
class Phantom:
    spec: PhantomSpec
    raw: MultiChannelVolume          # physical-unit channels incl. CT
    features: MultiChannelVolume     # normalised T1..TTP plus target "SUV"
    mask: RegionMask
    envelope: np.ndarray             # g(x) per voxel (0 outside valid)
    orthogonal: np.ndarray           # c * u per voxel
    noise: np.ndarray

    @property
    def target(self) -> ChannelVolume:
        return self.features["SUV"]

    def training_channels(self, rules=DEFAULT_RULES) -> MultiChannelVolume:
        """Features and target normalised by ``rules``, as ``orthosep train`` sees them.

        ``target`` itself is ``g(x) + c u + noise`` in generator units; the
        pipeline min-max scales it like any SUV volume before training.
        """
        raw = self.raw.select(CANONICAL_FEATURES).replace(self.target)
        return normalize_channels(raw, self.mask.valid, rules)


def _zyx(grid: GridSpec):
    nz, ny, nx = grid.shape_zyx
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return x.ravel().astype(float), y.ravel().astype(float), z.ravel().astype(float)


def _geometry(spec: PhantomSpec):
    grid = spec.grid
    x, y, z = _zyx(grid)
    c = (np.array(spec.dims, dtype=float) - 1) / 2
    semi = 0.48 * np.array(spec.dims, dtype=float)
    body = ((x - c[0]) / semi[0]) ** 2 + ((y - c[1]) / semi[1]) ** 2 + ((z - c[2]) / semi[2]) ** 2 <= 1.0
    pc = c + np.array([0.0, 1.0, 0.0])
    r2p = (x - pc[0]) ** 2 + (y - pc[1]) ** 2 + (z - pc[2]) ** 2
    prostate = r2p <= spec.prostate_radius_vox**2
    shift = 0.4 * (spec.prostate_radius_vox - spec.tumour_radius_vox)
    tc = pc + np.array([shift, -shift, 0.0])
    tumour = (x - tc[0]) ** 2 + (y - tc[1]) ** 2 + (z - tc[2]) ** 2 <= spec.tumour_radius_vox**2
    return body, prostate, tumour


def _blob_field(grid: GridSpec, n_blobs: int, rng) -> np.ndarray:
    x, y, z = _zyx(grid)
    dims = np.array(grid.dims, dtype=float)
    out = np.zeros(grid.size)
    for _ in range(n_blobs):
        cx, cy, cz = rng.uniform(0, dims)
        sigma = rng.uniform(0.12, 0.3) * dims.min()
        amp = rng.uniform(-1.0, 1.0)
        out += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) / (2 * sigma**2))
    return out


def make_raw_fields(spec: PhantomSpec) -> MultiChannelVolume:
    """Physical-unit channels T1..TTP and CT; zero outside the body (air for CT)."""
    grid = spec.grid
    body, _, _ = _geometry(spec)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(CANONICAL_FEATURES) + 1)]
    channels = []
    for name, rng in zip(CANONICAL_FEATURES + ("CT",), rngs):
        f = _blob_field(grid, spec.n_blobs, rng)
        fb = f[body]
        unit = (f - fb.min()) / (fb.max() - fb.min())
        lo, hi = CT_RANGE if name == "CT" else RAW_RANGES[name]
        vals = lo + (hi - lo) * unit
        outside = AIR_HU if name == "CT" else 0.0
        channels.append(ChannelVolume(name, grid, np.where(body, vals, outside)))
    return MultiChannelVolume.from_channels(channels)


def make_regions(spec: PhantomSpec, raw: MultiChannelVolume) -> RegionMask:
    _, prostate, tumour = _geometry(spec)
    features = raw.select(CANONICAL_FEATURES)
    valid = intersect_valid_mask(features) & soft_tissue_mask(raw["CT"])
    labels = np.where(valid, SURROUNDING, 0)
    labels = np.where(valid & prostate, PROSTATE, labels)
    labels = np.where(valid & tumour, TUMOUR, labels)
    return RegionMask(spec.grid, labels.astype(np.uint8), valid)


def make_feature_fields(spec: PhantomSpec) -> MultiChannelVolume:
    """Seven normalised channels (T1, T2, ADC, Ktrans, ve, vp, TTP)."""
    raw = make_raw_fields(spec)
    mask = make_regions(spec, raw)
    return normalize_channels(raw.select(CANONICAL_FEATURES), mask.valid, DEFAULT_RULES)


def envelope_values(X: np.ndarray, feature_names, spec: PhantomSpec) -> np.ndarray:
    w = np.array([spec.coefficients.get(n, 0.0) for n in feature_names])
    z = np.asarray(X, dtype=np.float64) @ w + spec.intercept
    if spec.envelope == "linear":
        return z
    return np.logaddexp(0.0, z)  # softplus


def orthogonalize_against(X, z, spec: ProjectorSpec = ProjectorSpec.pinv(), support=None) -> np.ndarray:
    """Remove the column-space component of ``z``, keeping ``u`` inside ``support``.

    Restricting both ``X`` and ``z`` to the support rows and projecting there
    keeps ``u`` zero off-support while making ``X^T u = 0`` on the full matrix.
    Two projection passes clean up rounding left by the first.
    """
    X = np.asarray(X, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).ravel()
    if X.shape[0] != z.size:
        raise ValueError("X and z row counts differ")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    rows = np.ones(z.size, bool) if support is None else np.asarray(support, bool).ravel()
    Xs, zs = X[rows], z[rows]
    fact = gram_factorize(Xs, spec)
    us = zs - project_parallel(Xs, fact, zs)
    us = us - project_parallel(Xs, fact, us)
    if np.linalg.norm(us) <= 1e-8 * max(np.linalg.norm(zs), np.finfo(float).tiny):
        raise ValueError("no orthogonal content: z lies inside the feature column space")
    u = np.zeros_like(z)
    u[rows] = us
    return u


def make_target(features: MultiChannelVolume, regions: RegionMask, spec: PhantomSpec):
    """Build the ``SUV`` channel plus its exact components (all zero off the valid mask)."""
    names = list(CANONICAL_FEATURES)
    idx = np.flatnonzero(regions.valid)
    X = np.column_stack([features[n].data[idx] for n in names])
    g = envelope_values(X, names, spec)
    tumour_rows = regions.labels[idx] == TUMOUR
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    ortho = np.zeros(idx.size)
    if spec.ortho_amplitude > 0:
        if tumour_rows.sum() <= len(names):
            raise ValueError("too few tumour voxels for an orthogonal signal")
        z = np.where(tumour_rows, rng.normal(size=idx.size), 0.0)
        u = orthogonalize_against(X, z, support=tumour_rows)
        u /= np.sqrt(np.mean(u[tumour_rows] ** 2))
        ortho = spec.ortho_amplitude * u
    noise = rng.normal(0.0, spec.noise_sd, idx.size) if spec.noise_sd > 0 else np.zeros(idx.size)
    full = lambda v: np.bincount(idx, weights=v, minlength=regions.grid.size) if idx.size else np.zeros(regions.grid.size)
    g_vol, o_vol, n_vol = full(g), full(ortho), full(noise)
    target = ChannelVolume("SUV", regions.grid, g_vol + o_vol + n_vol)
    return target, {"envelope": g_vol, "orthogonal": o_vol, "noise": n_vol}


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    raw = make_raw_fields(spec)
    mask = make_regions(spec, raw)
    feats = normalize_channels(raw.select(CANONICAL_FEATURES), mask.valid, DEFAULT_RULES)
    target, parts = make_target(feats, mask, spec)
    return Phantom(spec, raw, feats.replace(target), mask, parts["envelope"], parts["orthogonal"], parts["noise"])


def truth_manifest(ph: Phantom) -> dict:
    energy = {}
    for region in ("tumour", "prostate", "surrounding"):
        sel = ph.mask.region(region)
        energy[region] = float(np.mean(ph.orthogonal[sel] ** 2)) if sel.any() else None
    return {
        "envelope": ph.spec.envelope,
        "coefficients": {n: ph.spec.coefficients.get(n, 0.0) for n in CANONICAL_FEATURES},
        "intercept": ph.spec.intercept,
        "used_features": ph.spec.used_features(),
        "ortho_amplitude": ph.spec.ortho_amplitude,
        "noise_sd": ph.spec.noise_sd,
        "seed": ph.spec.seed,
        "orthogonal_energy": energy,
        "n_valid": int(ph.mask.valid.sum()),
        "spec": ph.spec.to_dict(),
    }


def write_phantom(ph: Phantom, out_dir) -> Path:
    """Raw channels, CT, target, regions and ``phantom_truth.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in ph.raw.channels:
        save_volume(c, out / c.name)
    save_volume(ph.target, out / "SUV")
    save_mask(ph.mask, out / "regions")
    (out / "phantom_truth.json").write_text(json.dumps(truth_manifest(ph), indent=2) + "\n")
    return out
