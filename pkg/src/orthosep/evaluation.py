"""Regional error tables, the feature-ablation harness and report export."""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .inr.training import TrainConfig, predict_and_decompose, train
from .preprocess import ABLATIONS, FeatureSelection, assemble_features
from .projection import ProjectorSpec, ResidualDecomposition
from .stats import DegenerateSampleError, rank_sum_test
from .volumes import GridSpec, MultiChannelVolume, RegionMask, save_volume, scatter_to_volume

log = logging.getLogger(__name__)

REGIONS = ("tumour", "prostate", "surrounding")
CSV_COLUMNS = ("config", "region", "n_voxels", "total_mse", "total_sd", "mse_par", "par_sd",
               "mse_perp", "perp_sd", "p_vs_full")


@dataclass(frozen=True)
class RegionStats:
    n_voxels: int
    total_mse: float
    total_sd: float
    mse_par: float
    par_sd: float
    mse_perp: float
    perp_sd: float

    @classmethod
    def from_components(cls, e, r_par, r_perp) -> "RegionStats":
        sq = [np.asarray(v, dtype=np.float64) ** 2 for v in (e, r_par, r_perp)]
        return cls(sq[0].size, *(float(f(s)) for s in sq for f in (np.mean, np.std)))


@dataclass(frozen=True)
class RegionalErrorTable:
    regions: dict[str, RegionStats]   # empty regions are absent
    overall: RegionStats
    # pooled check: sum e^2 vs sum r_par^2 + sum r_perp^2 (exact only for pinv)
    pythagorean_gap: float = 0.0

    def __getitem__(self, region: str) -> RegionStats:
        return self.overall if region == "overall" else self.regions[region]

    def __contains__(self, region: str) -> bool:
        return region == "overall" or region in self.regions


def regional_mse(decomp: ResidualDecomposition, mask: RegionMask) -> RegionalErrorTable:
    """Mean squared ``e``, ``r_par``, ``r_perp`` per evaluation region.

    Prostate means non-tumoural prostate; surrounding is the remaining valid
    tissue. Regions without voxels are left out rather than reported as zero.
    """
    if decomp.index_map is None:
        raise ValueError("decomposition has no index_map")
    idx = np.asarray(decomp.index_map)
    if idx.size != decomp.e.size or (idx.size and idx.max() >= mask.grid.size):
        raise ValueError("index_map is inconsistent with the mask")
    regions = {}
    for name in REGIONS:
        rows = mask.region(name)[idx]
        if rows.any():
            regions[name] = RegionStats.from_components(decomp.e[rows], decomp.r_par[rows], decomp.r_perp[rows])
    overall = RegionStats.from_components(decomp.e, decomp.r_par, decomp.r_perp)
    se = float(decomp.e @ decomp.e)
    split = float(decomp.r_par @ decomp.r_par + decomp.r_perp @ decomp.r_perp)
    gap = abs(se - split) / se if se > 0 else 0.0
    return RegionalErrorTable(regions, overall, gap)


def tumour_vs_rest_p(decomp: ResidualDecomposition, mask: RegionMask, component: str = "r_perp") -> float | None:
    """Rank-sum p-value of squared ``component`` inside vs outside the tumour."""
    idx = np.asarray(decomp.index_map)
    values = getattr(decomp, component) ** 2
    tum = mask.region("tumour")[idx]
    if not tum.any() or tum.all():
        return None
    try:
        return rank_sum_test(values[tum], values[~tum])
    except DegenerateSampleError:
        return None


# --- ablations ----------------------------------------------------------------

@dataclass
class AblationRun:
    config: str
    seed: int
    table: RegionalErrorTable
    decomp: ResidualDecomposition = field(repr=False)
    history: list = field(default_factory=list, repr=False)


@dataclass
class AblationResult:
    config: str
    runs: list[AblationRun]
    p_vs_full: dict[str, float | None] = field(default_factory=dict)

    def stat(self, field_name: str, region: str = "overall", reduce=np.median) -> float:
        return float(reduce([getattr(r.table[region], field_name) for r in self.runs if region in r.table]))

    def mean_sd(self, field_name: str, region: str = "overall") -> tuple[float, float]:
        vals = [getattr(r.table[region], field_name) for r in self.runs if region in r.table]
        return float(np.mean(vals)), float(np.std(vals))


def ablation_configs(names: Iterable[str] | None = None) -> list[FeatureSelection]:
    names = list(ABLATIONS) if names is None else list(names)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise KeyError(f"unknown ablation configuration(s) {unknown}")
    return [ABLATIONS[n] for n in names]


def run_single(mcv: MultiChannelVolume, mask: RegionMask, sel: FeatureSelection, config: TrainConfig,
               target: str = "SUV", eval_projector: ProjectorSpec | None = None) -> AblationRun:
    X, y = assemble_features(mcv, mask, sel, target)
    state = train(X.values, y, config)
    decomp = predict_and_decompose(state.model, X.values, y, eval_projector or config.projector, X.index_map)
    return AblationRun(sel.name, config.seed, regional_mse(decomp, mask), decomp, state.history)


def ablation_suite(
    mcv: MultiChannelVolume,
    mask: RegionMask,
    config: TrainConfig = TrainConfig(),
    seeds: Sequence[int] = (0,),
    configs: Iterable[str] | None = None,
    target: str = "SUV",
    eval_projector: ProjectorSpec | None = None,
    callback=None,
) -> list[AblationResult]:
    """Train one fresh model per (configuration, seed) on the same voxels.

    Evaluation always builds the projector on the whole masked feature matrix.
    ``p_vs_full`` compares each configuration's squared total residual with the
    full model's over the same voxels (first seed), per region.
    """
    results = []
    for sel in ablation_configs(configs):
        runs = []
        for seed in seeds:
            log.info("ablation %s seed %d", sel.name, seed)
            run = run_single(mcv, mask, sel, replace(config, seed=int(seed)), target, eval_projector)
            runs.append(run)
            if callback is not None:
                callback(run)
        results.append(AblationResult(sel.name, runs))
    full = next((r for r in results if r.config == "full"), None)
    if full is not None:
        for res in results:
            if res is full:
                continue
            res.p_vs_full = _p_vs(full.runs[0], res.runs[0], mask)
    return results


def _p_vs(ref: AblationRun, other: AblationRun, mask: RegionMask) -> dict:
    idx = np.asarray(ref.decomp.index_map)
    if not np.array_equal(idx, other.decomp.index_map):
        raise ValueError("ablation runs were evaluated on different voxels")
    out = {}
    for region in REGIONS + ("overall",):
        rows = np.ones(idx.size, bool) if region == "overall" else mask.region(region)[idx]
        if not rows.any():
            continue
        try:
            out[region] = rank_sum_test(ref.decomp.e[rows] ** 2, other.decomp.e[rows] ** 2)
        except DegenerateSampleError:
            out[region] = None
    return out


# --- export -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _row(config: str, region: str, s: RegionStats, p=None) -> list[str]:
    return [config, region, str(s.n_voxels)] + [_fmt(getattr(s, f)) for f in CSV_COLUMNS[3:-1]] + [_fmt(p)]


def write_regional_csv(table: RegionalErrorTable, path, config: str = "full", p_values: dict | None = None) -> None:
    p_values = p_values or {}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for region in REGIONS:
            if region in table.regions:
                w.writerow(_row(config, region, table.regions[region], p_values.get(region)))
        w.writerow(_row(config, "overall", table.overall, p_values.get("overall")))


def write_ablation_csv(results: Sequence[AblationResult], path, per_seed_path=None, summary_path=None) -> None:
    """Seed-averaged rows per (configuration, region); optional per-seed and Table-2 summary files."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for res in results:
            for region in REGIONS + ("overall",):
                tables = [r.table[region] for r in res.runs if region in r.table]
                if not tables:
                    continue
                avg = RegionStats(
                    tables[0].n_voxels,
                    *(float(np.mean([getattr(t, f) for t in tables])) for f in CSV_COLUMNS[3:-1]),
                )
                w.writerow(_row(res.config, region, avg, res.p_vs_full.get(region)))
    if per_seed_path is not None:
        with Path(per_seed_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("seed",) + CSV_COLUMNS[:-1])
            for res in results:
                for run in res.runs:
                    for region in REGIONS + ("overall",):
                        if region in run.table:
                            w.writerow([str(run.seed)] + _row(res.config, region, run.table[region])[:-1])
    if summary_path is not None:
        with Path(summary_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("config", "n_seeds", "total_mse_mean", "total_mse_sd", "mse_par_mean", "mse_par_sd",
                        "mse_perp_mean", "mse_perp_sd", "total_mse_median",
                        "total_mse_pooled", "total_sd_pooled"))
            for res in results:
                cells = [res.config, str(len(res.runs))]
                for f in ("total_mse", "mse_par", "mse_perp"):
                    cells += [_fmt(x) for x in res.mean_sd(f)]
                cells.append(_fmt(res.stat("total_mse")))
                # voxels of every run in one sample, next to the per-run (seed-level) view
                pooled = np.concatenate([run.decomp.e**2 for run in res.runs])
                cells += [_fmt(float(pooled.mean())), _fmt(float(pooled.std()))]
                w.writerow(cells)


def write_component_maps(decomp: ResidualDecomposition, grid: GridSpec, out_dir, y=None) -> list[Path]:
    """Squared residual components, plus reconstruction and target when ``y`` is given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = {"r_par_sq": decomp.r_par**2, "r_perp_sq": decomp.r_perp**2, "e_sq": decomp.e**2}
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        fields["reconstruction"] = y + decomp.e
        fields["target"] = y
    paths = []
    for name, values in fields.items():
        save_volume(scatter_to_volume(values, decomp.index_map, grid, 0.0, name), out / name)
        paths.append(out / f"{name}.json")
    return paths


def write_manifest(path, payload: dict) -> None:
    body = {
        "package": "orthosep",
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        **payload,
    }
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def export_report(
    results: Sequence[AblationResult],
    out_dir,
    grid: GridSpec | None = None,
    manifest: dict | None = None,
    target_scale: float = 1.0,
) -> Path:
    """Write ``regional.csv``, ``ablation.csv`` (+ per-seed and summary), maps and ``manifest.json``.

    ``target_scale`` is the factor that maps normalised target units back to
    raw units; raw-scale overall MSEs are added to the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = results[0].runs[0]
    write_regional_csv(first.table, out / "regional.csv", results[0].config)
    write_ablation_csv(results, out / "ablation.csv", out / "ablation_per_seed.csv", out / "ablation_summary.csv")
    if grid is not None:
        write_component_maps(first.decomp, grid, out / "maps")
    raw_scale = {
        res.config: {f: res.mean_sd(f)[0] * target_scale**2 for f in ("total_mse", "mse_par", "mse_perp")}
        for res in results
    }
    payload = {
        "configs": [r.config for r in results],
        "seeds": [run.seed for run in results[0].runs],
        "statistical_test": "two-sided Mann-Whitney U (exact for small samples, tie-corrected normal otherwise)",
        "pooling": "ablation.csv: mean of per-run regional means; ablation_summary.csv adds voxel-pooled "
                   "mean and SD over all runs of a configuration",
        "target_scale": target_scale,
        "raw_scale_overall": raw_scale,
        "pythagorean_gap": {r.config: [run.table.pythagorean_gap for run in r.runs] for r in results},
        **(manifest or {}),
    }
    write_manifest(out / "manifest.json", payload)
    return out
