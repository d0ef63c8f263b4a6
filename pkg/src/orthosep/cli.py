"""``orthosep`` command line.

Exit codes: 0 success, 1 numerical or self-test failure, 2 configuration
error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .checks import run_all
from .evaluation import (
    ablation_suite,
    export_report,
    regional_mse,
    tumour_vs_rest_p,
    write_component_maps,
    write_manifest,
    write_regional_csv,
)
from .inr import load_checkpoint, predict_and_decompose, save_checkpoint, train, write_history_csv
from .kinetics import TimeGrid, ToftsParams, fit_tofts, load_series, population_aif
from .phantom import make_phantom, truth_manifest, write_phantom
from .preprocess import CANONICAL_FEATURES, FeatureSelection, assemble_features, normalize_channels, soft_tissue_mask, ttp_map
from .volumes import (
    ChannelVolume,
    MultiChannelVolume,
    RegionMask,
    VolumeFormatError,
    intersect_valid_mask,
    load_mask,
    load_volume,
    save_volume,
)

log = logging.getLogger("orthosep")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


# --- dataset plumbing -----------------------------------------------------------

def _load_raw(cfg: dict):
    """Raw channels (features + target) and region mask, from disk or a phantom spec."""
    ds = cfg["dataset"]
    target = ds["target"]
    if ds["dir"] is None:
        ph = make_phantom(cfgmod.phantom_spec(cfg))
        raw = ph.raw.select(CANONICAL_FEATURES).replace(ph.target)
        return raw, ph.mask, target
    root = Path(ds["dir"])
    names = [n for n in CANONICAL_FEATURES if (root / f"{n}.json").exists()]
    channels = [load_volume(root / n) for n in names] + [load_volume(root / target)]
    raw = MultiChannelVolume.from_channels(channels)
    if ds["mask"] and (root / f"{ds['mask']}.json").exists():
        mask = load_mask(root / ds["mask"])
    else:
        valid = intersect_valid_mask(raw.select(names))
        if ds["ct"] and (root / f"{ds['ct']}.json").exists():
            valid &= soft_tissue_mask(load_volume(root / ds["ct"]))
        mask = RegionMask(raw.grid, np.where(valid, 1, 0), valid)
    return raw, mask, target


def _prepare(cfg: dict):
    raw, mask, target = _load_raw(cfg)
    normalized = normalize_channels(raw, mask.valid, cfgmod.rules(cfg))
    t = raw[target].data[mask.valid]
    target_scale = float(t.max() - t.min()) if cfg["normalization"].get(target, {}).get("kind") == "minmax01" else 1.0
    return normalized, mask, target, target_scale


def _run_manifest(cfg: dict, command: str, **extra) -> dict:
    return {"command": command, "resolved_config": cfg, "seed": cfg["seeds"][0], **extra}


# --- commands -------------------------------------------------------------------

def _manifest_field(path, key: str):
    if not path:
        return None
    with open(path) as fh:
        doc = json.load(fh)
    return doc.get(key) if isinstance(doc, dict) else None


def cmd_phantom(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    ph = make_phantom(cfgmod.phantom_spec(cfg))
    write_phantom(ph, out)
    write_manifest(out / "manifest.json", _run_manifest(cfg, "phantom", truth=truth_manifest(ph)))
    print(f"phantom written to {out} ({int(ph.mask.valid.sum())} valid voxels)")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    sel = cfgmod.selection(cfg, args.ablate)
    if args.ablate:
        cfg["features"] = args.ablate
    feats, mask, target, _ = _prepare(cfg)
    X, y = assemble_features(feats, mask, sel, target)
    if args.resume:
        state, tcfg, _ = load_checkpoint(args.resume)
    else:
        state, tcfg = None, cfgmod.train_config(cfg)
    state = train(X.values, y, tcfg, state=state, epochs=args.stop_after)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, tcfg, out / "model", feature_names=X.feature_names)
    write_history_csv(state.history, out / "history.csv")
    write_manifest(out / "manifest.json", _run_manifest(
        cfg, "train", selection=sel.name, features=list(X.feature_names), n_voxels=int(X.shape[0]),
        epochs_completed=state.epoch, resumed_from=str(args.resume) if args.resume else None))
    last = state.history[-1] if state.history else None
    if last is not None:
        print(f"epoch {last.epoch}: total={last.total:.6g} mse_e={last.mse_e:.6g} mse_par={last.mse_par:.3g}")
    return EXIT_OK


def cmd_decompose(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    checkpoint = args.checkpoint or _manifest_field(args.config, "checkpoint")
    if checkpoint is None:
        raise cfgmod.ConfigError("checkpoint: no model checkpoint given")
    state, tcfg, meta = load_checkpoint(checkpoint)
    names = meta.get("feature_names") or list(CANONICAL_FEATURES)
    feats, mask, target, scale = _prepare(cfg)
    X, y = assemble_features(feats, mask, FeatureSelection("checkpoint", tuple(names)), target)
    decomp = predict_and_decompose(state.model, X.values, y, cfgmod.eval_projector(cfg), X.index_map)
    table = regional_mse(decomp, mask)
    out.mkdir(parents=True, exist_ok=True)
    write_component_maps(decomp, mask.grid, out / "maps", y)
    p_perp = tumour_vs_rest_p(decomp, mask)
    write_regional_csv(table, out / "regional.csv", config="checkpoint")
    write_manifest(out / "manifest.json", _run_manifest(
        cfg, "decompose", checkpoint=str(checkpoint), features=names, target_scale=scale,
        tumour_vs_rest_p_perp=p_perp, pythagorean_gap=table.pythagorean_gap,
        raw_scale_overall={"total_mse": table.overall.total_mse * scale**2,
                           "mse_par": table.overall.mse_par * scale**2,
                           "mse_perp": table.overall.mse_perp * scale**2}))
    print(f"overall total={table.overall.total_mse:.6g} par={table.overall.mse_par:.3g} "
          f"perp={table.overall.mse_perp:.6g}")
    return EXIT_OK


def cmd_ablate(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    feats, mask, target, scale = _prepare(cfg)
    results = ablation_suite(feats, mask, cfgmod.train_config(cfg), cfg["seeds"], cfg["ablations"],
                             target, cfgmod.eval_projector(cfg))
    export_report(results, out, mask.grid, _run_manifest(cfg, "ablate"), target_scale=scale)
    for res in results:
        print(f"{res.config:>15s}  total={res.stat('total_mse'):.6g}  par={res.stat('mse_par'):.3g}  "
              f"perp={res.stat('mse_perp'):.6g}")
    return EXIT_OK


def _series_path(cfg: dict, key: str, override):
    if override:
        cfg[key]["dce"] = str(override)  # recorded so the manifest alone reruns the command
    path = cfg[key]["dce"]
    if path is None:
        raise cfgmod.ConfigError(f"{key}.dce: no DCE series manifest given")
    return Path(path)


def cmd_tofts_fit(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    frames, grid = load_series(_series_path(cfg, "tofts", args.dce))
    tc = cfg["tofts"]
    aif = population_aif(grid, tc["aif_delay"], tc["aif_amplitude"], tc["aif_decay1"], tc["aif_decay2"])
    stack = np.stack([f.data for f in frames])
    vgrid = frames[0].grid
    valid = np.any(stack != 0, axis=0)
    maps = {k: np.zeros(vgrid.size) for k in ("Ktrans", "ve", "vp", "offset", "residual")}
    failed = 0
    init = ToftsParams(*tc["init"])
    for i in np.flatnonzero(valid):
        fit = fit_tofts(stack[:, i], aif, grid, init)
        failed += fit.diverged
        for k, v in (("Ktrans", fit.params.Ktrans), ("ve", fit.params.ve), ("vp", fit.params.vp),
                     ("offset", fit.offset), ("residual", fit.residual_norm)):
            maps[k][i] = v
    out.mkdir(parents=True, exist_ok=True)
    for k, v in maps.items():
        save_volume(ChannelVolume(k, vgrid, v), out / k)
    write_manifest(out / "manifest.json", _run_manifest(
        cfg, "tofts-fit", n_fitted=int(valid.sum()), n_diverged=int(failed),
        baseline_model="additive fitted offset"))
    print(f"fitted {int(valid.sum())} voxels ({failed} diverged)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ttp(cfg: dict, args) -> int:
    out = Path(cfg["output_dir"])
    frames, grid = load_series(_series_path(cfg, "ttp", args.dce))
    valid = np.any(np.stack([f.data for f in frames]) != 0, axis=0)
    ttp = ttp_map(frames, grid.t, cfg["ttp"]["norm_const"], valid, cfg["ttp"]["percentile"])
    out.mkdir(parents=True, exist_ok=True)
    save_volume(ttp, out / "TTP")
    write_manifest(out / "manifest.json", _run_manifest(cfg, "ttp"))
    print(f"TTP map written to {out / 'TTP.json'}")
    return EXIT_OK


def cmd_check(cfg: dict, args) -> int:
    results = run_all()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "decompose": cmd_decompose,
    "ablate": cmd_ablate,
    "tofts-fit": cmd_tofts_fit,
    "ttp": cmd_ttp,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON run configuration (or a run manifest.json)")
    common.add_argument("-o", "--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="seed for training and phantom generation")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted key; VALUE is parsed as JSON when possible")
    common.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS/OpenMP threads; 1 gives bitwise-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="orthosep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train the envelope network")
    p.add_argument("--ablate", help="train on an ablation feature set, e.g. minus_vp")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="run at most this many epochs in this invocation")
    p = sub.add_parser("decompose", parents=[common], help="residual maps and regional table")
    p.add_argument("checkpoint", nargs="?", help="model checkpoint (.json); defaults to the one in a -c manifest")
    sub.add_parser("ablate", parents=[common], help="leave-one-out and group ablations")
    p = sub.add_parser("tofts-fit", parents=[common], help="voxel-wise Tofts fit of a DCE series")
    p.add_argument("--dce", help="DCE series manifest")
    p = sub.add_parser("ttp", parents=[common], help="time-to-peak map of a DCE series")
    p.add_argument("--dce", help="DCE series manifest")
    sub.add_parser("check", parents=[common], help="run the numerical self-checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.resolve(args.config, args.overrides, args.seed, args.out)
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, VolumeFormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
