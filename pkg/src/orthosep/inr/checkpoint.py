"""Model checkpoints: a JSON manifest plus a raw little-endian float64 blob.

Blob layout, each array C-ordered and concatenated:

    B (F x N), W0, b0, W1, b1, ..., W_out, b_out,
    then (if present) Adam m for every parameter, v for every parameter,
    and the AMSGrad running max for every parameter, in the same order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .optim import AdamAMSGrad, PlateauScheduler
from .siren import FourierEncoding, SirenModel
from .training import EpochRecord, TrainConfig, TrainState

FORMAT = "orthosep-siren-checkpoint/1"
_LE_F64 = np.dtype("<f8")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_checkpoint(state: TrainState, config: TrainConfig, path, feature_names=None) -> Path:
    json_path, bin_path = _paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    arrays = [model.encoding.B] + model.params + state.optimizer.state_arrays()
    manifest = {
        "format": FORMAT,
        "widths": list(model.widths),
        "omega0": model.omega0,
        "n_inputs": model.encoding.n_inputs,
        "n_fourier": model.encoding.n_features,
        "sigma_b": model.encoding.sigma,
        "seed": model.seed,
        "feature_names": list(feature_names) if feature_names is not None else None,
        "config": config.to_dict(),
        "epoch": state.epoch,
        "optimizer": {
            "step_count": state.optimizer.step_count,
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
        },
        "scheduler": state.scheduler.state_dict(),
        "history": [asdict(r) for r in state.history],
        "blob": {"file": bin_path.name, "dtype": "<f8", "shapes": [list(a.shape) for a in arrays]},
    }
    bin_path.write_bytes(b"".join(np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for a in arrays))
    json_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return json_path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    json_path, bin_path = _paths(path)
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{json_path}: not an orthosep checkpoint")
    raw = np.frombuffer(bin_path.read_bytes(), dtype=_LE_F64)
    shapes = [tuple(s) for s in manifest["blob"]["shapes"]]
    expected = sum(int(np.prod(s)) for s in shapes)
    if raw.size != expected:
        raise ValueError(f"{bin_path}: blob has {raw.size} values, manifest expects {expected}")
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(raw[pos:pos + n].reshape(s).astype(np.float64))
        pos += n
    n_layers = len(manifest["widths"]) - 1
    enc = FourierEncoding(arrays[0], manifest["sigma_b"])
    params = arrays[1:1 + 2 * n_layers]
    model = SirenModel(enc, params[0::2], params[1::2], manifest["omega0"], manifest["seed"])
    opt_meta = manifest["optimizer"]
    optimizer = AdamAMSGrad(model.params, opt_meta["beta1"], opt_meta["beta2"], opt_meta["eps"])
    opt_arrays = arrays[1 + 2 * n_layers:]
    if opt_arrays:
        optimizer.load_state_arrays(opt_arrays, opt_meta["step_count"])
    config = TrainConfig.from_dict(manifest["config"])
    scheduler = PlateauScheduler(config.lr, config.factor, config.patience, config.rel_threshold, config.min_lr)
    scheduler.load_state_dict(manifest["scheduler"])
    history = [EpochRecord(**r) for r in manifest["history"]]
    return TrainState(model, optimizer, scheduler, manifest["epoch"], history), config, manifest


def write_history_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mse_e", "mse_par", "total", "lr"])
        for r in history:
            w.writerow([r.epoch] + [repr(float(v)) for v in (r.mse_e, r.mse_par, r.total, r.lr)])
