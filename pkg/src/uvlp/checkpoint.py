"""Bit-exact checkpointing of parameters, optimizer moments, and RNG streams.

Layout: <dir>/manifest.json plus one .npy per named array under <dir>/arrays/.
Arrays round-trip at full float64 precision, so a resumed run reproduces the
unbroken trajectory exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _array_dir(path: Path) -> Path:
    return path / "arrays"


def save_checkpoint(path, trainer, config_hash: str) -> None:
    path = Path(path)
    arrays = _array_dir(path)
    arrays.mkdir(parents=True, exist_ok=True)
    model = trainer.model
    param_names = []
    for name, p in model.named_parameters():
        np.save(arrays / f"{name}.npy", p.data)
        param_names.append(name)
    opt_meta = {}
    for name, st in trainer.opt.state.items():
        np.save(arrays / f"opt.{name}.m.npy", st["m"])
        np.save(arrays / f"opt.{name}.v.npy", st["v"])
        opt_meta[name] = {"t": st["t"]}
    np.save(arrays / "usage.book_top.npy", model.gen.book_top.usage)
    np.save(arrays / "usage.book_bot.npy", model.gen.book_bot.usage)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "step": trainer.step_idx,
        "params": param_names,
        "opt": opt_meta,
        "rng": {
            "data": trainer.data_rng.bit_generator.state,
            "mining": trainer.mining_rng.bit_generator.state,
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest at {mf}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    return manifest


def _check_hash(manifest: dict, config_hash) -> None:
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash']} vs current {config_hash}")


def load_model(path, model, config_hash=None) -> dict:
    """Restore model parameters only (evaluation path); returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    _check_hash(manifest, config_hash)
    arrays = _array_dir(path)
    for name, p in model.named_parameters():
        f = arrays / f"{name}.npy"
        if not f.exists():
            raise CheckpointError(f"missing array {name} in {path}")
        arr = np.load(f)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr
    model.gen.book_top.usage = np.load(arrays / "usage.book_top.npy")
    model.gen.book_bot.usage = np.load(arrays / "usage.book_bot.npy")
    return manifest


def load_checkpoint(path, trainer, config_hash=None) -> int:
    """Full restore for resumption; returns the step counter."""
    manifest = load_model(path, trainer.model, config_hash)
    arrays = _array_dir(Path(path))
    trainer.opt.state = {}
    for name, meta in manifest["opt"].items():
        trainer.opt.state[name] = {
            "m": np.load(arrays / f"opt.{name}.m.npy"),
            "v": np.load(arrays / f"opt.{name}.v.npy"),
            "t": int(meta["t"]),
        }
    trainer.data_rng.bit_generator.state = manifest["rng"]["data"]
    trainer.mining_rng.bit_generator.state = manifest["rng"]["mining"]
    trainer.step_idx = int(manifest["step"])
    # cached frozen-backbone features were computed from pre-restore weights
    trainer._cache_visual()
    return trainer.step_idx
