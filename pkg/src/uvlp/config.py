"""Flat run configuration with a stable content hash.

One JSON-serializable dataclass carries every knob for a run; the sha256 of
its canonical serialization stamps checkpoints and output directories so
artifacts can refuse mismatched configs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import PatchConfig
from .fusion import FusionConfig
from .model import ModelConfig
from .tig import TIGConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    corpus_dir: str = ""
    holdout_frac: float = 0.2
    vocab_max: int = 256
    l_t: int = 16
    # backbone
    patch_h: int = 4
    patch_w: int = 4
    d_v: int = 64
    backbone_layers: int = 2
    backbone_heads: int = 4
    backbone_frozen: bool = True
    # fusion encoder
    l_q: int = 8
    d_q: int = 64
    fusion_blocks: int = 4
    fusion_heads: int = 4
    cross_attn_every: int = 1
    d_proj: int = 32
    # TIG
    d_code: int = 32
    k_top: int = 64
    k_bot: int = 64
    h_top: int = 2
    w_top: int = 2
    adapter_hidden: int = 32
    decoder_hidden: int = 32
    beta1: float = 0.5
    beta2: float = 0.5
    # training
    lambda_itc: float = 1.0
    lambda_itm: float = 1.0
    lambda_itg: float = 1.0
    lambda_tig: float = 1.0
    batch_size: int = 16
    total_steps: int = 2000
    peak_lr: float = 1e-4
    init_lr: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    grad_clip: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path) -> None:
        payload = self.to_dict()
        payload["config_hash"] = self.config_hash()
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        raw.pop("config_hash", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    # -- derived module configs -------------------------------------------

    def model_config(self, vocab_size: int, image_size) -> ModelConfig:
        c, h, w = image_size
        patch = PatchConfig(self.patch_h, self.patch_w, self.d_v,
                            self.backbone_layers, self.backbone_heads,
                            self.backbone_frozen)
        fusion = FusionConfig(self.l_q, self.d_q, self.fusion_blocks,
                              self.fusion_heads, self.cross_attn_every,
                              self.l_t, vocab_size, self.d_v)
        tig = TIGConfig(self.d_code, self.k_top, self.k_bot, self.h_top, self.w_top,
                        h // self.patch_h, w // self.patch_w,
                        self.adapter_hidden, self.decoder_hidden,
                        self.beta1, self.beta2)
        return ModelConfig(tuple(image_size), self.d_proj, patch, fusion, tig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lambda_itc, self.lambda_itm, self.lambda_itg,
                           self.lambda_tig, self.batch_size, self.total_steps,
                           self.peak_lr, self.init_lr, self.warmup_frac,
                           self.weight_decay, self.adam_beta1, self.adam_beta2,
                           self.seed, self.grad_clip)

    def split_pairs(self, pairs):
        """Deterministic train/held-out split (classes stay balanced because
        the corpus is generated round-robin)."""
        return split_pairs(pairs, self.holdout_frac)


def split_pairs(pairs, holdout_frac: float):
    if not 0.0 <= holdout_frac < 1.0:
        raise ValueError("holdout_frac must be in [0, 1)")
    n_hold = int(round(holdout_frac * len(pairs)))
    cut = len(pairs) - n_hold
    return pairs[:cut], pairs[cut:]


def config_hash(cfg: RunConfig) -> str:
    return cfg.config_hash()


def save_run_config(cfg: RunConfig, path) -> str:
    cfg.save(path)
    return cfg.config_hash()


def load_run_config(path) -> RunConfig:
    return RunConfig.load(path)
