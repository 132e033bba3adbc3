"""Co-training loop over the four objectives.

Per step: one UNIMODAL forward (contrastive), one BIDIRECTIONAL forward over
the 3N matched/hard-negative batch (matching; its positive slice also feeds
image generation), one MULTIMODAL_CAUSAL forward (text generation), and the
TIG decode. Objectives with zero weight are skipped outright, so their
parameters and optimizer state stay bitwise untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fusion as fz
from . import objectives as obj
from . import tig as tigmod
from .autodiff import Tensor
from .model import TextBatch, VLModel, encode_batch
from .optim import AdamW
from .text import Vocabulary

METRICS_HEADER = "step,itc,itm,itg,tig,total,lr"

OBJECTIVE_NAMES = ("itc", "itm", "itg", "tig")

# Mining at the learned contrastive temperature degenerates to argmax once the
# similarity matrix sharpens, and with small batches the argmax negative is
# usually a paraphrase of the positive. Unit temperature keeps mined negatives
# hard but true.
MINING_TEMPERATURE = 1.0


class TrainAbort(RuntimeError):
    """Raised when a loss term goes non-finite; .term names the offender."""

    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} loss at step {step}: {value!r}")
        self.term = term


@dataclass
class TrainConfig:
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
    seed: int = 0
    grad_clip: float | None = None

    def validate(self) -> None:
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0,1)")
        if self.peak_lr <= 0 or self.init_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda_itc, self.lambda_itm, self.lambda_itg, self.lambda_tig)


@dataclass
class LossReport:
    step: int
    itc: float
    itm: float
    itg: float
    tig: float
    total: float
    lr: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.itc!r},{self.itm!r},{self.itg!r},"
                f"{self.tig!r},{self.total!r},{self.lr!r}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from init_lr to peak_lr, then cosine decay to zero."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_frac * cfg.total_steps
    if step < warm:
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * (step / warm)
    progress = (step - warm) / (cfg.total_steps - warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Trainer:
    def __init__(self, model: VLModel, vocab: Vocabulary, pairs, cfg: TrainConfig,
                 run_dir=None):
        cfg.validate()
        if all(lam == 0 for lam in cfg.lambdas):
            raise ValueError("at least one objective must have positive weight")
        self.model = model
        self.cfg = cfg
        self.n = len(pairs)
        self.text = encode_batch([p.words for p in pairs], vocab, model.cfg.fusion.l_t)
        self.images = np.stack([p.image for p in pairs])
        self._cache_visual()
        self.opt = AdamW(model.trainable_parameters(), cfg.adam_beta1, cfg.adam_beta2,
                         weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
        self.data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 100]))
        self.mining_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
        self.step_idx = 0
        self.metrics_path = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self.metrics_path = run_dir / "metrics.csv"
            if not self.metrics_path.exists():
                self.metrics_path.write_text(METRICS_HEADER + "\n")

    def _cache_visual(self) -> None:
        if not self.model.cfg.patch.freeze:
            self.kv_all = None
            return
        kvs, locals_ = [], []
        for i in range(0, self.n, 64):
            kv, local = self.model.visual_kv(self.images[i : i + 64])
            kvs.append(kv.data)
            locals_.append(local.data)
        self.kv_all = np.concatenate(kvs)
        self.local_all = np.concatenate(locals_)

    def _visual(self, idx: np.ndarray):
        if self.kv_all is not None:
            return Tensor(self.kv_all[idx]), Tensor(self.local_all[idx])
        return self.model.visual_kv(self.images[idx])

    def _text_batch(self, idx: np.ndarray) -> TextBatch:
        t = self.text
        return TextBatch(t.ids_cls[idx], t.valid_cls[idx], t.ids_dec[idx], t.valid_dec[idx])

    def train_step(self, idx=None) -> LossReport:
        cfg, model = self.cfg, self.model
        if idx is None:
            idx = self.data_rng.integers(0, self.n, size=cfg.batch_size)
        batch = self._text_batch(idx)
        kv, local = self._visual(idx)
        images = self.images[idx]
        n = len(idx)
        l_itc, l_itm, l_itg, l_tig = cfg.lambdas

        losses: dict[str, Tensor] = {}
        sim = None
        causal_ft = None
        if l_itc > 0 and l_itg > 0:
            # unimodal and causal rows share one encoder pass (per-row masks)
            ids_m = np.concatenate([batch.ids_cls, batch.ids_dec])
            valid_m = np.concatenate([batch.valid_cls, batch.valid_dec])
            kinds = [fz.MaskKind.UNIMODAL] * n + [fz.MaskKind.MULTIMODAL_CAUSAL] * n
            mix = model.encoder(ids_m, valid_m, ad.concat([kv, kv], axis=0), kinds)
            losses["itc"], sim = obj.itc_loss(mix.f_q[:n], mix.f_t[:n, 0], model.heads)
            causal_ft = mix.f_t[n:]
        elif l_itc > 0:
            uni = model.forward_unimodal(batch, kv)
            losses["itc"], sim = obj.itc_loss(uni.f_q, uni.f_t_special, model.heads)
        elif l_itm > 0:
            with ad.no_grad():
                uni = model.forward_unimodal(batch, kv)
                s = obj.similarity_matrix(uni.f_q, uni.f_t_special, model.heads)
            sim = obj.BatchSimilarity(s.data)

        pos_fq = pos_ft_cls = None
        if l_itm > 0:
            neg_t, neg_i = obj.mine_hard_negatives(sim, MINING_TEMPERATURE, self.mining_rng)
            ids3 = np.concatenate([batch.ids_cls, batch.ids_cls[neg_t], batch.ids_cls])
            valid3 = np.concatenate([batch.valid_cls, batch.valid_cls[neg_t], batch.valid_cls])
            kv3 = ad.concat([kv, kv, kv[neg_i]], axis=0)
            out3 = model.forward_bidirectional(ids3, valid3, kv3)
            losses["itm"] = obj.itm_loss(out3.f_q[:n], out3.f_q[n : 2 * n],
                                         out3.f_q[2 * n :], model.heads)
            pos_fq, pos_ft_cls = out3.f_q[:n], out3.f_t[:n, 0]
        elif l_tig > 0:
            bid = model.forward_bidirectional(batch.ids_cls, batch.valid_cls, kv)
            pos_fq, pos_ft_cls = bid.f_q, bid.f_t_special

        if l_itg > 0:
            if causal_ft is None:
                logits = model.itg_logits(batch, kv)
            else:
                logits = model.heads.itg(causal_ft)
            losses["itg"] = obj.itg_loss_from_logits(logits, batch.ids_dec)

        if l_tig > 0:
            losses["tig"], maps = tigmod.tig_loss(images, pos_fq, local,
                                                  pos_ft_cls, model.gen)
            model.gen.book_top.record_usage(maps.top_idx)
            model.gen.book_bot.record_usage(maps.bot_idx)

        total = None
        values = {}
        for name, lam in zip(OBJECTIVE_NAMES, cfg.lambdas):
            if name not in losses:
                values[name] = 0.0
                continue
            val = float(losses[name].data)
            values[name] = val
            if not math.isfinite(val):
                raise TrainAbort(name, self.step_idx, val)
            term = ad.mul(losses[name], lam)
            total = term if total is None else ad.add(total, term)
        total_val = float(total.data)
        if not math.isfinite(total_val):
            raise TrainAbort("total", self.step_idx, total_val)

        lr = lr_at(self.step_idx, cfg)
        self.opt.zero_grad()
        total.backward()
        self.opt.step(lr)
        self.opt.zero_grad()

        report = LossReport(self.step_idx, values["itc"], values["itm"],
                            values["itg"], values["tig"], total_val, lr)
        self.step_idx += 1
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(report.csv_row() + "\n")
        return report

    def run(self, num_steps=None) -> list[LossReport]:
        if num_steps is None:
            num_steps = self.cfg.total_steps - self.step_idx
        return [self.train_step() for _ in range(num_steps)]
