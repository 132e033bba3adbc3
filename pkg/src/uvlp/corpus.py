"""Synthetic paired image-report corpus.

Each latent class gets a distinctive procedural image motif and a unique
report keyword, so cross-modal alignment has real learnable signal and the
class id doubles as an evaluation oracle. Everything is driven by one
numpy Generator: a fixed seed reproduces the corpus byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text import normalize_words

NOISE_STD = 0.05

# distinct per-class keywords; extended procedurally past the list
_KEYWORDS = [
    "opacity", "effusion", "nodule", "consolidation", "edema",
    "cardiomegaly", "atelectasis", "pneumothorax", "fibrosis", "emphysema",
]

_TEMPLATES = [
    "the scan shows {kw} in the {region} zone",
    "findings consistent with {kw} near the {region} field",
    "evidence of {kw} is noted in the {region} area",
    "mild {kw} observed in the {region} zone",
    "impression {kw} present in the {region} region",
    "study demonstrates {kw} within the {region} field",
]

# every template names the region and the motif is drawn there, so a matched
# pair is verifiable beyond class identity (matters for hard-negative ITM)
_REGIONS = ["upper", "lower", "left", "right", "central", "apical"]

_REGION_ANCHORS = {
    "upper": (0.28, 0.5), "lower": (0.72, 0.5), "left": (0.5, 0.28),
    "right": (0.5, 0.72), "central": (0.5, 0.5), "apical": (0.25, 0.25),
}

PROMPT_TEMPLATES = [
    "the scan shows {kw}",
    "evidence of {kw}",
    "findings consistent with {kw}",
    "impression {kw} present",
]


@dataclass
class SyntheticPair:
    """One image-report pair; `words` is the raw report, tokenized downstream."""
    image: np.ndarray
    words: list[str]
    class_id: int

    @property
    def text(self) -> str:
        return " ".join(self.words)


def class_keyword(class_id: int) -> str:
    if class_id < len(_KEYWORDS):
        return _KEYWORDS[class_id]
    return f"marker{class_id}"


def class_prompts(class_id: int) -> list[list[str]]:
    """Prompt ensemble for zero-shot classification of one class."""
    kw = class_keyword(class_id)
    return [normalize_words(t.format(kw=kw)) for t in PROMPT_TEMPLATES]


def _draw_motif(canvas: np.ndarray, class_id: int, region: str,
                rng: np.random.Generator) -> None:
    c, h, w = canvas.shape
    base = 0.15 + 0.08 * (class_id % 8)
    canvas += base
    yy, xx = np.mgrid[0:h, 0:w]
    ay, ax = _REGION_ANCHORS[region]
    cy = int(round(ay * h)) + int(rng.integers(-2, 3))
    cx = int(round(ax * w)) + int(rng.integers(-2, 3))
    r = h // 6 + int(rng.integers(-1, 2))
    lum = 0.55 + 0.05 * rng.standard_normal()
    kind = class_id % 6
    if kind == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == 1:
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif kind == 2:
        mask = (np.abs(yy - cy) <= r) & ((yy - cy) % 3 == 0)
    elif kind == 3:
        mask = (np.abs(xx - cx) <= r) & ((xx - cx) % 3 == 0)
    elif kind == 4:
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= max(1, r // 2) ** 2)
    else:
        mask = ((np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= r)) | \
               ((np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= r))
    canvas[:, mask] += lum


def _make_report(class_id: int, region: str, rng: np.random.Generator) -> list[str]:
    tpl = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    return normalize_words(tpl.format(kw=class_keyword(class_id), region=region))


def generate_corpus(num_pairs: int, num_classes: int, image_size=(1, 32, 32),
                    seed: int = 0) -> list[SyntheticPair]:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c, h, w = image_size
    if c < 1 or h < 4 or w < 4:
        raise ValueError(f"invalid image_size {image_size}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(num_pairs):
        class_id = i % num_classes
        region = _REGIONS[int(rng.integers(len(_REGIONS)))]
        img = np.zeros((c, h, w))
        _draw_motif(img, class_id, region, rng)
        img += rng.normal(0.0, NOISE_STD, size=img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        pairs.append(SyntheticPair(img, _make_report(class_id, region, rng), class_id))
    return pairs


def save_corpus(root, pairs: list[SyntheticPair], seed: int, num_classes: int) -> None:
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    c, h, w = pairs[0].image.shape
    meta = {
        "seed": seed,
        "num_pairs": len(pairs),
        "num_classes": num_classes,
        "image_size": [c, h, w],
        "class_ids": [p.class_id for p in pairs],
        "keywords": [class_keyword(k) for k in range(num_classes)],
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    for i, p in enumerate(pairs):
        (root / "pairs" / f"{i}.bin").write_bytes(
            np.ascontiguousarray(p.image, dtype="<f4").tobytes())
        (root / "pairs" / f"{i}.txt").write_text(p.text + "\n")


def load_corpus(root) -> tuple[list[SyntheticPair], dict]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    c, h, w = meta["image_size"]
    pairs = []
    for i in range(meta["num_pairs"]):
        raw = (root / "pairs" / f"{i}.bin").read_bytes()
        img = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float64)
        words = normalize_words((root / "pairs" / f"{i}.txt").read_text())
        pairs.append(SyntheticPair(img, words, meta["class_ids"][i]))
    return pairs, meta
