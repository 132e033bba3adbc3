"""Word-level tokenizer with task-specific special tokens.

Reports are lowercased and stripped of punctuation before counting; the paper
trail for casing/punctuation is silent, so this is a local choice, not an
inherited one. PAD is pinned to id 0 so attention-validity masks can be
computed as ``ids != 0``.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD, UNK, CLS, DEC, BOS, EOS = range(6)
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[DEC]", "[BOS]", "[EOS]"]

_WORD_RE = re.compile(r"[a-z0-9]+")


def normalize_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def get(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_valid: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.attention_valid = np.asarray(self.attention_valid, dtype=bool)


def build_vocabulary(corpus: list[list[str]], max_size: int) -> Vocabulary:
    """Most-frequent words up to max_size including the six specials.

    Frequency ties break by first occurrence in corpus order, so the result is
    deterministic for a fixed corpus.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)} specials")
    counts = Counter()
    first_seen: dict[str, int] = {}
    pos = 0
    for words in corpus:
        for w in words:
            counts[w] += 1
            if w not in first_seen:
                first_seen[w] = pos
            pos += 1
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    keep = ranked[: max_size - len(SPECIAL_TOKENS)]
    id_to_token = SPECIAL_TOKENS + keep
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def encode(words: list[str], vocab: Vocabulary, special: int, max_len: int,
           append_eos: bool = False) -> TokenSequence:
    """[special] + word ids, PAD-padded to max_len; truncation keeps the earliest words."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    budget = max_len - 1 - (1 if append_eos else 0)
    body = [vocab.get(w) for w in words[:budget]]
    ids = [special] + body + ([EOS] if append_eos else [])
    ids = ids + [PAD] * (max_len - len(ids))
    arr = np.array(ids, dtype=np.int64)
    return TokenSequence(arr, arr != PAD)


def decode(ids, vocab: Vocabulary, strip_specials: bool = True) -> list[str]:
    out = []
    for i in np.asarray(ids).reshape(-1):
        i = int(i)
        if strip_specials and i < len(SPECIAL_TOKENS):
            continue
        out.append(vocab.id_to_token[i] if i < len(vocab) else SPECIAL_TOKENS[UNK])
    return out


def save_vocabulary(path, vocab: Vocabulary) -> None:
    with open(path, "w") as f:
        f.write("\n".join(vocab.id_to_token) + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path) as f:
        id_to_token = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)
