"""Byte-level corpora: packing, train/validation split and batch sampling."""
import os
from importlib import resources
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigError

SEPARATOR_ID = 0
VOCAB_SIZE = 256


def split_documents(raw: bytes) -> List[bytes]:
    """Blank-line separated paragraphs; NUL bytes are dropped since id 0 marks document ends."""
    raw = raw.replace(b"\r\n", b"\n").replace(b"\x00", b"")
    return [d.strip(b"\n") for d in raw.split(b"\n\n") if d.strip()]


def pack(docs: Sequence[bytes]) -> np.ndarray:
    """Concatenate documents, each followed by the separator id."""
    if not docs:
        return np.zeros(0, dtype=np.int64)
    buf = bytearray()
    for d in docs:
        buf += d
        buf.append(SEPARATOR_ID)
    return np.frombuffer(bytes(buf), dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids if i != SEPARATOR_ID).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray
    name: str = "corpus"

    @classmethod
    def from_bytes(cls, raw: bytes, val_fraction=0.1, seed=0, name="corpus"):
        """Split documents into train/validation by a seeded permutation; order within a split is kept."""
        if not 0 < val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
        docs = split_documents(raw)
        if len(docs) < 2:
            raise ConfigError("corpus needs at least two documents (blank-line separated paragraphs)")
        perm = np.random.default_rng(seed).permutation(len(docs))
        n_val = max(1, int(round(val_fraction * len(docs))))
        val_ids = set(perm[:n_val].tolist())
        train = [d for i, d in enumerate(docs) if i not in val_ids]
        val = [d for i, d in enumerate(docs) if i in val_ids]
        return cls(pack(train), pack(val), name)

    @classmethod
    def from_paths(cls, paths, val_fraction=0.1, seed=0):
        chunks = []
        for p in paths:
            with open(p, "rb") as f:
                chunks.append(f.read())
        return cls.from_bytes(b"\n\n".join(chunks), val_fraction, seed, name=",".join(map(os.path.basename, paths)))

    @classmethod
    def load(cls, source, val_fraction=0.1, seed=0):
        """``synthetic:<chars>[:<seed>]``, ``bundled:<name>`` or a comma-separated list of file paths."""
        if source.startswith("bundled:"):
            ref = resources.files("rommamba.corpora").joinpath(source.split(":", 1)[1] + ".txt")
            return cls.from_bytes(ref.read_bytes(), val_fraction, seed, name=source)
        if source.startswith("synthetic:"):
            parts = source.split(":")
            n_chars = int(float(parts[1]))
            gen_seed = int(parts[2]) if len(parts) > 2 else 0
            return cls.from_bytes(synthetic_text(n_chars, gen_seed).encode(), val_fraction, seed, name=source)
        return cls.from_paths([p for p in source.split(",") if p], val_fraction, seed)

    def batch(self, seed, step, batch_size, seq_len, split="train"):
        """Inputs and next-token targets ``[batch_size, seq_len]``; a pure function of ``(seed, step)``."""
        stream = self.train if split == "train" else self.val
        hi = len(stream) - seq_len - 1
        if hi < 0:
            raise ConfigError(f"{split} stream ({len(stream)} tokens) is shorter than seq_len + 1")
        rng = np.random.default_rng([int(seed), int(step)])
        starts = rng.integers(0, hi + 1, size=batch_size)
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        window = stream[idx]
        return window[:, :-1], window[:, 1:]

    def windows(self, length, split="val", max_windows=None):
        """Non-overlapping ``(input, target)`` windows of ``length`` predicted tokens."""
        stream = self.train if split == "train" else self.val
        n = (len(stream) - 1) // length
        if max_windows is not None:
            n = min(n, max_windows)
        if n < 1:
            raise ConfigError(f"{split} stream ({len(stream)} tokens) is shorter than context length {length} + 1")
        idx = np.arange(n)[:, None] * length + np.arange(length + 1)[None, :]
        w = stream[idx]
        return w[:, :-1], w[:, 1:]


# ---------------------------------------------------------------------- synthetic text

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiouy"
_FUNCTION_WORDS = ("the of and to in is that for it as with was on by at from or an be this which are but not "
                   "have one all were when there can more if will so about out up into than them some").split()


def _topic_lexicon(rng, size):
    cons = rng.choice(list(_CONSONANTS), size=7, replace=False)
    vows = rng.choice(list(_VOWELS), size=3, replace=False)
    words = set()
    while len(words) < size:
        n_syl = rng.integers(1, 4)
        w = "".join(rng.choice(cons) + rng.choice(vows) for _ in range(n_syl))
        if rng.random() < 0.3:
            w += rng.choice(cons)
        words.add(w)
    return sorted(words)


def synthetic_text(n_chars: int, seed: int = 0, n_topics: int = 8, lexicon_size: int = 160) -> str:
    """English-shaped text from seeded topic lexicons, ``n_chars`` characters long.

    Each paragraph picks one topic; its words mix a topic-specific Zipfian lexicon
    (distinct letter inventory per topic) with shared function words, so token
    statistics depend on the paragraph's topic.
    """
    rng = np.random.default_rng([int(seed), 7919])
    lexicons = [_topic_lexicon(rng, lexicon_size) for _ in range(n_topics)]
    ranks = np.arange(1, lexicon_size + 1)
    zipf = 1.0 / ranks
    zipf /= zipf.sum()
    fw = len(_FUNCTION_WORDS)
    fzipf = 1.0 / np.arange(1, fw + 1)
    fzipf /= fzipf.sum()
    cdf, fcdf = np.cumsum(zipf), np.cumsum(fzipf)
    out, total = [], 0
    while total < n_chars:
        topic = rng.integers(n_topics)
        lex = lexicons[topic]
        sentences = []
        for _ in range(rng.integers(2, 7)):
            n_words = rng.integers(4, 14)
            is_fw = rng.random(n_words) < 0.35
            fi = np.searchsorted(fcdf, rng.random(n_words), side="right")
            li = np.searchsorted(cdf, rng.random(n_words), side="right")
            words = [_FUNCTION_WORDS[min(f, fw - 1)] if m else lex[min(i, lexicon_size - 1)]
                     for m, f, i in zip(is_fw, fi, li)]
            s = " ".join(words)
            sentences.append(s[0].upper() + s[1:] + ("." if rng.random() < 0.85 else "?"))
        para = " ".join(sentences)
        out.append(para)
        total += len(para) + 2
    return "\n\n".join(out)[:n_chars]
