"""Corpus readers, vocabulary construction and dataset statistics.

Conventions follow the PTB / WikiText releases: one line per text unit,
whitespace tokenized, an end-of-sentence token at every newline, and a
vocabulary of words seen at least ``min_count`` times with everything else
mapped to the unknown token.
"""
from __future__ import annotations

import collections
import hashlib
import logging
import re
import struct
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

UNK = "<unk>"
EOS = "<eos>"
FORMULA = "<formula>"
RESERVED = (UNK, EOS, FORMULA)


@dataclass
class Vocabulary:
    token_of: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.id_of = {tok: i for i, tok in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ValueError("duplicate tokens in vocabulary")
        for tok in RESERVED:
            if tok not in self.id_of:
                raise ValueError(f"vocabulary is missing reserved token {tok}")

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.id_of.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of[int(i)] for i in ids]

    def digest(self) -> str:
        """Hash of the id -> token assignment (counts excluded)."""
        return hashlib.sha256("\n".join(self.token_of).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.token_of:
                fh.write(f"{tok}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, count = line.rstrip("\n").split("\t")
                tokens.append(tok)
                counts[tok] = int(count)
        return cls(tokens, counts)


def build_vocab(tokens: Iterable[str], min_count: int = 3) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; ids by descending count, then lexicographic.

    The reserved tokens are always present; ``counts`` records raw
    frequencies, with the unknown token absorbing every dropped occurrence.
    """
    raw = collections.Counter(tokens)
    kept = {t: c for t, c in raw.items() if c >= min_count or t in RESERVED}
    dropped = sum(c for t, c in raw.items() if t not in kept)
    counts = dict(kept)
    counts[UNK] = counts.get(UNK, 0) + dropped
    for tok in RESERVED:
        counts.setdefault(tok, 0)
    order = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(order, counts)


def iter_ptb_tokens(lines: Iterable[str]):
    for line in lines:
        yield from line.split()
        yield EOS


def read_ptb_tokens(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_ptb_tokens(fh))


def read_ptb_format(path, vocab: Vocabulary) -> np.ndarray:
    """Whitespace-split tokens with an end-of-sentence id at each newline."""
    return vocab.encode(read_ptb_tokens(path))


# ---------------------------------------------------------------- WikiText-style normalization

_NUM_SEP = re.compile(r"(?<=\d)([,.])(?=\d)")
_HYPHEN = re.compile(r"(?<=\w)-(?=\w)")
_PUNCT = re.compile(r"""([!"#$%&()*+/:;<=>?\[\\\]^`{|}~]|(?<!@)[,.](?!@)|'(?!s\b|re\b|ve\b|ll\b|d\b|m\b|t\b))""")
_CLITIC = re.compile(r"(?<=\w)('s|'re|'ve|'ll|'d|'m|n't)\b", re.IGNORECASE)


@dataclass
class NormalizeStats:
    dropped_chars: int = 0


def _clean(text: str, stats: NormalizeStats) -> str:
    out = []
    for ch in text:
        cat = unicodedata.category(ch)
        if ch == "�" or (cat.startswith("C") and ch not in "\n\t"):
            stats.dropped_chars += 1
            continue
        out.append(ch)
    return "".join(out)


def wikitext_normalize(text: str, stats: NormalizeStats | None = None) -> list[str]:
    """Tokenize raw text the way the WikiText release does (simplified Moses rules).

    Number-internal separators and word-internal hyphens become ``@,@``,
    ``@.@`` and ``@-@`` tokens; other punctuation is split from words; case
    is preserved.  Control characters and undecodable bytes are dropped and
    counted in ``stats``.
    """
    stats = stats if stats is not None else NormalizeStats()
    text = _clean(text, stats)
    text = _NUM_SEP.sub(r" @\1@ ", text)
    text = _HYPHEN.sub(" @-@ ", text)
    text = _CLITIC.sub(r" \1", text)
    text = _PUNCT.sub(r" \1 ", text)
    if stats.dropped_chars:
        log.warning("dropped %d non-text characters", stats.dropped_chars)
    return text.split()


def normalize_lines(lines: Iterable[str]) -> list[str]:
    """Raw text lines to a token stream with an end-of-sentence token per line."""
    stats = NormalizeStats()
    out: list[str] = []
    for line in lines:
        out.extend(wikitext_normalize(line, stats))
        out.append(EOS)
    return out


# ---------------------------------------------------------------- statistics

@dataclass
class CorpusStats:
    tokens: int
    vocab_size: int
    oov_rate: float
    zipf: list[tuple[int, int]]  # (rank, frequency), rank from 1

    def summary(self) -> dict:
        return {"tokens": self.tokens, "vocab_size": self.vocab_size, "oov_rate": self.oov_rate}


def stats(tokens: list[str], vocab: Vocabulary) -> CorpusStats:
    """Exact counts of a token stream under ``vocab``; unk-mapped tokens count as OoV.

    The Zipf table ranks the stream's in-vocabulary types (after unk mapping)
    by frequency.
    """
    unk = 0
    freq: collections.Counter = collections.Counter()
    for t in tokens:
        if t in vocab.id_of and t != UNK:
            freq[t] += 1
        else:
            unk += 1
            freq[UNK] += 1
    n = len(tokens)
    ranked = sorted(freq.values(), reverse=True)
    return CorpusStats(
        tokens=n,
        vocab_size=len(vocab),
        oov_rate=unk / n if n else 0.0,
        zipf=[(i + 1, c) for i, c in enumerate(ranked)],
    )


# ---------------------------------------------------------------- encoded streams

MAGIC = b"PSID"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")


def write_ids(path, ids: np.ndarray, vocab: Vocabulary) -> None:
    """Token ids as little-endian int32 after a header (magic, version, vocab hash, count)."""
    ids = np.asarray(ids, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, bytes.fromhex(vocab.digest()), ids.size))
        fh.write(ids.tobytes())


def read_ids(path, vocab: Vocabulary | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, version, digest, count = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not a token-id stream (magic {magic!r}, version {version})")
    if vocab is not None and digest.hex() != vocab.digest():
        raise ValueError(f"{path}: encoded with a different vocabulary")
    ids = np.frombuffer(data, dtype="<i4", offset=_HEADER.size, count=count)
    return ids.astype(np.int64)


def ids_vocab_digest(path) -> str:
    with open(path, "rb") as fh:
        return _HEADER.unpack(fh.read(_HEADER.size))[2].hex()
