"""Lowercasing WordPiece-style subword tokenizer.

Produces fixed-length BERT-format sequences ([CLS] pieces [SEP] [PAD]...)
for entity surface forms. A small frequency-driven merge procedure can build
a vocabulary from scratch for synthetic corpora; published vocabulary files
(one token per line, id = line number) load directly.
"""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError, ParseError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"


class Vocab:
    """Immutable token <-> id table with the four reserved tokens.

    Ids are dense 0..V-1; [PAD] is always id 0.
    """

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        for tok in RESERVED:
            if tokens.count(tok) != 1:
                raise ConfigError(f"reserved token {tok} must appear exactly once")
        if tokens[0] != PAD:
            raise ConfigError(f"{PAD} must be token 0, found {tokens[0]!r}")
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token: str):
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def content_hash(self) -> str:
        """Stable hash of the token list, stored in checkpoints."""
        blob = "\n".join(self._tokens).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                tok = line.rstrip("\n")
                if not tok:
                    raise ParseError(f"{path}:{lineno}: empty vocabulary line")
                tokens.append(tok)
        return cls(tokens)


@dataclass(frozen=True)
class TokenSequence:
    """One tokenized surface form, padded to a fixed length."""

    ids: tuple[int, ...]
    attention_mask: tuple[bool, ...]

    def __len__(self):
        return len(self.ids)


def _is_punctuation(ch: str) -> bool:
    if not ch.strip():
        return False
    cat = unicodedata.category(ch)
    return cat.startswith("P") or cat.startswith("S")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes its own word."""
    words = []
    current = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif _is_punctuation(ch):
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


def _word_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + ch for ch in word[1:]]


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Build a subword vocabulary by iterative most-frequent pair merging.

    Words are decomposed into characters (continuations carry the ``##``
    prefix); the most frequent adjacent symbol pair is merged repeatedly
    until the vocabulary reaches ``target_size`` or no pair occurs twice.
    Ties break on the lexicographically smaller pair, so construction is
    deterministic. Reserved tokens are always included.
    """
    word_freq = Counter()
    for line in corpus:
        for word in split_words(line):
            word_freq[word] += 1
    if not word_freq:
        raise ConfigError("cannot build a vocabulary from an empty corpus")

    words = {w: _word_symbols(w) for w in word_freq}
    alphabet = sorted({sym for syms in words.values() for sym in syms})
    minimum = len(RESERVED) + len(alphabet)
    if target_size < minimum:
        raise ConfigError(
            f"target_size {target_size} below reserved+alphabet minimum {minimum}")

    vocab = list(RESERVED) + alphabet
    seen = set(vocab)
    while len(vocab) < target_size:
        pairs = Counter()
        for word, syms in words.items():
            f = word_freq[word]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += f
        if not pairs:
            break
        (a, b), freq = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < 2:
            break
        merged = a + b[len(CONTINUATION):]
        for word, syms in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[word] = out
        if merged not in seen:
            vocab.append(merged)
            seen.add(merged)
    return Vocab(vocab)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match segmentation; the whole word falls back to [UNK]."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Tokenize one surface form into a fixed-length sequence.

    The total length including [CLS] and [SEP] is exactly ``max_len``;
    content beyond that is truncated and the tail is [PAD] with a false mask.
    """
    if max_len < 3:
        raise ContractError(f"max_len must be >= 3, got {max_len}")
    pieces = []
    for word in split_words(text):
        pieces.extend(wordpiece(word, vocab))
    pieces = pieces[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.id_of(p) for p in pieces] + [vocab.sep_id]
    mask = [True] * len(ids)
    pad = max_len - len(ids)
    ids.extend([vocab.pad_id] * pad)
    mask.extend([False] * pad)
    return TokenSequence(ids=tuple(ids), attention_mask=tuple(mask))


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Invert tokenization: drop specials/pads, merge continuations, join words."""
    words = []
    specials = {vocab.pad_id, vocab.cls_id, vocab.sep_id}
    for idx in ids:
        if idx in specials:
            continue
        tok = vocab.token_of(idx)
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def tokenize_corpus(texts: list[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokenize many texts into (ids, mask) arrays of shape (N, max_len)."""
    ids = np.zeros((len(texts), max_len), dtype=np.int64)
    mask = np.zeros((len(texts), max_len), dtype=bool)
    for i, text in enumerate(texts):
        seq = tokenize(text, vocab, max_len)
        ids[i] = seq.ids
        mask[i] = seq.attention_mask
    return ids, mask
