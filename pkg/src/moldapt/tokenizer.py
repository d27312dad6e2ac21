"""WordPiece vocabulary training and SMILES encoding/decoding.

SMILES strings are treated as single words (no whitespace pre-splitting);
interior characters carry the ``##`` continuation prefix. Every character of
the training corpus is guaranteed a token in both bare and continuation
form, so in-alphabet strings never produce UNK.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import EmptyCorpus

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
CONT = "##"


@dataclass
class Vocabulary:
    tokens: list[str]                     # includes specials at ids 0..4
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens=tokens)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple([word[0]] + [CONT + c for c in word[1:]])


def train_wordpiece(corpus: Iterable[str], vocab_size: int,
                    min_frequency: int = 2) -> Vocabulary:
    """Standard WordPiece induction.

    Starting from the character alphabet, repeatedly merge the adjacent pair
    maximizing ``freq(pair) / (freq(left) * freq(right))`` until the vocab is
    full or no pair reaches ``min_frequency``. Ties break on the
    lexicographically smallest pair, so training is deterministic.
    """
    word_freq: dict[tuple[str, ...], int] = {}
    chars: set[str] = set()
    for line in corpus:
        line = line.strip()
        if not line:
            continue
        sym = _word_symbols(line)
        word_freq[sym] = word_freq.get(sym, 0) + 1
        chars.update(line)
    if not word_freq:
        raise EmptyCorpus("no non-empty lines in corpus")

    alphabet = sorted(chars) + [CONT + c for c in sorted(chars)]
    tokens = list(SPECIALS) + alphabet
    vocab = set(tokens)

    while len(tokens) < vocab_size:
        pair_freq: dict[tuple[str, str], int] = {}
        sym_freq: dict[str, int] = {}
        for word, freq in word_freq.items():
            for s in word:
                sym_freq[s] = sym_freq.get(s, 0) + freq
            for a, b in zip(word, word[1:]):
                pair_freq[(a, b)] = pair_freq.get((a, b), 0) + freq
        best, best_score = None, None
        for pair, freq in pair_freq.items():
            if freq < min_frequency:
                continue
            merged = pair[0] + pair[1][len(CONT):]
            if merged in vocab:
                continue
            score = freq / (sym_freq[pair[0]] * sym_freq[pair[1]])
            if best_score is None or score > best_score \
                    or (score == best_score and pair < best):
                best, best_score = pair, score
        if best is None:
            break
        merged = best[0] + best[1][len(CONT):]
        tokens.append(merged)
        vocab.add(merged)
        new_word_freq: dict[tuple[str, ...], int] = {}
        for word, freq in word_freq.items():
            out: list[str] = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            key = tuple(out)
            new_word_freq[key] = new_word_freq.get(key, 0) + freq
        word_freq = new_word_freq

    return Vocabulary(tokens=tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first segmentation; unknown characters map to
    [UNK] one at a time and segmentation continues."""
    out: list[str] = []
    i = 0
    while i < len(text):
        prefix = "" if i == 0 else CONT
        match = None
        for j in range(len(text), i, -1):
            cand = prefix + text[i:j]
            if cand in vocab.token_to_id:
                match = (cand, j)
                break
        if match is None:
            out.append(SPECIALS[UNK])
            i += 1
        else:
            out.append(match[0])
            i = match[1]
    return out


def encode(text: str, vocab: Vocabulary, max_len: int = 128) -> tuple[list[int], int]:
    """Token-id row ``[CLS] tokens [SEP] [PAD]...`` and its content length
    (CLS and SEP included)."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    pieces = tokenize(text, vocab)[:max_len - 2]
    ids = [CLS] + [vocab.token_to_id.get(t, UNK) for t in pieces] + [SEP]
    length = len(ids)
    ids += [PAD] * (max_len - length)
    return ids, length


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    parts = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok in SPECIALS:
            continue
        parts.append(tok[len(CONT):] if tok.startswith(CONT) else tok)
    return "".join(parts)


@dataclass
class TokenizedBatch:
    ids: np.ndarray            # (batch, max_len) int64
    attention_mask: np.ndarray  # (batch, max_len) 0/1
    lengths: np.ndarray        # (batch,) content lengths incl. CLS/SEP


def encode_batch(texts: list[str], vocab: Vocabulary,
                 max_len: int = 128) -> TokenizedBatch:
    rows, lengths = [], []
    for t in texts:
        ids, length = encode(t, vocab, max_len)
        rows.append(ids)
        lengths.append(length)
    ids = np.array(rows, dtype=np.int64)
    lengths = np.array(lengths, dtype=np.int64)
    mask = (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.int64)
    return TokenizedBatch(ids=ids, attention_mask=mask, lengths=lengths)
