"""Byte-pair subword vocabulary.

Words are split on single spaces and each word gets an end-of-word symbol
before merging, so decoding can put the spaces back.  Merges are learned
greedily by pair frequency (ties go to the lexicographically smallest pair)
and applied at encode time in the order they were learned.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
RESERVED = (PAD, EOS, UNK)
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2
# private-use code point; cannot collide with ordinary text
END_OF_WORD = "\ue000"

Pair = tuple[str, str]


def _words(text: str) -> list[str]:
    return text.split(" ")


def _merge_word(symbols: list[str], pair: Pair) -> list[str]:
    a, b = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class SubwordVocab:
    merges: list[Pair]
    tokens: list[str]  # id -> token string
    token_to_id: dict[str, int] = field(init=False)
    _ranks: dict[Pair, int] = field(init=False, repr=False)
    _cache: dict[str, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError(f"first three tokens must be {RESERVED}")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ranks = {p: r for r, p in enumerate(self.merges)}
        self._cache = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def _segment(self, word: str) -> list[int]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = [c if c in self.token_to_id else UNK for c in word] + [END_OF_WORD]
        last = -1
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = self._ranks.get(pair)
                if r is not None and r > last and (best is None or r < best):
                    best = r
            if best is None:
                break
            symbols = _merge_word(symbols, self.merges[best])
            last = best
        ids = [self.token_to_id[s] for s in symbols]
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        ids: list[int] = []
        for w in _words(text):
            ids.extend(self._segment(w))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, EOS_ID):
                continue
            parts.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        s = "".join(parts)
        if s.endswith(END_OF_WORD):
            s = s[:-1]
        return s.replace(END_OF_WORD, " ")

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        """Human-readable token strings (end-of-word shown as ``</w>``)."""
        return [self.tokens[int(i)].replace(END_OF_WORD, "</w>") for i in ids]

    # -- persistence --------------------------------------------------------

    def save(self, vocab_path: Path | str, merges_path: Path | str | None = None) -> None:
        vocab_path = Path(vocab_path)
        with open(vocab_path, "w", encoding="utf-8", newline="\n") as f:
            for t in self.tokens:
                f.write(t + "\n")
        merges_path = Path(merges_path) if merges_path else vocab_path.with_name("merges.json")
        with open(merges_path, "w", encoding="utf-8") as f:
            json.dump([list(p) for p in self.merges], f, ensure_ascii=False)

    @classmethod
    def load(cls, vocab_path: Path | str, merges_path: Path | str | None = None) -> "SubwordVocab":
        vocab_path = Path(vocab_path)
        with open(vocab_path, encoding="utf-8", newline="\n") as f:
            tokens = f.read().split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        merges_path = Path(merges_path) if merges_path else vocab_path.with_name("merges.json")
        merges: list[Pair] = []
        if merges_path.exists():
            with open(merges_path, encoding="utf-8") as f:
                merges = [tuple(p) for p in json.load(f)]
        return cls(merges, tokens)


def learn_bpe(corpus: Sequence[str], num_merges: int) -> SubwordVocab:
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    lines = [s for s in corpus if s]
    if not lines:
        raise ValueError("cannot learn a vocabulary from an empty corpus")
    for s in lines:
        if "\n" in s or END_OF_WORD in s:
            raise ValueError("corpus lines may not contain newlines or the end-of-word symbol")

    word_freq = Counter(w for s in lines for w in _words(s))
    segs = {w: list(w) + [END_OF_WORD] for w in word_freq}
    chars = sorted({c for w in word_freq for c in w})

    merges: list[Pair] = []
    for _ in range(num_merges):
        counts: Counter = Counter()
        for w, sym in segs.items():
            f = word_freq[w]
            for pair in zip(sym, sym[1:]):
                counts[pair] += f
        if not counts:
            break
        top = max(counts.values())
        best = min(p for p, c in counts.items() if c == top)
        merges.append(best)
        for w, sym in segs.items():
            if len(sym) > 1:
                segs[w] = _merge_word(sym, best)

    tokens = list(RESERVED) + [END_OF_WORD] + chars
    seen = set(tokens)
    for a, b in merges:
        if a + b not in seen:
            seen.add(a + b)
            tokens.append(a + b)
    return SubwordVocab(merges, tokens)
