"""Greedy and beam-search decoding, attention dumps and corpus BLEU.

A *scorer* maps a source sentence and a batch of target prefixes to
next-token log-probabilities ``[len(prefixes), vocab]``.  The decoders only
talk to scorers, so tests can plug in synthetic distributions.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data.bpe import SubwordVocab
from .model import EOS_ID, AttentionRecord, Transformer, as_constants, shift_right


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class DecodeParams:
    beam_size: int = 4
    alpha: float = 0.6
    extra_length: int = 50
    dump_attention: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.extra_length < 0:
            raise ValueError("extra_length must be >= 0")


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    sum_logprob: float
    score: float

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID


class Scorer(Protocol):
    def log_probs(self, src: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


class TransformerScorer:
    """Binds a model to fixed parameters; caches the encoder output per source."""

    def __init__(self, model: Transformer, params: Mapping[str, np.ndarray] | Checkpoint):
        if isinstance(params, Checkpoint):
            params = params.params
        expected = model.param_shapes()
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))[:3]
            extra = sorted(set(params) - set(expected))[:3]
            raise IncompatibleCheckpoint(f"parameter names differ (missing {missing}, unexpected {extra})")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise IncompatibleCheckpoint(f"{k}: checkpoint shape {params[k].shape} != model {shape}")
        self.model = model
        self.params = as_constants(params)
        self._cache_key: tuple | None = None
        self._enc: ad.Tensor | None = None

    @staticmethod
    def source_row(src: Sequence[int]) -> np.ndarray:
        return np.asarray(list(src) + [EOS_ID], dtype=np.int64)[None, :]

    def _encode(self, src: Sequence[int]):
        key = tuple(src)
        if key != self._cache_key:
            self._enc = self.model.encode(self.params, self.source_row(src))
            self._cache_key = key
        return self._enc

    def log_probs(self, src, prefixes):
        enc = self._encode(src)
        n = len(prefixes)
        t = len(prefixes[0]) + 1
        dec_in = np.full((n, t), EOS_ID, dtype=np.int64)
        for i, p in enumerate(prefixes):
            if len(p) != t - 1:
                raise ValueError("prefixes in one call must share a length")
            dec_in[i, 1:] = p
        src_row = np.repeat(self.source_row(src), n, axis=0)
        enc_rep = ad.Tensor._wrap(np.repeat(enc.value, n, axis=0))
        body = self.model.decode_body(self.params, dec_in, enc_rep, src_row)
        logits = self.model.top(self.params, body).value[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def attention(self, src: Sequence[int], tokens: Sequence[int]) -> list[AttentionRecord]:
        record: list[AttentionRecord] = []
        self.model.logits(self.params, self.source_row(src),
                          np.asarray([list(tokens)], dtype=np.int64), record=record)
        return record


def length_penalty(length: int, alpha: float) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    return ((5.0 + length) / 6.0) ** alpha


def max_output_length(src: Sequence[int], params: DecodeParams) -> int:
    return len(src) + params.extra_length


def greedy_decode(scorer: Scorer, src: Sequence[int], params: DecodeParams = DecodeParams()) -> list[int]:
    """Arg-max decoding; ties go to the lowest token id."""
    out: list[int] = []
    for _ in range(max_output_length(src, params)):
        lp = scorer.log_probs(src, [out])[0]
        tok = int(np.argmax(lp))
        out.append(tok)
        if tok == EOS_ID:
            break
    return out


def beam_decode(scorer: Scorer, src: Sequence[int], params: DecodeParams = DecodeParams(),
                early_stop: bool = True) -> list[BeamHypothesis]:
    """Length-normalised beam search.

    Each step keeps the ``beam_size`` best expansions overall; expansions
    ending in EOS (or reaching the length cap) move to the finished pool,
    which keeps its ``beam_size`` best by score.  Search stops once no live
    hypothesis can beat the worst kept finished one.
    """
    k, alpha = params.beam_size, params.alpha
    cap = max_output_length(src, params)
    if cap == 0:
        return [BeamHypothesis((), 0.0, 0.0)]
    best_lp = length_penalty(cap, alpha)
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[BeamHypothesis] = []

    def rank(h: BeamHypothesis):
        return (-h.score, h.tokens)

    for t in range(1, cap + 1):
        lp = scorer.log_probs(src, [toks for toks, _ in live])
        sums = np.array([s for _, s in live])[:, None] + lp
        flat = sums.reshape(-1)
        # stable sort on -score keeps (parent rank, token id) order among ties
        order = np.argsort(-flat, kind="stable")[:k]
        vocab = lp.shape[1]
        new_live = []
        pen = length_penalty(t, alpha)
        for j in order:
            parent, tok = divmod(int(j), vocab)
            toks = live[parent][0] + (tok,)
            s = float(flat[j])
            if tok == EOS_ID or t == cap:
                finished.append(BeamHypothesis(toks, s, s / pen))
            else:
                new_live.append((toks, s))
        finished = sorted(finished, key=rank)[:k]
        live = new_live
        if not live:
            break
        if early_stop and len(finished) == k:
            bound = max(s for _, s in live) / best_lp
            if bound < finished[-1].score:
                break
    return sorted(finished, key=rank)


def decode_sentence(scorer: Scorer, src: Sequence[int], params: DecodeParams) -> list[int]:
    if params.beam_size == 1:
        return greedy_decode(scorer, src, params)
    return list(beam_decode(scorer, src, params)[0].tokens)


def strip_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == EOS_ID else tokens


def attention_dump(records: Sequence[AttentionRecord], vocab: SubwordVocab, src: Sequence[int],
                   tokens: Sequence[int]) -> list[dict]:
    src_toks = vocab.decode_tokens(list(src) + [EOS_ID])
    dec_toks = vocab.decode_tokens(shift_right(np.asarray(tokens)).tolist())
    out = []
    for r in records:
        queries = src_toks if r.kind == "self" else dec_toks
        keys = dec_toks if r.kind == "causal-self" else src_toks
        out.append({"layer": r.layer, "head": r.head, "kind": r.kind,
                    "query_tokens": queries, "key_tokens": keys,
                    "weights": [float(x) for x in r.weights.reshape(-1)]})
    return out


def decode_file(scorer: TransformerScorer, vocab: SubwordVocab, in_path: Path | str,
                out_path: Path | str, params: DecodeParams = DecodeParams(), workers: int = 1) -> int:
    """Translate ``in_path`` line by line into ``out_path``; returns the line count."""
    with open(in_path, encoding="utf-8") as f:
        lines = f.read().splitlines()

    def work(item):
        idx, line = item
        src = vocab.encode(line)
        # scorers cache encoder state, so every worker needs its own
        sc = TransformerScorer(scorer.model, {k: v.value for k, v in scorer.params.items()}) \
            if workers > 1 else scorer
        tokens = decode_sentence(sc, src, params)
        if params.dump_attention:
            recs = sc.attention(src, tokens)
            dump = attention_dump(recs, vocab, src, tokens)
            Path(f"{out_path}.attn.{idx}.json").write_text(json.dumps(dump))
        return vocab.decode(strip_eos(tokens))

    items = list(enumerate(lines))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outputs = list(pool.map(work, items))
    else:
        outputs = [work(it) for it in items]
    with open(out_path, "w", encoding="utf-8") as f:
        for o in outputs:
            f.write(o + "\n")
    return len(outputs)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_order: int = 4) -> float:
    """Unsmoothed corpus BLEU (uniform weights, brevity penalty), in [0, 100]."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            totals[n - 1] += max(0, len(cand) - n + 1)
    if min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_prec)
