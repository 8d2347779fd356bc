"""Bucketed pad-and-batch input pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..hparams import HParams
from .bpe import EOS_ID, PAD_ID

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    src: np.ndarray  # [batch, length] int64
    tgt: np.ndarray
    boundary: int

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD_ID

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt != PAD_ID

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def padding_fraction(self) -> float:
        real = self.src_mask.sum() + self.tgt_mask.sum()
        return 1.0 - real / (self.src.size + self.tgt.size)


def bucket_boundaries(min_length: int, max_length: int) -> list[int]:
    """Powers-of-two multiples of ``min_length`` until ``max_length`` is covered."""
    bounds = [min_length]
    while bounds[-1] < max_length:
        bounds.append(bounds[-1] * 2)
    return bounds


def pad_batch(examples: list[tuple[list[int], list[int]]], length: int) -> tuple[np.ndarray, np.ndarray]:
    src = np.full((len(examples), length), PAD_ID, dtype=np.int64)
    tgt = np.full((len(examples), length), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(examples):
        src[i, : len(s)] = s
        tgt[i, : len(t)] = t
    return src, tgt


class InputPipeline:
    """Groups examples into length buckets and emits padded batches.

    ``train`` mode loops forever, reshuffling every epoch with ``seed``;
    ``eval`` mode walks the file once in order and flushes partial buckets.
    """

    def __init__(self, examples, mode: str, hp: HParams, seed: int = 0):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.seed = seed
        self.batch_size = hp.batch_size
        self.boundaries = bucket_boundaries(hp.min_length, hp.max_length)
        self.dropped = 0
        kept = []
        for src, tgt in examples:
            s, t = list(src) + [EOS_ID], list(tgt) + [EOS_ID]
            if max(len(s), len(t)) > hp.max_length:
                self.dropped += 1
                continue
            kept.append((s, t))
        if self.dropped:
            log.warning("dropped %d examples longer than max_length=%d", self.dropped, hp.max_length)
        self.examples = kept

    def bucket_of(self, example) -> int:
        n = max(len(example[0]), len(example[1]))
        for b in self.boundaries:
            if n <= b:
                return b
        raise AssertionError("example exceeds max boundary")

    def rows_for(self, boundary: int) -> int:
        return max(1, self.batch_size // boundary)

    def _make(self, items, boundary) -> Batch:
        src, tgt = pad_batch(items, boundary)
        return Batch(src, tgt, boundary)

    def __iter__(self) -> Iterator[Batch]:
        if not self.examples:
            return
        buckets: dict[int, list] = {b: [] for b in self.boundaries}
        if self.mode == "eval":
            for ex in self.examples:
                b = self.bucket_of(ex)
                buckets[b].append(ex)
                if len(buckets[b]) == self.rows_for(b):
                    yield self._make(buckets[b], b)
                    buckets[b] = []
            for b in self.boundaries:
                if buckets[b]:
                    yield self._make(buckets[b], b)
            return
        rng = np.random.default_rng(self.seed)
        while True:
            for idx in rng.permutation(len(self.examples)):
                ex = self.examples[idx]
                b = self.bucket_of(ex)
                buckets[b].append(ex)
                if len(buckets[b]) == self.rows_for(b):
                    yield self._make(buckets[b], b)
                    buckets[b] = []


def input_pipeline(problem, data_dir, mode: str, hp: HParams, seed: int = 0) -> InputPipeline:
    split = "train" if mode == "train" else "dev"
    return InputPipeline(list(problem.dataset(data_dir, split)), mode, hp, seed)
