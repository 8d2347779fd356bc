"""Registered synthetic translation problems.

Each problem writes ``<data_dir>/<name>/{vocab.txt, merges.json, train.rec, dev.rec}``.
Generation is a pure function of (problem, seed, data hparams), so two runs
with the same arguments produce byte-identical files.
"""
from __future__ import annotations

import itertools
import string
from pathlib import Path
from typing import Iterator

import numpy as np

from ..hparams import HParams, get_hparams
from ..registry import problems
from .bpe import SubwordVocab, learn_bpe
from .records import read_records, write_records

TRAIN, DEV = "train", "dev"


class Problem:
    """Dataset definition: text generation, vocabulary, encoded records."""

    name = "problem"

    # -- to override ----------------------------------------------------------

    def generate_pairs(self, rng: np.random.Generator, count: int, hp: HParams) -> list[tuple[str, str]]:
        raise NotImplementedError

    # -- shared machinery -----------------------------------------------------

    def problem_dir(self, data_dir: Path | str) -> Path:
        return Path(data_dir) / self.name

    def generate(self, data_dir: Path | str, seed: int, hp: HParams | None = None) -> dict[str, Path]:
        hp = hp or get_hparams("transformer_tiny")
        out = self.problem_dir(data_dir)
        out.mkdir(parents=True, exist_ok=True)
        train_ss, dev_ss = np.random.SeedSequence([seed, _stable_id(self.name)]).spawn(2)
        train = self.generate_pairs(np.random.default_rng(train_ss), hp.num_train_examples, hp)
        dev = self.generate_pairs(np.random.default_rng(dev_ss), hp.num_dev_examples, hp)
        vocab = learn_bpe([s for pair in train for s in pair], hp.num_merges)
        vocab.save(out / "vocab.txt")
        paths = {"vocab": out / "vocab.txt"}
        for split, pairs in ((TRAIN, train), (DEV, dev)):
            path = out / f"{split}.rec"
            write_records(path, ((vocab.encode(s), vocab.encode(t)) for s, t in pairs))
            paths[split] = path
        return paths

    def vocabulary(self, data_dir: Path | str) -> SubwordVocab:
        path = self.problem_dir(data_dir) / "vocab.txt"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run datagen for {self.name} first")
        return SubwordVocab.load(path)

    def feature_info(self, data_dir: Path | str) -> dict[str, dict]:
        size = self.vocabulary(data_dir).size
        return {"inputs": {"type": "symbol", "vocab_size": size},
                "targets": {"type": "symbol", "vocab_size": size}}

    def dataset(self, data_dir: Path | str, split: str) -> Iterator[tuple[list[int], list[int]]]:
        path = self.problem_dir(data_dir) / f"{split}.rec"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run datagen for {self.name} first")
        return read_records(path)

    def input_pipeline(self, data_dir, mode: str, hp: HParams, seed: int = 0):
        from .pipeline import input_pipeline
        return input_pipeline(self, data_dir, mode, hp, seed)


def _stable_id(name: str) -> int:
    return int.from_bytes(name.encode("utf-8"), "little") % (2 ** 63)


def _letters(n: int) -> list[str]:
    if not 1 <= n <= 26:
        raise ValueError("lexicon_size must be in [1, 26] for letter problems")
    return list(string.ascii_lowercase[:n])


def _random_sentence(rng: np.random.Generator, lexicon: list[str], hp: HParams) -> list[str]:
    n = int(rng.integers(hp.min_seq_len, hp.max_seq_len + 1))
    return [lexicon[i] for i in rng.integers(0, len(lexicon), size=n)]


@problems.register("translate_copy")
class CopyProblem(Problem):
    """Target equals source: sequences of single-letter words."""

    name = "translate_copy"

    def generate_pairs(self, rng, count, hp):
        lex = _letters(hp.lexicon_size)
        out = []
        for _ in range(count):
            words = _random_sentence(rng, lex, hp)
            out.append((" ".join(words), " ".join(words)))
        return out


@problems.register("translate_reverse")
class ReverseProblem(Problem):
    """Target is the source with its word order reversed."""

    name = "translate_reverse"

    def generate_pairs(self, rng, count, hp):
        lex = _letters(hp.lexicon_size)
        out = []
        for _ in range(count):
            words = _random_sentence(rng, lex, hp)
            out.append((" ".join(words), " ".join(reversed(words))))
        return out


def _pseudo_words(consonants: str, vowels: str, count: int, seed: int) -> list[str]:
    syllables = [c + v for c, v in itertools.product(consonants, vowels)]
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set()
    while len(words) < count:
        k = int(rng.integers(1, 4))
        w = "".join(syllables[i] for i in rng.integers(0, len(syllables), size=k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class ToyGrammar:
    """A 64-word source language and its rewrite-based translation.

    Source sentences are ``DET [ADJ] NOUN VERB DET [ADJ] NOUN``.  Translation
    maps every word through a fixed bilingual dictionary, puts adjectives after
    their noun and moves the verb to the end of the clause.
    """

    N_DET, N_NOUN, N_ADJ, N_VERB = 8, 24, 16, 16

    def __init__(self):
        sizes = (self.N_DET, self.N_NOUN, self.N_ADJ, self.N_VERB)
        src = _pseudo_words("bdfgklmnprst", "aeiou", sum(sizes), seed=11)
        tgt = _pseudo_words("chjqvwxyz", "aiouy", sum(sizes), seed=23)
        bounds = np.cumsum((0,) + sizes)
        self.source = {cat: src[a:b] for cat, a, b in zip(("det", "noun", "adj", "verb"), bounds, bounds[1:])}
        self.dictionary = dict(zip(src, tgt))
        self.category = {w: cat for cat, ws in self.source.items() for w in ws}

    @property
    def lexicon(self) -> list[str]:
        return [w for ws in self.source.values() for w in ws]

    def sample(self, rng: np.random.Generator) -> list[str]:
        def pick(cat):
            ws = self.source[cat]
            return ws[int(rng.integers(0, len(ws)))]

        def noun_phrase():
            np_ = [pick("det")]
            if rng.random() < 0.5:
                np_.append(pick("adj"))
            np_.append(pick("noun"))
            return np_

        return noun_phrase() + [pick("verb")] + noun_phrase()

    def translate(self, words: list[str]) -> list[str]:
        # adjective-noun swap inside noun phrases
        out = list(words)
        i = 0
        while i < len(out) - 1:
            if self.category[out[i]] == "adj" and self.category[out[i + 1]] == "noun":
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
            else:
                i += 1
        # subject verb object -> subject object verb
        verbs = [j for j, w in enumerate(out) if self.category[w] == "verb"]
        for j in verbs:
            out.append(out.pop(j))
        return [self.dictionary[w] for w in out]


@problems.register("translate_toy_grammar")
class ToyGrammarProblem(Problem):
    name = "translate_toy_grammar"

    def __init__(self):
        self.grammar = ToyGrammar()

    def generate_pairs(self, rng, count, hp):
        out = []
        for _ in range(count):
            words = self.grammar.sample(rng)
            out.append((" ".join(words), " ".join(self.grammar.translate(words))))
        return out


def get_problem(name: str) -> Problem:
    return problems.get(name)()


def generate_problem(name: str, seed: int, out_dir: Path | str, hp: HParams | None = None) -> dict[str, Path]:
    return get_problem(name).generate(out_dir, seed, hp)
