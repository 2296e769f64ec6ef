"""Synthetic key-value recall language with labelled token difficulty.

A document is a stream of units:

* filler: one token from a noisy bigram chain (easy to predict),
* binding ``K_i v``: declares that key ``i`` currently holds value ``v``,
* query ``Q_i v``: asks for the value of key ``i``; ``v`` is the designated
  hard token, answerable only by finding the latest binding of ``i``.

Every emitted token carries a label for evaluation slicing. The label is
attached to the token as a *target*: ``HARD`` marks a query answer, ``EASY``
a filler that follows a filler. Each document opens with a preamble that
binds every key, so every query is answerable within its document.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cyb.pipeline import pack_corpus

OTHER, EASY, HARD = 0, 1, 2


@dataclass
class SynthTaskSpec:
    n_filler: int = 16
    n_keys: int = 8
    n_values: int = 16
    bigram_noise: float = 0.1
    hard_fraction: float = 0.15  # expected fraction of body tokens that are query answers
    binding_rate: float = 0.15  # probability that a non-query unit is a binding
    recall_window: int = 12  # queries prefer keys bound within this many units
    units_per_doc: int = 64
    n_docs: int = 2000
    seed: int = 0  # document sampling
    language_seed: int = 0  # the filler bigram; shared by train and eval corpora
    separator: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hard_fraction < 0.5:
            raise ValueError("hard_fraction must lie in [0, 0.5)")
        if not 0.0 <= self.bigram_noise <= 1.0:
            raise ValueError("bigram_noise must lie in [0, 1]")
        if not 0.0 <= self.binding_rate < 1.0:
            raise ValueError("binding_rate must lie in [0, 1)")
        if self.n_keys < 1 or self.n_values < 1 or self.n_filler < 1:
            raise ValueError("token classes must be non-empty")

    # id layout: separator, fillers, keys, query markers, values
    @property
    def filler_base(self) -> int:
        return 1

    @property
    def key_base(self) -> int:
        return 1 + self.n_filler

    @property
    def query_base(self) -> int:
        return self.key_base + self.n_keys

    @property
    def value_base(self) -> int:
        return self.query_base + self.n_keys

    @property
    def n_content(self) -> int:
        return self.value_base + self.n_values

    @property
    def preamble_len(self) -> int:
        return 2 * self.n_keys

    @property
    def query_unit_prob(self) -> float:
        """Per-unit query probability that yields ``hard_fraction`` hard body tokens.

        Queries and bindings are two tokens, fillers one, so the hard rate is
        ``q / (1 + q + (1 - q) b)``; this inverts it.
        """
        h, b = self.hard_fraction, self.binding_rate
        return h * (1 + b) / (1 - h * (1 - b))

    def successor(self) -> np.ndarray:
        """The deterministic part of the filler bigram: a fixed permutation."""
        rng = np.random.default_rng(10_007 + self.language_seed)
        return rng.permutation(self.n_filler)

    def bigram_entropy(self) -> float:
        """Entropy in nats of one filler-to-filler transition."""
        n, eps = self.n_filler, self.bigram_noise
        top = 1.0 - eps + eps / n
        rest = eps / n
        h = -top * np.log(top)
        if rest > 0:
            h -= (n - 1) * rest * np.log(rest)
        return float(h)


@dataclass
class SynthCorpus:
    documents: list[np.ndarray]
    labels: list[np.ndarray]
    spec: SynthTaskSpec

    def packed(self, raw_len: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Pack tokens and labels identically (separators are labelled OTHER)."""
        toks = pack_corpus(self.documents, raw_len, self.spec.separator)
        labs = pack_corpus(self.labels, raw_len, OTHER)
        return toks, labs


def _document(spec: SynthTaskSpec, rng: np.random.Generator, succ: np.ndarray):
    toks, labs = [], []
    last_bound = {}
    for k in rng.permutation(spec.n_keys):
        v = int(rng.integers(spec.n_values))
        toks += [spec.key_base + int(k), spec.value_base + v]
        labs += [OTHER, OTHER]
        last_bound[int(k)] = (v, -1)
    filler = int(rng.integers(spec.n_filler))
    prev_filler = False
    p_query = spec.query_unit_prob
    for unit in range(spec.units_per_doc):
        if rng.random() < p_query:
            recent = [k for k, (_, at) in last_bound.items() if unit - at <= spec.recall_window]
            k = int(rng.choice(recent if recent else list(last_bound)))
            toks += [spec.query_base + k, spec.value_base + last_bound[k][0]]
            labs += [OTHER, HARD]
            prev_filler = False
        elif rng.random() < spec.binding_rate:
            k = int(rng.integers(spec.n_keys))
            v = int(rng.integers(spec.n_values))
            last_bound[k] = (v, unit)
            toks += [spec.key_base + k, spec.value_base + v]
            labs += [OTHER, OTHER]
            prev_filler = False
        else:
            if rng.random() < spec.bigram_noise:
                filler = int(rng.integers(spec.n_filler))
            else:
                filler = int(succ[filler])
            toks.append(spec.filler_base + filler)
            labs.append(EASY if prev_filler else OTHER)
            prev_filler = True
    return np.array(toks, dtype=np.int64), np.array(labs, dtype=np.int64)


def generate_synth_corpus(spec: SynthTaskSpec) -> SynthCorpus:
    """Deterministic in ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    succ = spec.successor()
    docs, labels = [], []
    for _ in range(spec.n_docs):
        d, l = _document(spec, rng, succ)
        docs.append(d)
        labels.append(l)
    return SynthCorpus(docs, labels, spec)
