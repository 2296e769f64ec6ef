import numpy as np
import pytest

from cyb.synth import EASY, HARD, OTHER, SynthTaskSpec, generate_synth_corpus


def rate_sigma(spec: SynthTaskSpec, n_units: int) -> float:
    """Delta-method standard error of the hard-token ratio over ``n_units`` i.i.d. units."""
    q, b, h = spec.query_unit_prob, spec.binding_rate, spec.hard_fraction
    outcomes = [(q, 1, 2), ((1 - q) * b, 0, 2), ((1 - q) * (1 - b), 0, 1)]  # (prob, hard, tokens)
    mean_y = sum(p * y for p, _, y in outcomes)
    var = sum(p * (x - h * y) ** 2 for p, x, y in outcomes)
    return float(np.sqrt(var / (n_units * mean_y**2)))


def test_deterministic():
    spec = SynthTaskSpec(n_docs=20, seed=5)
    a, b = generate_synth_corpus(spec), generate_synth_corpus(spec)
    for x, y in zip(a.documents + a.labels, b.documents + b.labels):
        np.testing.assert_array_equal(x, y)


def test_seed_changes_documents_not_language():
    a = SynthTaskSpec(seed=1)
    b = SynthTaskSpec(seed=2)
    np.testing.assert_array_equal(a.successor(), b.successor())
    assert not np.array_equal(generate_synth_corpus(SynthTaskSpec(n_docs=3, seed=1)).documents[0],
                              generate_synth_corpus(SynthTaskSpec(n_docs=3, seed=2)).documents[0])


def test_query_prob_inverts_rate():
    spec = SynthTaskSpec(hard_fraction=0.2, binding_rate=0.3)
    q, b = spec.query_unit_prob, spec.binding_rate
    assert q / (1 + q + (1 - q) * b) == pytest.approx(0.2, abs=1e-15)


def test_answers_are_recallable():
    spec = SynthTaskSpec(n_docs=30, seed=9)
    corpus = generate_synth_corpus(spec)
    for doc, lab in zip(corpus.documents, corpus.labels):
        bound = {}
        for i, tok in enumerate(doc[:-1]):
            if spec.key_base <= tok < spec.query_base:
                bound[tok - spec.key_base] = doc[i + 1]
            if spec.query_base <= tok < spec.value_base:
                assert lab[i + 1] == HARD
                assert doc[i + 1] == bound[tok - spec.query_base]
        assert np.all(lab[:spec.preamble_len] == OTHER)


def test_easy_targets_follow_fillers():
    spec = SynthTaskSpec(n_docs=30)
    corpus = generate_synth_corpus(spec)
    for doc, lab in zip(corpus.documents, corpus.labels):
        filler = (doc >= spec.filler_base) & (doc < spec.key_base)
        easy = np.flatnonzero(lab == EASY)
        assert np.all(filler[easy]) and np.all(filler[easy - 1])


def test_hard_rate_within_three_sigma():
    spec = SynthTaskSpec(hard_fraction=0.1, n_docs=12_500, seed=3)
    corpus = generate_synth_corpus(spec)
    body = sum(len(d) - spec.preamble_len for d in corpus.documents)
    hard = sum(int(np.sum(lab == HARD)) for lab in corpus.labels)
    assert body >= 10**6
    rate = hard / body
    assert abs(rate - 0.1) <= 3 * rate_sigma(spec, spec.units_per_doc * spec.n_docs)


def test_packing_keeps_labels_aligned():
    corpus = generate_synth_corpus(SynthTaskSpec(n_docs=10))
    toks, labs = corpus.packed(32)
    assert len(toks) == len(labs)
    stream = np.concatenate(toks)
    for tok, lab in zip(stream, np.concatenate(labs)):
        if lab == HARD:
            assert tok >= corpus.spec.value_base


def test_bigram_entropy_closed_form():
    spec = SynthTaskSpec(n_filler=4, bigram_noise=0.2)
    top, rest = 0.8 + 0.05, 0.05
    assert spec.bigram_entropy() == pytest.approx(-top * np.log(top) - 3 * rest * np.log(rest), abs=1e-15)
    assert SynthTaskSpec(bigram_noise=0.0).bigram_entropy() == 0.0


@pytest.mark.parametrize("kwargs", [dict(hard_fraction=0.6), dict(bigram_noise=1.5), dict(n_keys=0),
                                    dict(binding_rate=1.0)])
def test_validation(kwargs):
    with pytest.raises(ValueError):
        SynthTaskSpec(**kwargs)
