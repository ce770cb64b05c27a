"""Grammar, lexicon, silence insertion, corpus files."""

import numpy as np
import pytest

from dgupr import text
from dgupr.rngs import derive_rng


def grammar(seed=0):
    return text.build_grammar(derive_rng(seed, "grammar"), 8, 20, (2, 4), (2, 5))


def test_silence_insert_p0_is_concatenation():
    words = [[1, 2], [3], [4, 5]]
    out = text.silence_insert(words, 0.0, np.random.default_rng(0))
    assert out == [1, 2, 3, 4, 5]


def test_silence_insert_p1_all_boundaries():
    words = [[1, 2], [3], [4, 5]]
    out = text.silence_insert(words, 1.0, np.random.default_rng(0))
    assert out == [1, 2, 0, 3, 0, 4, 5]
    assert out.count(text.SIL) == 2


def test_silence_insert_binomial_mean():
    rng = np.random.default_rng(1)
    words = [[1]] * 5  # 4 boundaries
    n = 10000
    counts = [text.silence_insert(words, 0.25, rng).count(text.SIL) for _ in range(n)]
    mean = np.mean(counts)
    sigma = np.sqrt(4 * 0.25 * 0.75 / n)
    assert abs(mean - 1.0) <= 3 * sigma


def test_silence_insert_bad_probability():
    with pytest.raises(ValueError):
        text.silence_insert([[1]], 1.5, np.random.default_rng(0))


def test_split_words_inverts_insertion():
    words = [[1, 2], [3, 4], [5]]
    out = text.silence_insert(words, 1.0, np.random.default_rng(0))
    assert text.split_words(out) == words


def test_grammar_deterministic():
    a, b = grammar(4), grammar(4)
    assert a.lexicon == b.lexicon
    np.testing.assert_array_equal(a.trans, b.trans)


def test_lexicon_words_in_range():
    gr = grammar(5)
    assert len(gr.lexicon) == 20
    for w in gr.lexicon:
        assert 2 <= len(w) <= 4
        assert all(1 <= p <= 8 for p in w)
    assert len(set(gr.lexicon)) == len(gr.lexicon)


def test_sentences_and_corpus_roundtrip(tmp_path):
    gr = grammar(6)
    rng = derive_rng(6, "sent")
    sents = [text.sentence_words(gr, text.sample_sentence(gr, rng)) for _ in range(10)]
    inv = text.inventory_names(8)
    path = tmp_path / "corpus.txt"
    text.save_corpus(path, sents, inv)
    back = text.load_corpus(path, inv)
    assert back == sents


def test_inventory_names_sil_first():
    names = text.inventory_names(8)
    assert names[0] == "SIL"
    assert len(names) == 9
    assert len(set(names)) == 9
