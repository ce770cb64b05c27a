"""Synthetic phonotactics: an order-2 Markov chain over phonemes builds a
small lexicon; sentences are word sequences drawn from it.  The audio and
text sides share the grammar but never a sentence.

Phoneme id 0 is always SIL; real phonemes are 1..V.  SIL is sprinkled at
word boundaries, mimicking pauses on the audio side and the silence-token
convention on the text side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIL = 0

# ARPAbet-flavoured names for the first few synthetic phonemes; ids past the
# pool fall back to generated names.
_NAME_POOL = [
    "aa", "eh", "iy", "ow", "uw", "mm", "ss", "tt",
    "kk", "nn", "ll", "rr", "dd", "ff", "zz", "sh",
]


def inventory_names(n_real: int) -> list[str]:
    names = ["SIL"]
    for i in range(n_real):
        names.append(_NAME_POOL[i] if i < len(_NAME_POOL) else f"p{i:02d}")
    return names


@dataclass
class Grammar:
    n_real: int
    start: np.ndarray  # (V,)
    pair: np.ndarray  # (V, V) second-symbol conditionals
    trans: np.ndarray  # (V, V, V) order-2 conditionals
    lexicon: list[tuple[int, ...]]  # words as tuples of real phoneme ids (1-based)
    word_len: tuple[int, int]
    sent_words: tuple[int, int]


def _skewed(rng: np.random.Generator, v: int, support: int, bias: np.ndarray) -> np.ndarray:
    """A sparse, biased distribution over v symbols."""
    p = np.zeros(v)
    idx = rng.choice(v, size=min(support, v), replace=False)
    w = rng.dirichlet(np.full(len(idx), 0.6)) * bias[idx]
    p[idx] = w / w.sum()
    return p


def build_grammar(
    rng: np.random.Generator,
    n_real: int,
    n_words: int,
    word_len: tuple[int, int],
    sent_words: tuple[int, int],
) -> Grammar:
    v = n_real
    # skewed unigram bias makes phoneme marginals distinct, which keeps the
    # generator's output-matching problem identifiable
    bias = (np.arange(1, v + 1) ** -0.7).astype(np.float64)
    rng.shuffle(bias)
    start = _skewed(rng, v, max(3, v // 2), bias)
    pair = np.stack([_skewed(rng, v, 3, bias) for _ in range(v)])
    trans = np.stack([[_skewed(rng, v, 3, bias) for _ in range(v)] for _ in range(v)])

    lexicon: list[tuple[int, ...]] = []
    seen = set()
    attempts = 0
    while len(lexicon) < n_words and attempts < 50 * n_words:
        attempts += 1
        w = sample_word(rng, start, pair, trans, word_len)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    if len(lexicon) < n_words:
        raise ValueError("grammar too small to build the requested lexicon")
    return Grammar(n_real=v, start=start, pair=pair, trans=trans, lexicon=lexicon, word_len=word_len, sent_words=sent_words)


def sample_word(rng, start, pair, trans, word_len) -> tuple[int, ...]:
    n = int(rng.integers(word_len[0], word_len[1] + 1))
    a = int(rng.choice(len(start), p=start))
    out = [a]
    if n > 1:
        b = int(rng.choice(len(start), p=pair[a]))
        out.append(b)
        while len(out) < n:
            c = int(rng.choice(len(start), p=trans[out[-2], out[-1]]))
            out.append(c)
    # grammar indices are 0-based over real phonemes; shift past SIL
    return tuple(i + 1 for i in out)


def sample_sentence(gr: Grammar, rng: np.random.Generator) -> tuple[int, ...]:
    """A sentence as a tuple of lexicon indices."""
    n = int(rng.integers(gr.sent_words[0], gr.sent_words[1] + 1))
    return tuple(int(rng.integers(0, len(gr.lexicon))) for _ in range(n))


def sentence_words(gr: Grammar, sent: tuple[int, ...]) -> list[list[int]]:
    return [list(gr.lexicon[w]) for w in sent]


def silence_insert(words: list[list[int]], p_sil: float, rng: np.random.Generator, sil_id: int = SIL) -> list[int]:
    """Join words, inserting SIL at each boundary independently with p_sil."""
    if not 0.0 <= p_sil <= 1.0:
        raise ValueError(f"p_sil must be in [0, 1], got {p_sil}")
    out: list[int] = []
    for i, w in enumerate(words):
        if i > 0 and rng.random() < p_sil:
            out.append(sil_id)
        out.extend(w)
    return out


def split_words(ids: list[int], sil_id: int = SIL) -> list[list[int]]:
    """Maximal non-SIL runs of a phoneme sequence."""
    words: list[list[int]] = []
    cur: list[int] = []
    for x in ids:
        if x == sil_id:
            if cur:
                words.append(cur)
                cur = []
        else:
            cur.append(x)
    if cur:
        words.append(cur)
    return words


# --------------------------------------------------------------------------
# corpus file: one sentence per line, words joined by " / "


def save_corpus(path, sentences: list[list[list[int]]], inventory: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for words in sentences:
            f.write(" / ".join(" ".join(inventory[p] for p in w) for w in words) + "\n")


def load_corpus(path, inventory: list[str]) -> list[list[list[int]]]:
    index = {name: i for i, name in enumerate(inventory)}
    sentences = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            words = [[index[n] for n in part.split()] for part in line.split(" / ")]
            sentences.append(words)
    return sentences
