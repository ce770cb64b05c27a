"""Greedy decoding and phoneme error rate for the synthetic task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DecodedUtterance:
    id: str
    phonemes: list[int]  # SIL removed, adjacent repeats collapsed


def decode(output: np.ndarray, sil_id: int, utt_id: str = "") -> DecodedUtterance:
    """Per-row argmax (ties to the lowest id), collapse adjacent repeats,
    delete SIL."""
    if output.shape[0] < 1:
        raise ValueError("empty output")
    ids = output.argmax(axis=1)
    seq: list[int] = []
    prev = None
    for x in ids:
        x = int(x)
        if x != prev:
            if x != sil_id:
                seq.append(x)
            prev = x
    return DecodedUtterance(id=utt_id, phonemes=seq)


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    hyp = list(hyp)
    ref = list(ref)
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def per(hyp_set: dict[str, list[int]], ref_set: dict[str, list[int]]) -> float:
    """Corpus phoneme error rate: total edit distance over total ref length."""
    total_d = 0
    total_n = 0
    for uid, ref in ref_set.items():
        total_d += edit_distance(hyp_set.get(uid, []), ref)
        total_n += len(ref)
    if total_n == 0:
        raise ValueError("zero total reference length")
    return total_d / total_n


def strip_sil(ids, sil_id: int) -> list[int]:
    return [int(x) for x in ids if int(x) != sil_id]


def random_decode_baseline(
    ref_set: dict[str, list[int]],
    out_lengths: dict[str, int],
    v: int,
    sil_id: int,
    draws: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo PER of a random decoder: per-row argmax uniform over the
    inventory, decoded under the same rule, scored against the references."""
    if draws < 1:
        raise ValueError("need draws >= 1")
    pers = []
    for _ in range(draws):
        hyps = {}
        for uid in ref_set:
            ids = rng.integers(0, v, size=out_lengths[uid])
            onehot = np.zeros((len(ids), v))
            onehot[np.arange(len(ids)), ids] = 1.0
            hyps[uid] = decode(onehot, sil_id).phonemes
        pers.append(per(hyps, ref_set))
    return float(np.mean(pers))
