"""Masked phoneme language model.

A tiny pre-LN transformer encoder (2 blocks by default) over the phoneme
inventory plus a MASK token.  It serves two jobs: length-constrained
Gibbs-style sampling of pseudo reference sequences, and per-token NLL
scoring for unsupervised checkpoint selection.  The forward pass is
written once against the engine primitives, so the same code runs taped
(training) or as plain numpy (sampling and scoring).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import binio, engine, text
from .config import LmConfig
from .engine import (
    Tape,
    add,
    backward,
    concat_cols,
    gather_cells,
    gather_rows,
    layer_norm_rows,
    leaky_relu,
    log_softmax_rows,
    matmul,
    mean_all,
    neg,
    recording,
    slice_cols,
    smul,
    softmax_np,
    softmax_rows,
    transpose,
)
from .params import ParamStore, adam_step
from .rngs import derive_rng


def _ln_np(x, gain, bias, eps=1e-5):
    """Row layer norm; normalises the trailing (channel) axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


@dataclass
class RefEntry:
    ids: list[int]
    dense: np.ndarray  # (len, V) rows on the simplex


@dataclass
class RefPool:
    entries: dict[str, list[RefEntry]] = field(default_factory=dict)


class MaskedLm:
    """vocab ids 0..V-1 are real phonemes (SIL included); id V is MASK."""

    def __init__(self, vocab_size: int, cfg: LmConfig, store: ParamStore | None = None, rng=None):
        self.vocab_size = vocab_size
        self.mask_id = vocab_size
        self.cfg = cfg
        self._raw = None
        if store is None:
            store = ParamStore(dtype=np.float64)
            self._init_params(store, rng if rng is not None else np.random.default_rng(0))
        self.store = store

    def _init_params(self, store: ParamStore, rng) -> None:
        cfg = self.cfg
        w = cfg.width
        store.add("lm.tok", rng.normal(0.0, 0.5, (self.vocab_size + 1, w)))
        store.add("lm.pos", rng.normal(0.0, 0.5, (cfg.max_len, w)))
        for i in range(cfg.blocks):
            p = f"lm.b{i}."
            store.add(p + "ln1_g", np.ones((1, w)))
            store.add(p + "ln1_b", np.zeros((1, w)))
            for nm in ("wq", "wk", "wv", "wo"):
                store.add(p + nm, rng.normal(0.0, 1.0 / math.sqrt(w), (w, w)))
            store.add(p + "bo", np.zeros((1, w)))
            store.add(p + "ln2_g", np.ones((1, w)))
            store.add(p + "ln2_b", np.zeros((1, w)))
            store.add(p + "w1", rng.normal(0.0, 1.0 / math.sqrt(w), (w, cfg.ffn)))
            store.add(p + "b1", np.zeros((1, cfg.ffn)))
            store.add(p + "w2", rng.normal(0.0, 1.0 / math.sqrt(cfg.ffn), (cfg.ffn, w)))
            store.add(p + "b2", np.zeros((1, w)))
        store.add("lm.lnf_g", np.ones((1, w)))
        store.add("lm.lnf_b", np.zeros((1, w)))
        # small head keeps the untrained model near the uniform distribution
        store.add("lm.head_w", rng.normal(0.0, 0.02, (w, self.vocab_size)))
        store.add("lm.head_b", np.zeros((1, self.vocab_size)))

    def forward(self, w, ids):
        """Logits over the real vocabulary (MASK has no output column)."""
        cfg = self.cfg
        n = len(ids)
        if n > cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        h = add(gather_rows(w["lm.tok"], ids), gather_rows(w["lm.pos"], np.arange(n)))
        dh = cfg.width // cfg.heads
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.blocks):
            p = f"lm.b{i}."
            x = layer_norm_rows(h, w[p + "ln1_g"], w[p + "ln1_b"])
            q = matmul(x, w[p + "wq"])
            k = matmul(x, w[p + "wk"])
            v = matmul(x, w[p + "wv"])
            heads = []
            for j in range(cfg.heads):
                qs = slice_cols(q, j * dh, (j + 1) * dh)
                ks = slice_cols(k, j * dh, (j + 1) * dh)
                vs = slice_cols(v, j * dh, (j + 1) * dh)
                attn = softmax_rows(smul(matmul(qs, transpose(ks)), scale))
                heads.append(matmul(attn, vs))
            ctx = concat_cols(heads)
            h = add(h, add(matmul(ctx, w[p + "wo"]), w[p + "bo"]))
            x2 = layer_norm_rows(h, w[p + "ln2_g"], w[p + "ln2_b"])
            ff = add(matmul(leaky_relu(add(matmul(x2, w[p + "w1"]), w[p + "b1"]), 0.0), w[p + "w2"]), w[p + "b2"])
            h = add(h, ff)
        h = layer_norm_rows(h, w["lm.lnf_g"], w["lm.lnf_b"])
        return add(matmul(h, w["lm.head_w"]), w["lm.head_b"])

    def logits(self, ids) -> np.ndarray:
        """Inference-path logits: plain numpy, no tape overhead.

        Mirrors `forward` op for op; `test_lm` asserts the two paths agree.
        """
        cfg = self.cfg
        n = len(ids)
        if n > cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        w = self._raw if self._raw is not None else self.store.values()
        h = w["lm.tok"][np.asarray(ids, dtype=np.int64)] + w["lm.pos"][:n]
        dh = cfg.width // cfg.heads
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.blocks):
            p = f"lm.b{i}."
            x = _ln_np(h, w[p + "ln1_g"], w[p + "ln1_b"])
            q = x @ w[p + "wq"]
            k = x @ w[p + "wk"]
            v = x @ w[p + "wv"]
            parts = []
            for j in range(cfg.heads):
                sl = slice(j * dh, (j + 1) * dh)
                attn = softmax_np(scale * (q[:, sl] @ k[:, sl].T))
                parts.append(attn @ v[:, sl])
            ctx = np.concatenate(parts, axis=1)
            h = h + (ctx @ w[p + "wo"] + w[p + "bo"])
            x2 = _ln_np(h, w[p + "ln2_g"], w[p + "ln2_b"])
            h = h + (np.maximum(x2 @ w[p + "w1"] + w[p + "b1"], 0.0) @ w[p + "w2"] + w[p + "b2"])
        h = _ln_np(h, w["lm.lnf_g"], w["lm.lnf_b"])
        return h @ w["lm.head_w"] + w["lm.head_b"]

    def freeze_raw(self) -> None:
        """Cache raw weight views for repeated inference calls."""
        self._raw = self.store.values()

    def thaw_raw(self) -> None:
        self._raw = None

    def logits_batch(self, ids_batch: np.ndarray) -> np.ndarray:
        """Batched inference: (B, L) int ids -> (B, L, V) logits.

        Same arithmetic as `logits`, vectorised over independent sequences;
        used by the pool sampler where per-call overhead would dominate.
        """
        cfg = self.cfg
        b, n = ids_batch.shape
        if n > cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        w = self._raw if self._raw is not None else self.store.values()
        width = cfg.width
        dh = width // cfg.heads
        scale = 1.0 / math.sqrt(dh)
        # dense projections run as one flat GEMM over all positions of all
        # chains; only attention itself stays batched
        h = (w["lm.tok"][ids_batch] + w["lm.pos"][:n][None, :, :]).reshape(b * n, width)
        for i in range(cfg.blocks):
            p = f"lm.b{i}."
            x = _ln_np(h, w[p + "ln1_g"], w[p + "ln1_b"])
            q = (x @ w[p + "wq"]).reshape(b, n, width)
            k = (x @ w[p + "wk"]).reshape(b, n, width)
            v = (x @ w[p + "wv"]).reshape(b, n, width)
            parts = []
            for j in range(cfg.heads):
                sl = slice(j * dh, (j + 1) * dh)
                attn = softmax_np(scale * (q[..., sl] @ k[..., sl].transpose(0, 2, 1)))
                parts.append(attn @ v[..., sl])
            ctx = np.concatenate(parts, axis=-1).reshape(b * n, width)
            h = h + (ctx @ w[p + "wo"] + w[p + "bo"])
            x2 = _ln_np(h, w[p + "ln2_g"], w[p + "ln2_b"])
            h = h + (np.maximum(x2 @ w[p + "w1"] + w[p + "b1"], 0.0) @ w[p + "w2"] + w[p + "b2"])
        h = _ln_np(h, w["lm.lnf_g"], w["lm.lnf_b"])
        return (h @ w["lm.head_w"] + w["lm.head_b"]).reshape(b, n, self.vocab_size)


def masked_ce(lm: MaskedLm, w, ids: list[int], positions: np.ndarray):
    """Mean cross entropy of the true ids at `positions` under masking."""
    inp = list(ids)
    targets = [ids[p] for p in positions]
    for p in positions:
        inp[p] = lm.mask_id
    lp = log_softmax_rows(lm.forward(w, inp))
    picked = gather_cells(lp, positions, targets)
    return neg(mean_all(picked))


def _mean_chain(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return smul(acc, 1.0 / len(terms))


def train_mlm(corpus: list[list[int]], vocab_size: int, cfg: LmConfig, rng) -> tuple[MaskedLm, dict]:
    """Train on masked positions; returns the model plus held-out CE before
    and after training (the held-out slice is the corpus tail)."""
    if not corpus:
        raise ValueError("empty corpus")
    for seq in corpus:
        if len(seq) > cfg.max_len:
            raise ValueError(f"corpus sequence of length {len(seq)} exceeds max_len {cfg.max_len}")
    n_hold = max(1, int(len(corpus) * cfg.holdout_frac))
    train_part = corpus[:-n_hold] if len(corpus) > n_hold else corpus
    hold_part = corpus[-n_hold:]

    lm = MaskedLm(vocab_size, cfg, rng=rng)

    def holdout_ce() -> float:
        w = lm.store.values()
        total, count = 0.0, 0
        for idx, seq in enumerate(hold_part):
            r = derive_rng(72, "lm-holdout", idx)
            n_mask = max(1, round(cfg.mask_frac * len(seq)))
            pos = r.choice(len(seq), size=min(n_mask, len(seq)), replace=False)
            total += float(engine.val(masked_ce(lm, w, seq, pos)))
            count += 1
        return total / count

    ce_init = holdout_ce()
    history = []
    for _ in range(cfg.steps):
        batch_idx = rng.integers(0, len(train_part), size=cfg.batch)
        tp = Tape()
        with recording(tp):
            w = lm.store.leaves()
            losses = []
            for bi in batch_idx:
                seq = train_part[int(bi)]
                n_mask = max(1, round(cfg.mask_frac * len(seq)))
                pos = rng.choice(len(seq), size=min(n_mask, len(seq)), replace=False)
                losses.append(masked_ce(lm, w, seq, pos))
            loss = _mean_chain(losses)
            names = list(w.keys())
            grads = backward(tp, loss, [w[n] for n in names])
        for name, g in zip(names, grads):
            lm.store.accumulate(name, g)
        adam_step(lm.store, cfg.lr, 0.9, 0.999, 1e-8)
        history.append(float(engine.val(loss)))
    ce_final = holdout_ce()
    return lm, {"holdout_ce_init": ce_init, "holdout_ce_final": ce_final, "train_loss": history}


def nll_score(lm: MaskedLm, ids: list[int]) -> float:
    """Mean over positions of -ln p(id | all other positions)."""
    if not ids:
        raise ValueError("empty sequence")
    if any(not (0 <= x < lm.vocab_size) for x in ids):
        raise ValueError("unknown phoneme id")
    lm.freeze_raw()
    total = 0.0
    for pos in range(len(ids)):
        inp = list(ids)
        inp[pos] = lm.mask_id
        lp = log_softmax_rows(lm.logits(inp))
        total += -float(lp[pos, ids[pos]])
    return total / len(ids)


def sample_batch_with_length(lm: MaskedLm, n_chains: int, target_len: int, sweeps: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Gibbs-style refinement at a fixed length, over independent chains.

    Each chain starts from uniform-random phonemes; every sweep re-visits
    all positions in a chain-private random order, masking one at a time
    and resampling from the conditional.  Returns ids (B, L) plus the
    conditional that produced each position's final id (B, L, V).
    """
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    v = lm.vocab_size
    ids = rng.integers(0, v, size=(n_chains, target_len))
    dense = np.zeros((n_chains, target_len, v))
    lm.freeze_raw()
    rows = np.arange(n_chains)
    for _ in range(sweeps):
        perms = np.stack([rng.permutation(target_len) for _ in range(n_chains)])
        for m in range(target_len):
            pos = perms[:, m]
            ids[rows, pos] = lm.mask_id
            logits = lm.logits_batch(ids)
            p = softmax_np(logits[rows, pos])
            p = p / p.sum(axis=1, keepdims=True)
            u = rng.random(n_chains)
            cs = p.cumsum(axis=1)
            choice = (cs > u[:, None]).argmax(axis=1)
            choice = np.where(u >= cs[:, -1], v - 1, choice)  # roundoff guard
            ids[rows, pos] = choice
            dense[rows, pos] = p
    return ids, dense


def sample_with_length(lm: MaskedLm, target_len: int, sweeps: int, rng) -> tuple[list[int], np.ndarray]:
    """Single-chain form of `sample_batch_with_length`; ids length is
    exactly target_len and every dense row lies on the simplex."""
    ids, dense = sample_batch_with_length(lm, 1, target_len, sweeps, rng)
    return [int(x) for x in ids[0]], dense[0]


def _extend_one(lm: MaskedLm, ids: list[int], rng) -> tuple[int, np.ndarray]:
    ext = list(ids) + [lm.mask_id]
    logits = lm.logits(ext)
    p = softmax_np(logits[-1])
    p = p / p.sum()
    return int(rng.choice(lm.vocab_size, p=p)), p


def _one_hot(i: int, v: int) -> np.ndarray:
    row = np.zeros(v)
    row[i] = 1.0
    return row


def sample_reference(lm: MaskedLm, target: int, p_sil: float, sweeps: int, rng, sil_id: int = text.SIL) -> RefEntry:
    """One pseudo reference: LM sample, then SIL insertion between the
    sampled words, then trim/extend back to exactly `target` positions."""
    ids, dense = sample_with_length(lm, target, sweeps, rng)
    return _finish_reference(lm, ids, dense, target, p_sil, rng, sil_id)


def _finish_reference(lm: MaskedLm, ids, dense, target: int, p_sil: float, rng, sil_id: int) -> RefEntry:
    runs: list[tuple[list[int], list[np.ndarray]]] = []
    cur_ids: list[int] = []
    cur_rows: list[np.ndarray] = []
    for i, x in enumerate(ids):
        if x == sil_id:
            if cur_ids:
                runs.append((cur_ids, cur_rows))
                cur_ids, cur_rows = [], []
        else:
            cur_ids.append(x)
            cur_rows.append(dense[i])
    if cur_ids:
        runs.append((cur_ids, cur_rows))

    if runs:
        seq: list[int] = []
        rows: list[np.ndarray] = []
        for i, (wids, wrows) in enumerate(runs):
            if i > 0 and rng.random() < p_sil:
                seq.append(sil_id)
                rows.append(_one_hot(sil_id, lm.vocab_size))
            seq.extend(wids)
            rows.extend(wrows)
    else:  # degenerate all-SIL sample: keep it as is
        seq = list(ids)
        rows = [dense[i] for i in range(len(ids))]

    while len(seq) > target:
        seq.pop()
        rows.pop()
    while len(seq) < target:
        nxt, p = _extend_one(lm, seq, rng)
        seq.append(nxt)
        rows.append(p)
    return RefEntry(ids=seq, dense=np.stack(rows))


def build_ref_pool(
    lm: MaskedLm,
    length_targets: dict[str, int],
    a: int,
    epochs: int,
    p_sil: float,
    rng,
    *,
    sweeps: int = 4,
    bert_sampling: bool = True,
    length_guiding: bool = True,
    corpus: list[list[list[int]]] | None = None,
    sil_id: int = text.SIL,
) -> RefPool:
    """a*epochs pseudo references per utterance, sampled offline.

    With `bert_sampling` off, entries are random corpus sentences in
    one-hot form.  With `length_guiding` off, the LM samples at lengths
    drawn from the corpus length distribution instead of the utterance's
    segment count.
    """
    if a < 1 or epochs < 1:
        raise ValueError("need a >= 1 and epochs >= 1")
    if (not bert_sampling or not length_guiding) and corpus is None:
        raise ValueError("ablated sampling needs the text corpus")
    pool = RefPool()
    n = a * epochs
    for uid in sorted(length_targets):
        target = length_targets[uid]
        if target is None or target < 1:
            raise ValueError(f"missing length target for utterance {uid!r}")
        entries = []
        if not bert_sampling:
            for _ in range(n):
                words = corpus[int(rng.integers(0, len(corpus)))]
                ids = text.silence_insert(words, p_sil, rng, sil_id)
                dense = np.stack([_one_hot(x, lm.vocab_size) for x in ids])
                entries.append(RefEntry(ids=ids, dense=dense))
        elif not length_guiding:
            for _ in range(n):
                words = corpus[int(rng.integers(0, len(corpus)))]
                drawn = len(text.silence_insert(words, p_sil, rng, sil_id))
                tgt = max(1, min(drawn, lm.cfg.max_len))
                entries.append(sample_reference(lm, tgt, p_sil, sweeps, rng, sil_id))
        else:
            ids_b, dense_b = sample_batch_with_length(lm, n, target, sweeps, rng)
            for i in range(n):
                ids_i = [int(x) for x in ids_b[i]]
                entries.append(_finish_reference(lm, ids_i, dense_b[i], target, p_sil, rng, sil_id))
        pool.entries[uid] = entries
    return pool


# --------------------------------------------------------------------------
# persistence


def save_ref_pool(path, pool: RefPool) -> None:
    with open(path, "wb") as f:
        for uid in sorted(pool.entries):
            binio.write_str(f, uid)
            binio.write_u32(f, len(pool.entries[uid]))
            for e in pool.entries[uid]:
                binio.write_u32s(f, e.ids)
                binio.write_matrix(f, e.dense)


def load_ref_pool(path) -> RefPool:
    pool = RefPool()
    with open(path, "rb") as f:
        while not binio.at_eof(f):
            uid = binio.read_str(f)
            n = binio.read_u32(f)
            entries = []
            for _ in range(n):
                ids = binio.read_u32s(f)
                dense = binio.read_matrix(f)
                entries.append(RefEntry(ids=ids, dense=dense))
            pool.entries[uid] = entries
    return pool
