"""Alternating adversarial optimisation with reference-pool consumption,
the horizon controller, periodic unsupervised evaluation, and checkpoint
selection.

One step = `d_per_g` discriminator updates followed by one generator
update, each on its own mini-batch of (segments, reference) pairs drawn
round-robin without replacement from the pool (each epoch consumes `a`
fresh entries per utterance).  Every a_i steps the controller estimates
r_d from the discriminator's recent real-branch outputs and nudges the
diffusion horizon.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import adversarial as adv
from . import evaluation, features, lm as lm_mod
from .config import RunConfig, train_hash
from .diffusion import DiffusionSchedule, estimate_rd, make_schedule, sample_t, update_T
from .engine import Tape, backward, recording
from .params import adam_step, save_weights
from .rngs import derive_rng
from .text import silence_insert  # noqa: F401  (re-exported: text-side op used across stages)

METRIC_COLUMNS = ("step", "epoch", "loss_g", "loss_d", "l_pd", "l_sp", "l_gp", "r_d", "T_live", "lm_nll", "vocab_usage")


@dataclass
class EvalRecord:
    step: int
    lm_nll: float
    vocab_usage: float
    checkpoint: str


@dataclass
class TrainState:
    nets: adv.GanNets
    schedule: DiffusionSchedule
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)  # metric rows, append-only
    evals: list[EvalRecord] = field(default_factory=list)
    consumed: dict[str, int] = field(default_factory=dict)
    controller_buffer: list[float] = field(default_factory=list)
    controller_events: int = 0


class ProvisioningError(RuntimeError):
    """Reference pool ran out of entries (a/epochs mismatch)."""


def _finite_or_die(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise RuntimeError(f"non-finite {what} at step {step}; aborting run")
    return value


def _update_store(tp, loss, store, leaves, lr, cfg):
    names = list(leaves.keys())
    grads = backward(tp, loss, [leaves[n] for n in names])
    for name, g in zip(names, grads):
        if name in store.entries:
            store.accumulate(name, g)
    adam_step(store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def train_step(state: TrainState, d_batch, g_batch, cfg, rng_d, rng_g):
    """One discriminator update, then one generator update on a different
    batch.  Batches are lists of (segments, reference_dense); timesteps are
    sampled per element unless the timestep discriminators are ablated.

    Returns (d_terms, g_terms); g_terms is None for a trailing
    discriminator-only step.
    """
    nets, sched = state.nets, state.schedule
    d_terms = None
    for chunk in d_batch:
        if cfg.t_discriminators:
            ts = sample_t(sched, len(chunk), rng_d)
        else:
            ts = np.zeros(len(chunk), dtype=int)
        triples = [(s, r, int(t)) for (s, r), t in zip(chunk, ts)]
        tp = Tape()
        with recording(tp):
            leaves = nets.disc_store.leaves()
            w = {**nets.gen_store.values(), **leaves}
            loss, d_terms, real_outs = adv.loss_discriminator(nets, w, triples, sched, cfg.lam, rng_d)
            _update_store(tp, loss, nets.disc_store, leaves, cfg.lr_d, cfg)
        # the printed label convention marks references as 0, so the
        # discriminator's confidence in the correct real label is 1 - C
        state.controller_buffer.extend(1.0 - c for c in real_outs)

    g_terms = None
    if g_batch is not None:
        if cfg.t_discriminators:
            ts = sample_t(sched, len(g_batch), rng_g)
        else:
            ts = np.zeros(len(g_batch), dtype=int)
        pairs = [(s, int(t)) for (s, _), t in zip(g_batch, ts)]
        tp = Tape()
        with recording(tp):
            leaves = nets.gen_store.leaves()
            w = {**leaves, **nets.disc_store.values()}
            loss, g_terms = adv.loss_generator(nets, w, pairs, sched, cfg.eta, cfg.gamma, rng_g)
            _update_store(tp, loss, nets.gen_store, leaves, cfg.lr_g, cfg)

    state.step += 1
    return d_terms, g_terms


def controller_tick(state: TrainState, cfg) -> dict | None:
    """Every a_i steps: estimate r_d from the buffered real-branch outputs
    and move the horizon.  Frozen entirely when the timestep discriminators
    are ablated."""
    if not cfg.t_discriminators or state.step % cfg.a_i != 0:
        return None
    if not state.controller_buffer:
        return None
    r_d = estimate_rd(state.controller_buffer)
    state.controller_buffer.clear()
    update_T(state.schedule, r_d)
    state.controller_events += 1
    return {"step": state.step, "r_d": r_d, "T_live": state.schedule.t_live}


def select_checkpoint(evals: list[EvalRecord], usage_floor: float) -> tuple[EvalRecord, str | None]:
    """Minimal LM NLL among checkpoints with enough vocabulary usage; if
    none qualifies, fall back to the max-usage checkpoint with a warning."""
    if not evals:
        raise ValueError("no evaluated checkpoints")
    eligible = [e for e in evals if e.vocab_usage >= usage_floor]
    if eligible:
        best = min(eligible, key=lambda e: (e.lm_nll, e.step))
        return best, None
    best = max(evals, key=lambda e: (e.vocab_usage, -e.step))
    return best, f"no checkpoint reached usage_floor={usage_floor}; fell back to max-usage step {best.step}"


# --------------------------------------------------------------------------
# the full loop


def _epoch_slots(uids: list[str], a: int, epoch: int, rng) -> list[tuple[str, int]]:
    slots = [(uid, epoch * a + j) for uid in uids for j in range(a)]
    perm = rng.permutation(len(slots))
    return [slots[int(i)] for i in perm]


def _fetch(pool: lm_mod.RefPool, uid: str, idx: int, need: int):
    entries = pool.entries.get(uid)
    if entries is None or idx >= len(entries):
        raise ProvisioningError(f"reference pool exhausted for utterance {uid!r} (have {0 if entries is None else len(entries)}, need {need})")
    return entries[idx]


def evaluate_generator(nets: adv.GanNets, seg_map: dict[str, np.ndarray], lm_model: lm_mod.MaskedLm, sil_id: int, v: int):
    """Decode a held-out batch; mean LM NLL of the decoded strings plus
    vocabulary usage of the raw argmax outputs."""
    w = nets.gen_store.values()
    used: set[int] = set()
    nlls = []
    hyps = {}
    for uid in sorted(seg_map):
        p = adv.generate(nets, w, seg_map[uid])
        ids = np.asarray(p).argmax(axis=1)
        used.update(int(x) for x in ids)
        dec = evaluation.decode(np.asarray(p), sil_id, uid)
        hyps[uid] = dec.phonemes
        nlls.append(lm_mod.nll_score(lm_model, dec.phonemes) if dec.phonemes else math.log(v))
    return float(np.mean(nlls)), len(used) / v, hyps


def run_training(
    rc: RunConfig,
    dataset: features.Dataset,
    pipeline: features.SegmentPipeline,
    pool: lm_mod.RefPool,
    lm_model: lm_mod.MaskedLm,
    out_dir: str,
) -> TrainState:
    cfg = rc.train
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    v = len(dataset.inventory)
    sil_id = dataset.sil_id

    rng_init = derive_rng(rc.seed, "train", "init")
    nets = adv.build_nets(cfg, v, rc.feat.d_pca, rng_init, dtype=dtype)
    schedule = make_schedule(cfg.beta0, cfg.betaT, cfg.t_min, cfg.t_max, cfg.d_target, cfg.c_step)
    state = TrainState(nets=nets, schedule=schedule)

    seg_train = {
        u.id: features.segment_sequence(pipeline, u).segments.astype(dtype)
        for u in dataset.splits["train"]
    }
    seg_dev = {
        u.id: features.segment_sequence(pipeline, u).segments.astype(dtype)
        for u in dataset.splits["dev"]
    }
    pool_cast = {
        uid: [lm_mod.RefEntry(e.ids, e.dense.astype(dtype)) for e in entries]
        for uid, entries in pool.entries.items()
    }
    pool_use = lm_mod.RefPool(entries=pool_cast)
    need = cfg.a * cfg.epochs

    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    run_hash = train_hash(rc)

    uids = sorted(seg_train)
    rng_batch = derive_rng(rc.seed, "train", "batch")

    def write_rows(f, rows):
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in METRIC_COLUMNS) + "\n")

    def do_eval() -> EvalRecord:
        nll, usage, _ = evaluate_generator(nets, seg_dev, lm_model, sil_id, v)
        _finite_or_die(nll, "lm_nll", state.step)
        ck = os.path.join(out_dir, "checkpoints", f"step_{state.step:06d}.bin")
        save_weights(ck, nets.gen_store)
        with open(ck + ".txt", "w", encoding="utf-8") as sf:
            sf.write(f"step={state.step}\nconfig_hash={run_hash}\n")
        rec = EvalRecord(step=state.step, lm_nll=nll, vocab_usage=usage, checkpoint=ck)
        state.evals.append(rec)
        return rec

    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(",".join(METRIC_COLUMNS) + "\n")
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            slots = _epoch_slots(uids, cfg.a, epoch, rng_batch)
            batches = [slots[i : i + cfg.batch] for i in range(0, len(slots), cfg.batch)]
            group = cfg.d_per_g + 1
            for gi in range(0, len(batches), group):
                last_step = epoch == cfg.epochs - 1 and gi + group >= len(batches)
                chunk = batches[gi : gi + group]
                d_slots, g_slot = chunk[:-1], chunk[-1]
                if len(chunk) == 1:
                    d_slots, g_slot = chunk, None
                d_batches = []
                for bslots in d_slots:
                    batch = []
                    for uid, idx in bslots:
                        entry = _fetch(pool_use, uid, idx, need)
                        state.consumed[uid] = state.consumed.get(uid, 0) + 1
                        batch.append((seg_train[uid], entry.dense))
                    d_batches.append(batch)
                g_batch = None
                if g_slot is not None:
                    g_batch = []
                    for uid, idx in g_slot:
                        entry = _fetch(pool_use, uid, idx, need)
                        state.consumed[uid] = state.consumed.get(uid, 0) + 1
                        g_batch.append((seg_train[uid], entry.dense))

                rng_d = derive_rng(rc.seed, "train", "d", state.step + 1)
                rng_g = derive_rng(rc.seed, "train", "g", state.step + 1)
                d_terms, g_terms = train_step(state, d_batches, g_batch, cfg, rng_d, rng_g)

                row: dict = {"step": state.step, "epoch": epoch, "T_live": state.schedule.t_live}
                row["loss_d"] = _finite_or_die(d_terms.d_fake_bce + d_terms.d_real_bce + cfg.lam * d_terms.l_gp, "loss_d", state.step)
                row["l_gp"] = _finite_or_die(d_terms.l_gp, "l_gp", state.step)
                if g_terms is not None:
                    row["loss_g"] = _finite_or_die(
                        g_terms.g_bce + cfg.eta * g_terms.l_pd + cfg.gamma * g_terms.l_sp, "loss_g", state.step
                    )
                    row["l_pd"] = _finite_or_die(g_terms.l_pd, "l_pd", state.step)
                    row["l_sp"] = _finite_or_die(g_terms.l_sp, "l_sp", state.step)

                event = controller_tick(state, cfg)
                if state.step % cfg.eval_every == 0 or last_step:
                    rec = do_eval()
                    row["lm_nll"] = rec.lm_nll
                    row["vocab_usage"] = rec.vocab_usage
                state.history.append(row)
                rows = [row]
                if event is not None:
                    erow = {"step": event["step"], "r_d": event["r_d"], "T_live": event["T_live"]}
                    state.history.append(erow)
                    rows.append(erow)
                write_rows(mf, rows)

    best, warning = select_checkpoint(state.evals, cfg.usage_floor)
    with open(os.path.join(out_dir, "selection.txt"), "w", encoding="utf-8") as f:
        f.write(f"selected_step={best.step}\n")
        f.write(f"checkpoint={os.path.basename(best.checkpoint)}\n")
        f.write(f"lm_nll={best.lm_nll!r}\n")
        f.write(f"vocab_usage={best.vocab_usage!r}\n")
        f.write(f"config_hash={run_hash}\n")
        if warning is not None:
            f.write(f"warning={warning}\n")
    return state
