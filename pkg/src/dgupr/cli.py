"""Command-line pipeline: gen-data, train-lm, sample-refs, train, evaluate,
ablate.

Every stage reads and writes plain files under --out, stamps each artifact
with a scoped config hash, and refuses to consume artifacts whose hash
does not match the active configuration.  Stages therefore rerun cleanly
from any point, and ablation variants share the dataset and language
model they have in common.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time

import numpy as np

from . import adversarial as adv
from . import config as cfg_mod
from . import evaluation, features, lm as lm_mod, text, training
from .config import ABLATIONS, ConfigError, RunConfig
from .engine import conv1d_flat, softmax_rows
from .params import load_weights, save_weights, store_from_weights
from .rngs import derive_rng


class StageDependencyError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# artifact metadata


def _write_meta(path: str, stage: str, config_hash: str, upstream: str | None = None, extra: dict | None = None) -> None:
    lines = [f"stage={stage}", f"config_hash={config_hash}"]
    if upstream is not None:
        lines.append(f"upstream_hash={upstream}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    lines.append(f"created_unix={int(time.time())}")
    with open(path + ".meta", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _read_meta(path: str) -> dict:
    meta = {}
    with open(path + ".meta", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return meta


def _require(path: str, stage: str, expected_hash: str) -> None:
    if not os.path.exists(path):
        raise StageDependencyError(f"missing artifact {path}; run {stage} first")
    if not os.path.exists(path + ".meta"):
        raise StageDependencyError(f"missing sidecar {path}.meta; rerun {stage}")
    got = _read_meta(path).get("config_hash")
    if got != expected_hash:
        raise StageDependencyError(
            f"artifact {path} was built under config hash {got}, expected {expected_hash}; rerun {stage}"
        )


# --------------------------------------------------------------------------
# paths


def _p(out: str, *parts: str) -> str:
    return os.path.join(out, *parts)


def manifest_path(out: str) -> str:
    return _p(out, "dataset", "manifest.txt")


def corpus_path(out: str) -> str:
    return _p(out, "dataset", "corpus.txt")


def lm_path(out: str) -> str:
    return _p(out, "lm", "weights.bin")


def pool_path(out: str, rc: RunConfig) -> str:
    return _p(out, "refs", f"train_{cfg_mod.pool_hash(rc)}.pool")


# --------------------------------------------------------------------------
# stages


def cmd_gen_data(rc: RunConfig, out: str) -> None:
    d = rc.data
    names = text.inventory_names(d.vocab)
    grammar = text.build_grammar(
        derive_rng(rc.seed, "grammar"),
        d.vocab,
        d.n_words,
        (d.word_len_min, d.word_len_max),
        (d.sent_words_min, d.sent_words_max),
    )
    table = features.embedding_table(derive_rng(rc.seed, "embed"), len(names), d.d_raw)

    rng_sent = derive_rng(rc.seed, "sentences")
    seen: set[tuple[int, ...]] = set()

    def draw_unique() -> tuple[int, ...]:
        for _ in range(100000):
            s = text.sample_sentence(grammar, rng_sent)
            if s not in seen:
                seen.add(s)
                return s
        raise ConfigError("sentence space too small for disjoint splits; enlarge the lexicon")

    split_sents = {
        "train": [draw_unique() for _ in range(d.n_train)],
        "dev": [draw_unique() for _ in range(d.n_dev)],
        "eval": [draw_unique() for _ in range(d.n_eval)],
    }
    audio_set = set(seen)
    text_sents = [draw_unique() for _ in range(d.n_text)]
    if audio_set & set(text_sents):
        raise RuntimeError("audio and text sentence sets overlap")

    os.makedirs(_p(out, "dataset"), exist_ok=True)
    split_files = {}
    for split, sents in split_sents.items():
        utts = []
        for i, s in enumerate(sents):
            uid = f"{split}_{i:04d}"
            words = text.sentence_words(grammar, s)
            phonemes = text.silence_insert(words, rc.train.p_sil, derive_rng(rc.seed, "audio-sil", uid))
            utts.append(
                features.synth_features(
                    phonemes,
                    derive_rng(rc.seed, "frames", uid),
                    table,
                    d.dur_min,
                    d.dur_max,
                    d.noise_sd,
                    uid,
                )
            )
        rel = f"{split}.rec"
        features.save_split(_p(out, "dataset", rel), utts, names)
        split_files[split] = rel

    text.save_corpus(corpus_path(out), [text.sentence_words(grammar, s) for s in text_sents], names)
    features.save_manifest(manifest_path(out), names, rc.seed, split_files)
    _write_meta(manifest_path(out), "gen-data", cfg_mod.dataset_hash(rc))
    cfg_mod.write_config(_p(out, "config.txt"), rc)
    print(f"gen-data: {sum(len(v) for v in split_sents.values())} utterances, {len(text_sents)} text sentences -> {out}")


def _load_dataset(rc: RunConfig, out: str) -> features.Dataset:
    _require(manifest_path(out), "gen-data", cfg_mod.dataset_hash(rc))
    return features.load_dataset(manifest_path(out))


def cmd_train_lm(rc: RunConfig, out: str) -> None:
    dataset = _load_dataset(rc, out)
    corpus_words = text.load_corpus(corpus_path(out), dataset.inventory)
    rng_sil = derive_rng(rc.seed, "lm-corpus-sil")
    corpus_ids = [text.silence_insert(words, rc.train.p_sil, rng_sil) for words in corpus_words]
    model, info = lm_mod.train_mlm(corpus_ids, len(dataset.inventory), rc.lm, derive_rng(rc.seed, "lm-train"))
    os.makedirs(_p(out, "lm"), exist_ok=True)
    save_weights(lm_path(out), model.store)
    _write_meta(
        lm_path(out),
        "train-lm",
        cfg_mod.lm_hash(rc),
        upstream=cfg_mod.dataset_hash(rc),
        extra={
            "holdout_ce_init": repr(info["holdout_ce_init"]),
            "holdout_ce_final": repr(info["holdout_ce_final"]),
        },
    )
    print(f"train-lm: held-out masked CE {info['holdout_ce_init']:.3f} -> {info['holdout_ce_final']:.3f}")


def _load_lm(rc: RunConfig, out: str, dataset: features.Dataset) -> lm_mod.MaskedLm:
    _require(lm_path(out), "train-lm", cfg_mod.lm_hash(rc))
    store = store_from_weights(load_weights(lm_path(out)))
    return lm_mod.MaskedLm(len(dataset.inventory), rc.lm, store=store)


def _fit_pipeline(rc: RunConfig, dataset: features.Dataset) -> features.SegmentPipeline:
    return features.fit_pipeline(
        dataset.splits["train"],
        rc.feat.kmeans_k,
        rc.feat.kmeans_iters,
        rc.feat.d_pca,
        derive_rng(rc.seed, "kmeans"),
    )


def cmd_sample_refs(rc: RunConfig, out: str) -> None:
    dataset = _load_dataset(rc, out)
    model = _load_lm(rc, out, dataset)
    pipeline = _fit_pipeline(rc, dataset)
    lengths = {
        u.id: features.segment_sequence(pipeline, u).segments.shape[0] for u in dataset.splits["train"]
    }
    corpus = text.load_corpus(corpus_path(out), dataset.inventory)
    pool = lm_mod.build_ref_pool(
        model,
        lengths,
        rc.train.a,
        rc.train.epochs,
        rc.train.p_sil,
        derive_rng(rc.seed, "refs"),
        sweeps=rc.train.sweeps,
        bert_sampling=rc.train.bert_sampling,
        length_guiding=rc.train.length_guiding,
        corpus=corpus,
        sil_id=dataset.sil_id,
    )
    os.makedirs(_p(out, "refs"), exist_ok=True)
    path = pool_path(out, rc)
    lm_mod.save_ref_pool(path, pool)
    _write_meta(path, "sample-refs", cfg_mod.pool_hash(rc), upstream=cfg_mod.lm_hash(rc))
    n = sum(len(v) for v in pool.entries.values())
    print(f"sample-refs: {n} pseudo references ({rc.train.a} x {rc.train.epochs} per utterance) -> {path}")


def cmd_train(rc: RunConfig, out: str, run_dir: str | None = None) -> training.TrainState:
    dataset = _load_dataset(rc, out)
    model = _load_lm(rc, out, dataset)
    path = pool_path(out, rc)
    _require(path, "sample-refs", cfg_mod.pool_hash(rc))
    pool = lm_mod.load_ref_pool(path)
    pipeline = _fit_pipeline(rc, dataset)
    run_dir = run_dir or _p(out, "run")
    os.makedirs(run_dir, exist_ok=True)
    state = training.run_training(rc, dataset, pipeline, pool, model, run_dir)
    _write_meta(
        os.path.join(run_dir, "metrics.csv"),
        "train",
        cfg_mod.train_hash(rc),
        upstream=cfg_mod.pool_hash(rc),
        extra={"steps": state.step, "controller_events": state.controller_events},
    )
    print(f"train: {state.step} steps, {state.controller_events} controller events, run dir {run_dir}")
    return state


def _read_selection(run_dir: str) -> dict:
    path = os.path.join(run_dir, "selection.txt")
    if not os.path.exists(path):
        raise StageDependencyError(f"missing artifact {path}; run train first")
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def _gen_forward(weights: dict[str, np.ndarray], segments: np.ndarray, kernel: int) -> np.ndarray:
    return softmax_rows(conv1d_flat(segments, weights["gen.conv_w"], weights["gen.conv_b"], kernel))


def cmd_evaluate(
    rc: RunConfig,
    out: str,
    split: str = "dev",
    checkpoint: str | None = None,
    run_dir: str | None = None,
    eval_dir: str | None = None,
) -> dict:
    dataset = _load_dataset(rc, out)
    if split not in dataset.splits:
        raise ConfigError(f"unknown split {split!r}")
    pipeline = _fit_pipeline(rc, dataset)
    run_dir = run_dir or _p(out, "run")
    if checkpoint is None:
        sel = _read_selection(run_dir)
        if sel.get("config_hash") != cfg_mod.train_hash(rc):
            raise StageDependencyError(
                f"run in {run_dir} was trained under config hash {sel.get('config_hash')}, "
                f"expected {cfg_mod.train_hash(rc)}; rerun train"
            )
        checkpoint = os.path.join(run_dir, "checkpoints", sel["checkpoint"])
    if not os.path.exists(checkpoint):
        raise StageDependencyError(f"missing artifact {checkpoint}; run train first")
    weights = load_weights(checkpoint)

    sil = dataset.sil_id
    refs: dict[str, list[int]] = {}
    hyps: dict[str, list[int]] = {}
    out_lengths: dict[str, int] = {}
    rows = []
    for u in dataset.splits[split]:
        seg = features.segment_sequence(pipeline, u).segments
        p = _gen_forward(weights, seg, rc.train.gen_kernel)
        dec = evaluation.decode(np.asarray(p), sil, u.id)
        refs[u.id] = evaluation.strip_sil(u.hidden_phonemes, sil)
        hyps[u.id] = dec.phonemes
        out_lengths[u.id] = seg.shape[0]
        rows.append((u.id, evaluation.edit_distance(dec.phonemes, refs[u.id]), len(refs[u.id])))

    corpus_per = evaluation.per(hyps, refs)
    baseline = evaluation.random_decode_baseline(
        refs, out_lengths, len(dataset.inventory), sil, draws=32, rng=derive_rng(rc.seed, "baseline", split)
    )

    eval_dir = eval_dir or _p(out, "eval")
    os.makedirs(eval_dir, exist_ok=True)
    report = os.path.join(eval_dir, f"report_{split}.csv")
    with open(report, "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "distance", "ref_len", "per"])
        for uid, dist, n in rows:
            wr.writerow([uid, dist, n, ""])
        wr.writerow(["ALL", sum(r[1] for r in rows), sum(r[2] for r in rows), repr(corpus_per)])
    _write_meta(
        report,
        "evaluate",
        cfg_mod.train_hash(rc),
        extra={"split": split, "per": repr(corpus_per), "random_baseline_per": repr(baseline), "checkpoint": os.path.basename(checkpoint)},
    )
    print(f"evaluate[{split}]: PER {corpus_per:.4f} (random-decode baseline {baseline:.4f}) -> {report}")
    return {"per": corpus_per, "baseline_per": baseline, "report": report, "checkpoint": checkpoint}


def _ablate_variant(rc: RunConfig, out: str, variant: str) -> dict:
    vrc = rc if variant == "full" else cfg_mod.apply_ablation(rc, variant)
    vdir = _p(out, "ablate", variant)
    os.makedirs(vdir, exist_ok=True)
    run_dir = _p(vdir, "run")
    cmd_train(vrc, out, run_dir=run_dir)
    sel = _read_selection(run_dir)
    res = cmd_evaluate(vrc, out, split="dev", run_dir=run_dir, eval_dir=_p(vdir, "eval"))
    return {
        "variant": variant,
        "selected_step": sel["selected_step"],
        "dev_per": res["per"],
        "baseline_per": res["baseline_per"],
        "lm_nll": sel.get("lm_nll", ""),
        "vocab_usage": sel.get("vocab_usage", ""),
    }


def cmd_ablate(rc: RunConfig, out: str, variants: list[str]) -> str:
    # upstream stages run once and are shared by every variant
    try:
        _require(manifest_path(out), "gen-data", cfg_mod.dataset_hash(rc))
    except StageDependencyError:
        cmd_gen_data(rc, out)
    try:
        _require(lm_path(out), "train-lm", cfg_mod.lm_hash(rc))
    except StageDependencyError:
        cmd_train_lm(rc, out)

    # pools keyed by scoped hash: variants with identical sampling share one
    for variant in variants:
        vrc = rc if variant == "full" else cfg_mod.apply_ablation(rc, variant)
        path = pool_path(out, vrc)
        if not os.path.exists(path):
            cmd_sample_refs(vrc, out)

    workers = int(os.environ.get("DGU_THREADS", "1"))
    results = []
    if workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_ablate_variant, rc, out, v) for v in variants]
            results = [f.result() for f in futs]
    else:
        for v in variants:
            results.append(_ablate_variant(rc, out, v))

    order = {v: i for i, v in enumerate(variants)}
    results.sort(key=lambda r: order[r["variant"]])
    path = _p(out, "ablate", "comparison.csv")
    with open(path, "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["variant", "selected_step", "dev_per", "baseline_per", "lm_nll", "vocab_usage"])
        for r in results:
            wr.writerow([r["variant"], r["selected_step"], repr(r["dev_per"]), repr(r["baseline_per"]), r["lm_nll"], r["vocab_usage"]])
    _write_meta(path, "ablate", cfg_mod.train_hash(rc))
    print(f"ablate: {len(results)} runs -> {path}")
    return path


# --------------------------------------------------------------------------
# argument handling


def _resolve_config(args, apply_ablations: bool = True) -> RunConfig:
    cfg_file = args.config
    if cfg_file is None:
        candidate = _p(args.out, "config.txt")
        if os.path.exists(candidate):
            cfg_file = candidate
    rc = cfg_mod.read_config(cfg_file) if cfg_file else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if overrides:
        rc = cfg_mod.with_overrides(rc, overrides)
    if args.seed is not None:
        rc = cfg_mod.with_seed(rc, args.seed)
    if apply_ablations:
        for name in args.ablate or []:
            rc = cfg_mod.apply_ablation(rc, name)
    return rc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgupr", description="diffusion-GAN unsupervised phoneme recognition, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, hlp in (
        ("gen-data", "synthesise dataset splits and the unlabeled text corpus"),
        ("train-lm", "pretrain the masked phoneme language model"),
        ("sample-refs", "sample the pseudo-reference pool offline"),
        ("train", "adversarial training with the adaptive diffusion horizon"),
        ("evaluate", "decode a split and report phoneme error rate"),
        ("ablate", "run the ablation grid and emit a comparison table"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", default=None, help="key=value config file (default: <out>/config.txt if present)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--ablate", action="append", metavar="NAME", help="apply an ablation flag (repeatable)")
        if name == "evaluate":
            p.add_argument("--split", default="dev", help="dataset split to score (default dev)")
            p.add_argument("--checkpoint", default=None, help="weights file (default: the selected checkpoint)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = _resolve_config(args, apply_ablations=args.command != "ablate")
        os.makedirs(args.out, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(rc, args.out)
        elif args.command == "train-lm":
            cmd_train_lm(rc, args.out)
        elif args.command == "sample-refs":
            cmd_sample_refs(rc, args.out)
        elif args.command == "train":
            cmd_train(rc, args.out)
        elif args.command == "evaluate":
            cmd_evaluate(rc, args.out, split=args.split, checkpoint=args.checkpoint)
        elif args.command == "ablate":
            variants = ["full", *(args.ablate or ABLATIONS)]
            cmd_ablate(rc, args.out, variants)
    except (ConfigError, StageDependencyError, training.ProvisioningError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line machine-parsable contract
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
