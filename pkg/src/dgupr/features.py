"""Segment sequences from synthetic frame features.

The front-end stand-in: a fixed per-dataset embedding table turns hidden
phoneme strings into noisy frame sequences.  k-means over raw frames
yields per-frame cluster ids; runs of equal ids are mean-pooled into
segments; PCA compresses; a second pooling inserts the mean of every
adjacent segment pair, stretching n segments to 2n-1 rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import binio


@dataclass
class Utterance:
    id: str
    hidden_phonemes: list[int]  # ground truth, used only by evaluation
    frames: np.ndarray  # (L_frames, d_raw)


@dataclass
class SegmentSequence:
    segments: np.ndarray  # (n_rows, d_pca) after both poolings
    source_id: str


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (k, d_raw)
    k: int


@dataclass
class PcaModel:
    mean: np.ndarray  # (d_raw,)
    projection: np.ndarray  # (d_raw, d_pca), orthonormal columns


@dataclass
class Dataset:
    inventory: list[str]  # phoneme names, SIL included at index 0
    seed: int
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    @property
    def sil_id(self) -> int:
        return self.inventory.index("SIL")


# --------------------------------------------------------------------------
# synthetic frames


def embedding_table(rng: np.random.Generator, n_symbols: int, d_raw: int) -> np.ndarray:
    """Fixed phoneme-id -> d_raw vector table, one per dataset."""
    return rng.normal(0.0, 1.0, size=(n_symbols, d_raw))


def synth_features(
    phonemes: list[int],
    rng: np.random.Generator,
    table: np.ndarray,
    dur_min: int,
    dur_max: int,
    noise_sd: float,
    utt_id: str = "",
) -> Utterance:
    """Emit dur ~ U{dur_min..dur_max} noisy copies of each phoneme embedding."""
    if len(phonemes) == 0:
        raise ValueError("empty phoneme sequence")
    rows = []
    for p in phonemes:
        dur = int(rng.integers(dur_min, dur_max + 1))
        base = np.tile(table[p], (dur, 1))
        if noise_sd > 0:
            base = base + rng.normal(0.0, noise_sd, size=base.shape)
        rows.append(base)
    return Utterance(id=utt_id, hidden_phonemes=list(phonemes), frames=np.concatenate(rows, axis=0))


# --------------------------------------------------------------------------
# k-means


def _wcss(frames: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum(np.square(frames - centroids[assign])))


def _assign(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = np.square(frames[:, None, :] - centroids[None, :, :]).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_fit(frames: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding; stops early when the
    assignment no longer changes."""
    n = frames.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} frames, got {n}")
    centroids = np.empty((k, frames.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = frames[first]
    d2 = np.square(frames - centroids[0]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = frames[idx]
        d2 = np.minimum(d2, np.square(frames - centroids[j]).sum(axis=1))

    assign = _assign(frames, centroids)
    for _ in range(iters):
        for j in range(k):
            mask = assign == j
            if mask.any():
                centroids[j] = frames[mask].mean(axis=0)
            else:
                # reseed an empty cluster with the worst-fit frame
                far = np.square(frames - centroids[assign]).sum(axis=1).argmax()
                centroids[j] = frames[far]
        new_assign = _assign(frames, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansModel(centroids=centroids, k=k)


def kmeans_assign(model: KMeansModel, frames: np.ndarray) -> np.ndarray:
    return _assign(frames, model.centroids)


# --------------------------------------------------------------------------
# PCA


def pca_fit(frames: np.ndarray, d_pca: int) -> PcaModel:
    n, d_raw = frames.shape
    if not (1 <= d_pca <= d_raw <= n):
        raise ValueError(f"need 1 <= d_pca <= d_raw <= n_frames, got d_pca={d_pca}, d_raw={d_raw}, n={n}")
    mean = frames.mean(axis=0)
    x = frames - mean
    cov = (x.T @ x) / max(1, n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    tol = max(1e-12, 1e-10 * max(evals[0], 0.0))
    if evals[d_pca - 1] <= tol:
        raise ValueError(f"covariance rank below d_pca={d_pca}")
    proj = evecs[:, :d_pca]
    # deterministic sign: largest-magnitude component of each column positive
    for j in range(d_pca):
        i = np.abs(proj[:, j]).argmax()
        if proj[i, j] < 0:
            proj[:, j] = -proj[:, j]
    return PcaModel(mean=mean, projection=np.ascontiguousarray(proj))


def pca_apply(model: PcaModel, frames: np.ndarray) -> np.ndarray:
    return (frames - model.mean) @ model.projection


# --------------------------------------------------------------------------
# pooling


def segment_merge(frames: np.ndarray, cluster_ids) -> np.ndarray:
    """Collapse maximal runs of equal cluster id to the mean of their frames."""
    ids = np.asarray(cluster_ids)
    if ids.shape[0] != frames.shape[0]:
        raise ValueError(f"{ids.shape[0]} cluster ids for {frames.shape[0]} frames")
    bounds = [0] + [i for i in range(1, len(ids)) if ids[i] != ids[i - 1]] + [len(ids)]
    return np.stack([frames[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])


def adjacent_pool(segments: np.ndarray) -> np.ndarray:
    """Insert the mean of each adjacent pair between them: n -> 2n-1 rows."""
    n = segments.shape[0]
    if n < 1:
        raise ValueError("need at least one segment")
    if n == 1:
        return segments.copy()
    out = np.empty((2 * n - 1, segments.shape[1]), dtype=segments.dtype)
    out[0::2] = segments
    out[1::2] = 0.5 * (segments[:-1] + segments[1:])
    return out


# --------------------------------------------------------------------------
# the fitted pipeline


@dataclass
class SegmentPipeline:
    kmeans: KMeansModel
    pca: PcaModel


def fit_pipeline(train_utts: list[Utterance], k: int, iters: int, d_pca: int, rng: np.random.Generator) -> SegmentPipeline:
    frames = np.concatenate([u.frames for u in train_utts], axis=0)
    km = kmeans_fit(frames, k, iters, rng)
    pca = pca_fit(frames, d_pca)
    return SegmentPipeline(kmeans=km, pca=pca)


def segment_sequence(pipe: SegmentPipeline, utt: Utterance) -> SegmentSequence:
    ids = kmeans_assign(pipe.kmeans, utt.frames)
    compressed = pca_apply(pipe.pca, utt.frames)
    merged = segment_merge(compressed, ids)
    pooled = adjacent_pool(merged)
    return SegmentSequence(segments=pooled, source_id=utt.id)


# --------------------------------------------------------------------------
# dataset persistence


def save_split(path, utts: list[Utterance], inventory: list[str]) -> None:
    with open(path, "wb") as f:
        for u in utts:
            binio.write_str(f, u.id)
            binio.write_str(f, " ".join(inventory[p] for p in u.hidden_phonemes))
            binio.write_matrix(f, u.frames)


def load_split(path, inventory: list[str]) -> list[Utterance]:
    index = {name: i for i, name in enumerate(inventory)}
    utts = []
    with open(path, "rb") as f:
        while not binio.at_eof(f):
            uid = binio.read_str(f)
            names = binio.read_str(f).split()
            frames = binio.read_matrix(f)
            utts.append(Utterance(id=uid, hidden_phonemes=[index[n] for n in names], frames=frames))
    return utts


def save_manifest(path, inventory: list[str], seed: int, split_files: dict[str, str]) -> None:
    lines = [f"seed={seed}"]
    for split in sorted(split_files):
        lines.append(f"split {split} {split_files[split]}")
    for name in inventory:
        lines.append(f"phoneme {name}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(manifest_path) -> Dataset:
    base = os.path.dirname(os.path.abspath(manifest_path))
    inventory: list[str] = []
    split_files: dict[str, str] = {}
    seed = 0
    with open(manifest_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("seed="):
                seed = int(line.split("=", 1)[1])
            elif line.startswith("split "):
                _, split, rel = line.split()
                split_files[split] = rel
            elif line.startswith("phoneme "):
                inventory.append(line.split(" ", 1)[1])
    ds = Dataset(inventory=inventory, seed=seed)
    for split, rel in split_files.items():
        ds.splits[split] = load_split(os.path.join(base, rel), inventory)
    return ds
