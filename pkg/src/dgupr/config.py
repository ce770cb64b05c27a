"""Run configuration: validated dataclasses, plain key=value files, and
scoped stage hashes.

Each pipeline stage stamps its outputs with a hash covering exactly the
configuration that can change that artifact (plus the upstream stage's
hash), so ablation variants can share a dataset and language model while
genuinely incompatible artifacts are refused.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


ABLATIONS = ("no_bert", "no_length", "no_tdisc", "no_unet")


@dataclass(frozen=True)
class DataConfig:
    vocab: int = 8  # real phonemes; SIL is extra
    n_train: int = 200
    n_dev: int = 40
    n_eval: int = 40
    n_text: int = 600
    n_words: int = 24
    word_len_min: int = 2
    word_len_max: int = 4
    sent_words_min: int = 2
    sent_words_max: int = 6
    d_raw: int = 32
    dur_min: int = 2
    dur_max: int = 4
    noise_sd: float = 0.1

    def __post_init__(self):
        if self.vocab < 3:
            raise ConfigError("need at least 3 real phonemes")
        if min(self.n_train, self.n_dev, self.n_eval, self.n_text) < 1:
            raise ConfigError("every split needs at least one sentence")
        if not (1 <= self.word_len_min <= self.word_len_max):
            raise ConfigError("bad word length range")
        if not (1 <= self.sent_words_min <= self.sent_words_max):
            raise ConfigError("bad sentence length range")
        if not (1 <= self.dur_min <= self.dur_max):
            raise ConfigError("bad duration range")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")


@dataclass(frozen=True)
class FeatureConfig:
    kmeans_k: int = 16
    kmeans_iters: int = 25
    d_pca: int = 16

    def __post_init__(self):
        if self.kmeans_k < 1 or self.kmeans_iters < 1 or self.d_pca < 1:
            raise ConfigError("feature parameters must be positive")


@dataclass(frozen=True)
class LmConfig:
    width: int = 64
    heads: int = 2
    blocks: int = 2
    ffn: int = 128
    max_len: int = 160
    mask_frac: float = 0.15
    steps: int = 400
    batch: int = 16
    lr: float = 1e-3
    holdout_frac: float = 0.1

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError("lm width must divide evenly into heads")
        if not 0.0 < self.mask_frac < 1.0:
            raise ConfigError("mask_frac must be in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Every loss weight and controller constant in one validated record."""

    eta: float = 1.0
    gamma: float = 1.5
    lam: float = 1.5
    batch: int = 16  # B
    a_i: int = 4
    a_k: int = 100
    d_target: float = 0.6
    beta0: float = 1e-4
    betaT: float = 1e-2
    t_min: int = 5
    t_max: int = 100
    p_sil: float = 0.25
    a: int = 5
    epochs: int = 20  # E
    sweeps: int = 4
    bert_sampling: bool = True
    length_guiding: bool = True
    t_discriminators: bool = True
    use_unet: bool = True
    disc_bank: bool = False
    lr_g: float = 5e-4
    lr_d: float = 3e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    d_per_g: int = 1  # discriminator batches per generator batch
    gen_kernel: int = 5
    disc_width: int = 64
    disc_kernel: int = 3
    unet_down: tuple[int, ...] = (64, 32, 16, 8)
    unet_up: tuple[int, ...] = (8, 16)
    unet_kernel: int = 3
    lrelu: float = 0.2
    eval_every: int = 64
    usage_floor: float = 0.8
    dtype: str = "float64"

    def __post_init__(self):
        if min(self.eta, self.gamma, self.lam) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.batch < 1 or self.a < 1 or self.epochs < 1 or self.sweeps < 1:
            raise ConfigError("batch, a, epochs and sweeps must be >= 1")
        if self.d_per_g < 1:
            raise ConfigError("d_per_g must be >= 1")
        if self.a_i < 1 or self.a_k < 1:
            raise ConfigError("a_i and a_k must be >= 1")
        if not (0.0 < self.beta0 < self.betaT < 1.0):
            raise ConfigError("need 0 < beta0 < betaT < 1")
        if not (0 <= self.t_min <= self.t_max):
            raise ConfigError("need 0 <= t_min <= t_max")
        if not 0.0 <= self.p_sil <= 1.0:
            raise ConfigError("p_sil must be in [0, 1]")
        if self.gen_kernel % 2 == 0 or self.disc_kernel % 2 == 0 or self.unet_kernel % 2 == 0:
            raise ConfigError("kernel widths must be odd")
        if len(self.unet_down) != 4 or len(self.unet_up) != 2:
            raise ConfigError("unet needs 4 down widths and 2 up widths")
        if self.unet_up[0] != self.unet_down[3] or self.unet_up[1] != self.unet_down[2]:
            raise ConfigError("unet up widths must mirror the last two down widths")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0.0 <= self.usage_floor <= 1.0:
            raise ConfigError("usage_floor must be in [0, 1]")

    @property
    def c_step(self) -> float:
        return self.batch * self.a_i / self.a_k


@dataclass(frozen=True)
class RunConfig:
    seed: int = 20260809
    data: DataConfig = field(default_factory=DataConfig)
    feat: FeatureConfig = field(default_factory=FeatureConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"data": DataConfig, "feat": FeatureConfig, "lm": LmConfig, "train": TrainConfig}


def _parse_value(ftype, raw: str):
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw
    # tuple of ints
    return tuple(int(p) for p in raw.split(",") if p.strip())


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool}.get(t, tuple)
        out[f.name] = t
    return out


def config_from_pairs(pairs: dict[str, str]) -> RunConfig:
    seed = None
    buckets: dict[str, dict[str, object]] = {k: {} for k in _SECTIONS}
    for key, raw in pairs.items():
        if key == "seed":
            seed = int(raw)
            continue
        if "." not in key:
            raise ConfigError(f"unknown configuration key {key!r}")
        sec, name = key.split(".", 1)
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown configuration section {sec!r}")
        types = _field_types(_SECTIONS[sec])
        if name not in types:
            raise ConfigError(f"unknown configuration key {key!r}")
        buckets[sec][name] = _parse_value(types[name], raw)
    rc = RunConfig(
        seed=seed if seed is not None else RunConfig.seed,
        data=DataConfig(**buckets["data"]),
        feat=FeatureConfig(**buckets["feat"]),
        lm=LmConfig(**buckets["lm"]),
        train=TrainConfig(**buckets["train"]),
    )
    return rc


def read_config(path) -> RunConfig:
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            pairs[key] = raw
    return config_from_pairs(pairs)


def with_overrides(rc: RunConfig, overrides: dict[str, str]) -> RunConfig:
    pairs = dict(to_pairs(rc))
    pairs.update(overrides)
    return config_from_pairs(pairs)


def with_seed(rc: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(rc, seed=seed)


def apply_ablation(rc: RunConfig, name: str) -> RunConfig:
    flag = {
        "no_bert": {"bert_sampling": False},
        "no_length": {"length_guiding": False},
        "no_tdisc": {"t_discriminators": False},
        "no_unet": {"use_unet": False},
    }.get(name)
    if flag is None:
        raise ConfigError(f"unknown ablation {name!r} (choose from {', '.join(ABLATIONS)})")
    return dataclasses.replace(rc, train=dataclasses.replace(rc.train, **flag))


# --------------------------------------------------------------------------
# canonical serialisation and scoped hashes


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_pairs(rc: RunConfig) -> list[tuple[str, str]]:
    pairs = [("seed", str(rc.seed))]
    for sec, obj in (("data", rc.data), ("feat", rc.feat), ("lm", rc.lm), ("train", rc.train)):
        for f in fields(obj):
            pairs.append((f"{sec}.{f.name}", _fmt(getattr(obj, f.name))))
    return pairs


def write_config(path, rc: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in to_pairs(rc):
            f.write(f"{k}={v}\n")


def _hash_lines(lines) -> str:
    h = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    return h[:16]


def _section_lines(rc: RunConfig, sec: str, names=None) -> list[str]:
    obj = {"data": rc.data, "feat": rc.feat, "lm": rc.lm, "train": rc.train}[sec]
    out = []
    for f in fields(obj):
        if names is None or f.name in names:
            out.append(f"{sec}.{f.name}={_fmt(getattr(obj, f.name))}")
    return sorted(out)


def dataset_hash(rc: RunConfig) -> str:
    lines = [f"seed={rc.seed}"] + _section_lines(rc, "data") + _section_lines(rc, "train", {"p_sil"})
    return _hash_lines(lines)


def lm_hash(rc: RunConfig) -> str:
    return _hash_lines([f"up={dataset_hash(rc)}"] + _section_lines(rc, "lm"))


def pool_hash(rc: RunConfig) -> str:
    names = {"a", "epochs", "sweeps", "p_sil", "bert_sampling", "length_guiding"}
    lines = [f"up={lm_hash(rc)}"] + _section_lines(rc, "feat") + _section_lines(rc, "train", names)
    return _hash_lines(lines)


def train_hash(rc: RunConfig) -> str:
    return _hash_lines([f"up={pool_hash(rc)}"] + _section_lines(rc, "train"))
