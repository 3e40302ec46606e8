"""Run configuration: a flat ``key = value`` text document.

The format is deliberately minimal so any tool can read it: one key per
line, ``#`` comments, dotted section prefixes, integers/floats/booleans/
comma-separated integer lists, and a mandatory ``schema_version`` field.
``parse(serialize(config))`` reproduces the config exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import SyntheticTaskSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import TERM_NAMES, LossFlags, default_weights
from .trainer import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EvalSettings:
    mrr_cutoff: int = 10
    recall_cutoffs: tuple[int, ...] = (5, 20, 50)
    scheme: str = "de"  # de | li
    split: str = "dev"  # train | dev | test

    def __post_init__(self):
        if self.mrr_cutoff < 1 or any(k < 1 for k in self.recall_cutoffs):
            raise ConfigError("metric cutoffs must be >= 1")
        if self.scheme not in ("de", "li"):
            raise ConfigError(f"unknown eval scheme {self.scheme!r}")
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"unknown eval split {self.split!r}")


@dataclass(frozen=True)
class MineSettings:
    top_m: int = 64
    n_negatives: int = 7

    def __post_init__(self):
        if self.top_m < 1 or self.n_negatives < 1:
            raise ConfigError("mining sizes must be >= 1")


@dataclass(frozen=True)
class DataPaths:
    """Explicit input paths; unset entries fall back to the run directory."""

    corpus: str | None = None
    queries_train: str | None = None
    queries_dev: str | None = None
    queries_test: str | None = None
    qrels_train: str | None = None
    qrels_dev: str | None = None
    qrels_test: str | None = None
    mined: str | None = None
    checkpoint: str | None = None
    cross_checkpoint: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cross: EncoderConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskSpec | None = field(default_factory=SyntheticTaskSpec)
    data: DataPaths = field(default_factory=DataPaths)
    eval: EvalSettings = field(default_factory=EvalSettings)
    mine: MineSettings = field(default_factory=MineSettings)


_ENCODER_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len", "dropout_p")
_TRAIN_FIELDS = (
    "step",
    "batch_queries",
    "n_negatives",
    "epochs",
    "learning_rate",
    "n_shards",
    "cross_batch",
    "id_prime",
    "temperature",
    "normalize_late_tokens",
    "eval_every",
)
_FLAG_FIELDS = tuple(f.name for f in fields(LossFlags))
_TASK_FIELDS = (
    "vocab_size",
    "n_topics",
    "passages_per_topic",
    "passage_len",
    "query_len",
    "query_noise_rate",
    "n_train_queries",
    "n_dev_queries",
    "n_test_queries",
    "topic_pool_size",
    "seed",
)
_DATA_FIELDS = tuple(f.name for f in fields(DataPaths))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_scalar(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return tuple(_parse_scalar(part) for part in text.split(",") if part)
    return text


def to_flat(cfg: RunConfig) -> dict[str, object]:
    flat: dict[str, object] = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
    }
    for name in _ENCODER_FIELDS:
        flat[f"encoder.{name}"] = getattr(cfg.encoder, name)
    flat["cross.enabled"] = cfg.cross is not None
    if cfg.cross is not None:
        for name in _ENCODER_FIELDS:
            flat[f"cross.{name}"] = getattr(cfg.cross, name)
    for name in _TRAIN_FIELDS:
        flat[f"train.{name}"] = getattr(cfg.train, name)
    for name in _FLAG_FIELDS:
        flat[f"flags.{name}"] = getattr(cfg.train.flags, name)
    weights = default_weights()
    weights.update(cfg.train.weights)
    for name in TERM_NAMES:
        flat[f"weights.{name}"] = weights[name]
    flat["task.enabled"] = cfg.task is not None
    if cfg.task is not None:
        for name in _TASK_FIELDS:
            flat[f"task.{name}"] = getattr(cfg.task, name)
    for name in _DATA_FIELDS:
        value = getattr(cfg.data, name)
        if value is not None:
            flat[f"data.{name}"] = value
    flat["eval.mrr_cutoff"] = cfg.eval.mrr_cutoff
    flat["eval.recall_cutoffs"] = cfg.eval.recall_cutoffs
    flat["eval.scheme"] = cfg.eval.scheme
    flat["eval.split"] = cfg.eval.split
    flat["mine.top_m"] = cfg.mine.top_m
    flat["mine.n_negatives"] = cfg.mine.n_negatives
    return flat


def _take(flat: dict, prefix: str, names: tuple[str, ...], coerce: dict | None = None) -> dict:
    out = {}
    for name in names:
        key = f"{prefix}.{name}"
        if key in flat:
            value = flat.pop(key)
            if coerce and name in coerce:
                value = coerce[name](value)
            out[name] = value
    return out


def _as_int_tuple(value) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


def _as_pair(value) -> tuple[int, int]:
    pair = _as_int_tuple(value)
    if len(pair) != 2:
        raise ConfigError(f"expected a low,high pair, got {value!r}")
    return (pair[0], pair[1])


def from_flat(flat: dict[str, object]) -> RunConfig:
    flat = dict(flat)
    version = flat.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {version!r}")
    seed = int(flat.pop("seed", 0))
    out_dir = str(flat.pop("out_dir", "runs/default"))

    encoder = EncoderConfig(**_take(flat, "encoder", _ENCODER_FIELDS, {"dropout_p": float}))
    cross = None
    if flat.pop("cross.enabled", False):
        cross = EncoderConfig(**_take(flat, "cross", _ENCODER_FIELDS, {"dropout_p": float}))

    flag_kwargs = _take(flat, "flags", _FLAG_FIELDS)
    weights = {
        name: float(value)
        for name, value in _take(flat, "weights", TERM_NAMES, {n: float for n in TERM_NAMES}).items()
    }
    train_kwargs = _take(
        flat,
        "train",
        _TRAIN_FIELDS,
        {"learning_rate": float, "temperature": float},
    )
    train = TrainConfig(
        flags=LossFlags(**flag_kwargs), weights=weights, seed=seed, **train_kwargs
    )

    task = None
    if flat.pop("task.enabled", False):
        task_kwargs = _take(
            flat,
            "task",
            _TASK_FIELDS,
            {
                "passage_len": _as_pair,
                "query_len": _as_pair,
                "query_noise_rate": float,
            },
        )
        task = SyntheticTaskSpec(**task_kwargs)

    data = DataPaths(**{k: str(v) for k, v in _take(flat, "data", _DATA_FIELDS).items()})
    eval_kwargs = _take(
        flat,
        "eval",
        ("mrr_cutoff", "recall_cutoffs", "scheme", "split"),
        {"recall_cutoffs": _as_int_tuple},
    )
    eval_settings = EvalSettings(**eval_kwargs)
    mine = MineSettings(**_take(flat, "mine", ("top_m", "n_negatives")))
    if flat:
        raise ConfigError(f"unknown config keys: {sorted(flat)}")
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        encoder=encoder,
        cross=cross,
        train=train,
        task=task,
        data=data,
        eval=eval_settings,
        mine=mine,
    )


def dumps(cfg: RunConfig) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    flat: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if key in flat:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        flat[key] = _parse_scalar(value.strip())
    return from_flat(flat)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def with_overrides(cfg: RunConfig, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Apply command-line overrides; the seed also propagates to training."""
    if seed is not None:
        cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
    else:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg
