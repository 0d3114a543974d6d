"""One key-value run configuration covering every pipeline stage."""

import sys
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .synthetic import SynthesisConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    recall_fraction: float = 0.10
    validation_fraction: float = 0.0  # share of --data held out by `train`
    top_k_merchants: int = 3
    batch_size: int = 256
    bench_T: tuple = (256, 512, 1024, 2048)
    bench_M: int = 64
    bench_trials: int = 5

    def __post_init__(self):
        object.__setattr__(self, "bench_T", tuple(int(t) for t in self.bench_T))
        if not 0 < self.recall_fraction <= 1:
            raise ConfigError("eval.recall_fraction must lie in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("eval.validation_fraction must lie in [0, 1)")
        if self.top_k_merchants < 1 or self.batch_size < 1 or self.bench_M < 1 or self.bench_trials < 1:
            raise ConfigError("eval sizes must be >= 1")


# config-file key -> ModelConfig field
_FOLD_KEYS = {"M": "M", "L_max": "L_max"}
_ENCODE_KEYS = {
    "hash_buckets": "hash_buckets",
    "token_dim": "token_dim",
    "d_model": "d_model",
    "share_token_table": "share_token_table",
    "use_amount": "use_amount",
    "use_timing": "use_timing",
    "use_description": "use_description",
}
_SYNTH_KEYS = {f.name for f in fields(SynthesisConfig)} - {"seed", "window_end"}


def _names(cls):
    return {f.name for f in fields(cls)}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: dict = field(default_factory=dict)
    seed: int | None = None
    workers: int = 1

    def synthesis(self, seed=None, days=None):
        kw = dict(self.data)
        if days is not None:
            kw["t_span_days"] = days
        s = seed if seed is not None else self.seed
        return SynthesisConfig(seed=0 if s is None else s, **kw)

    def to_dict(self):
        m = self.model.to_dict()
        return {
            "fold": {k: m[v] for k, v in _FOLD_KEYS.items()},
            "encode": {k: m[v] for k, v in _ENCODE_KEYS.items()},
            "model": {k: v for k, v in m.items() if k not in _FOLD_KEYS.values() and k not in _ENCODE_KEYS.values()},
            "train": asdict(self.train),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
            "data": dict(self.data),
            "seed": self.seed,
            "workers": self.workers,
        }


def _section(raw, name, allowed):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(f'{name}.{k}' for k in unknown)}")
    return sec


def from_mapping(raw, seed=None, workers=None):
    """Build a RunConfig from parsed TOML; unknown sections or keys are errors."""
    sections = {"fold", "encode", "model", "train", "eval", "data"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    model_only = _names(ModelConfig) - set(_FOLD_KEYS.values()) - set(_ENCODE_KEYS.values())
    # encode.d_model and model.d_model name the same width
    fold = _section(raw, "fold", _FOLD_KEYS)
    encode = _section(raw, "encode", _ENCODE_KEYS)
    model = _section(raw, "model", model_only | {"d_model"})
    if "d_model" in model and "d_model" in encode and model["d_model"] != encode["d_model"]:
        raise ConfigError("encode.d_model and model.d_model disagree")
    train = dict(_section(raw, "train", _names(TrainConfig)))
    ev = _section(raw, "eval", _names(EvalConfig))
    data = dict(_section(raw, "data", _SYNTH_KEYS))
    kw = {_FOLD_KEYS[k]: v for k, v in fold.items()}
    kw.update({_ENCODE_KEYS[k]: v for k, v in encode.items()})
    kw.update(model)
    if seed is not None:
        kw["seed"] = seed
        train["seed"] = seed
    if "pattern_mix" in data:
        data["pattern_mix"] = tuple(data["pattern_mix"])
    try:
        SynthesisConfig(**data)
        return RunConfig(
            ModelConfig(**kw),
            TrainConfig(**train),
            EvalConfig(**ev),
            data,
            seed,
            1 if workers is None else int(workers),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, seed=None, workers=None):
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from None
    cfg = from_mapping(raw, seed, workers)
    if cfg.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg
