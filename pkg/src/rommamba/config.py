"""INI-style run configuration.

Sections and keys mirror the dataclass fields::

    [config]    version
    [model]     ModelConfig fields except the router ones
    [router]    num_experts, top_k, renormalize, jitter_eps, balance_alpha, expertized, routing_mode
    [train]     TrainConfig fields
    [data]      corpus, val_fraction, split_seed

Unknown sections or keys are rejected with the closest valid name.
"""
import configparser
import difflib
import io
import typing
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

SCHEMA_VERSION = 1
ROUTER_KEYS = ("num_experts", "top_k", "renormalize", "jitter_eps", "balance_alpha", "expertized", "routing_mode")


@dataclass
class DataConfig:
    corpus: str = "synthetic:200000"
    val_fraction: float = 0.1
    split_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _schema():
    model_keys = [f.name for f in fields(ModelConfig) if f.name not in ROUTER_KEYS]
    return {
        "config": ["version"],
        "model": model_keys,
        "router": list(ROUTER_KEYS),
        "train": [f.name for f in fields(TrainConfig)],
        "data": [f.name for f in fields(DataConfig)],
    }


def _nearest(name, options):
    match = difflib.get_close_matches(name, options, n=1, cutoff=0.0)
    return match[0] if match else None


def _convert(cls, key, raw):
    hint = typing.get_type_hints(cls)[key]
    if typing.get_origin(hint) is typing.Union:
        if raw.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if hint is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key} = {raw!r} is not a valid {hint.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    schema = _schema()
    for section in cp.sections():
        if section not in schema:
            raise ConfigError(f"unknown section [{section}]; did you mean [{_nearest(section, list(schema))}]?")
        for key in cp[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; did you mean {_nearest(key, schema[section])!r}?")
    if cp.has_option("config", "version"):
        version = cp.get("config", "version").strip()
        if version != str(SCHEMA_VERSION):
            raise ConfigError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")

    def values(cls, sections):
        out = {}
        for s in sections:
            if cp.has_section(s):
                for key, raw in cp[s].items():
                    out[key] = _convert(cls, key, raw)
        return out

    model = ModelConfig(**values(ModelConfig, ("model", "router")))
    train = TrainConfig(**values(TrainConfig, ("train",)))
    data = DataConfig(**values(DataConfig, ("data",)))
    return RunConfig(model, train, data)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def dump_config(run: RunConfig) -> str:
    """Serialize back to the INI schema (round-trips through :func:`parse_config`)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["config"] = {"version": str(SCHEMA_VERSION)}
    md = run.model.to_dict()
    cp["model"] = {k: str(v) for k, v in md.items() if k not in ROUTER_KEYS}
    cp["router"] = {k: str(md[k]) for k in ROUTER_KEYS}
    cp["train"] = {k: ("none" if v is None else str(v)) for k, v in run.train.to_dict().items()}
    cp["data"] = {f.name: str(getattr(run.data, f.name)) for f in fields(DataConfig)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
