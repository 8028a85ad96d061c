"""Run configuration: an INI file with one section per stage.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments.  Values are parsed according to the type of the key's
default (int, float, bool, str, or a comma-separated list).  Unknown
sections or keys are rejected with the list of valid ones.  A single
``run.seed`` drives every random stream.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from nere.annindex import IndexConfig
from nere.errors import ConfigError
from nere.pipeline import EmbedConfig
from nere.recsys.model import VARIANTS, ModelConfig
from nere.recsys.training import TrainConfig
from nere.synthgen import SynthConfig


@dataclass
class RunSection:
    seed: int = 7
    out: str = "nere-out"


@dataclass
class FeaturesSection:
    T: int = 5
    test_fraction: float = 0.2


@dataclass
class VariantSection:
    variant: str = "both"


@dataclass
class RecommendSection:
    m: int = 100


@dataclass
class EvaluateSection:
    k: int = 100
    mf_d: int = 32
    mf_epochs: int = 10
    mf_lr: float = 0.01
    mf_neg_ratio: int = 4


@dataclass
class AblateSection:
    variants: tuple = VARIANTS


@dataclass
class SweepSection:
    lengths: tuple = (1, 2, 3, 4)
    variant: str = "both"


@dataclass
class PathsSection:
    catalog: str = "synth/catalog.jsonl"
    sessions: str = "synth/sessions.jsonl"
    glove: str = "embed/glove.txt"
    set_vectors: str = "embed/set_vectors.tensor"
    set_ids: str = "embed/set_ids.tensor"
    encoders: str = "features/encoders.json"
    tensors: str = "features/tensors"
    split: str = "features/split.json"
    model: str = "train/model.ckpt"
    history: str = "train/history.jsonl"
    graph: str = "index/graph.knng"
    cache: str = "recommend/cache.jsonl"
    report: str = "evaluate/report.jsonl"
    heatmap: str = "evaluate/attention"
    ablation: str = "ablate/report.jsonl"
    sweep: str = "sweep/report.jsonl"
    manifests: str = "manifests"


# seeds are derived from run.seed, so per-module seed fields are not user keys
_HIDDEN = {"synth": {"rng_seed"}, "embed": {"seed"}, "train": {"seed"}, "index": {"rng_seed"}}

SECTIONS = {
    "run": RunSection,
    "synth": SynthConfig,
    "embed": EmbedConfig,
    "features": FeaturesSection,
    "model": ModelConfig,
    "variant": VariantSection,
    "train": TrainConfig,
    "index": IndexConfig,
    "recommend": RecommendSection,
    "evaluate": EvaluateSection,
    "ablate": AblateSection,
    "sweep": SweepSection,
    "paths": PathsSection,
}


def valid_keys(section):
    return [f.name for f in fields(SECTIONS[section]) if f.name not in _HIDDEN.get(section, ())]


def _parse_value(raw: str, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {name: cls() for name, cls in SECTIONS.items()})

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def seed(self):
        return self.sections["run"].seed

    def apply(self, section, key, raw, where="override"):
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section [{section}]; valid sections: {', '.join(SECTIONS)}")
        keys = valid_keys(section)
        if key not in keys:
            raise ConfigError(f"{where}: unknown key {section}.{key}; valid keys: {', '.join(keys)}")
        obj = self.sections[section]
        value = _parse_value(raw, getattr(SECTIONS[section](), key), f"{where} {section}.{key}")
        self.sections[section] = dataclasses.replace(obj, **{key: value})

    # -- derived module configs (seeded from run.seed) -------------------------------

    def synth_config(self):
        return dataclasses.replace(self.sections["synth"], rng_seed=self.seed)

    def embed_config(self):
        return dataclasses.replace(self.sections["embed"], seed=self.seed)

    def train_config(self):
        return dataclasses.replace(self.sections["train"], seed=self.seed)

    def index_config(self):
        return dataclasses.replace(self.sections["index"], rng_seed=self.seed)

    def validate(self):
        self.synth_config().validate()
        self.train_config().validate()
        self.index_config().validate()
        self.sections["model"].validate()
        feats = self.sections["features"]
        if feats.T < 2:
            raise ConfigError("features.T must be >= 2")
        if not 0.0 < feats.test_fraction < 1.0:
            raise ConfigError("features.test_fraction must lie in (0, 1)")
        if self.sections["model"].input_len > feats.T - 1:
            raise ConfigError("model.input_len must be <= features.T - 1")
        if self.sections["variant"].variant not in VARIANTS:
            raise ConfigError(f"variant.variant must be one of {VARIANTS}")
        if self.sections["recommend"].m < 1 or self.sections["evaluate"].k < 1:
            raise ConfigError("recommend.m and evaluate.k must be >= 1")

    def path(self, name, out=None):
        base = Path(out or self.sections["run"].out)
        return base / getattr(self.sections["paths"], name)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            obj = self.sections[name]
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(obj).items() if k in valid_keys(name)}
        return out

    def to_ini(self):
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                lines.append(f"{k} = {_format_value(tuple(v) if isinstance(v, list) else v)}")
            lines.append("")
        return "\n".join(lines)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def load_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    """Defaults <- config file <- ``--set section.key=value`` <- ``--seed`` / ``--out``."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.apply(section, key, raw, where=str(path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg.apply(section, key, raw)
    if seed is not None:
        cfg.apply("run", "seed", str(seed))
    if out is not None:
        cfg.apply("run", "out", str(out))
    cfg.validate()
    return cfg
