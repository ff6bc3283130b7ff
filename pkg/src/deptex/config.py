"""Pipeline configuration: one TOML file, dotted command-line overrides, a stable hash.

Sections are ``dataset``, ``backbone``, ``head``, ``train``, ``tsne`` and
``regressor``; a top-level ``seed`` feeds every seeded stage. Unknown keys are
rejected. The hash covers the fully resolved configuration, so two runs share
a hash exactly when every setting that can influence their outputs agrees.
"""
import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig
from .errors import ConfigError
from .head import HeadConfig
from .manifold import RegressorConfig
from .trainer import TrainConfig
from .tsne import TsneConfig


@dataclass
class DatasetConfig:
    root: str = "data"
    per_class: int = 200
    size: int = 64
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.per_class < 1 or self.size < 8:
            raise ConfigError(f"dataset.per_class must be >= 1 and dataset.size >= 8, got {self.per_class}, {self.size}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"dataset.train_fraction must lie in (0, 1], got {self.train_fraction}")


@dataclass
class BackboneSection:
    preset: str = "paper"  # paper | mini
    widths: list = None
    blocks: list = None

    def __post_init__(self):
        if self.preset not in ("paper", "mini"):
            raise ConfigError(f"backbone.preset must be 'paper' or 'mini', got {self.preset!r}")

    def build(self, input_size):
        base = BackboneConfig.paper() if self.preset == "paper" else BackboneConfig.mini()
        values = dict(base.to_dict(), input_size=(input_size, input_size))
        if self.widths is not None:
            values.update(widths=[int(w) for w in self.widths], stem_channels=int(self.widths[0]))
        if self.blocks is not None:
            values["blocks"] = [int(b) for b in self.blocks]
        return BackboneConfig(**values)


SECTIONS = {
    "dataset": DatasetConfig,
    "backbone": BackboneSection,
    "head": HeadConfig,
    "train": TrainConfig,
    "tsne": TsneConfig,
    "regressor": RegressorConfig,
}
SEEDED = ("train", "tsne", "regressor")


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)

    def backbone_config(self):
        return self.backbone.build(self.train.train_input)

    def to_dict(self):
        """Round-trips through :func:`from_dict`; the per-stage seeds follow ``seed``."""
        data = asdict(self)
        for name in SEEDED:
            data[name].pop("seed")
        return data

    def hash(self):
        return config_hash(self.to_dict())


def config_hash(data):
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def parse_value(text):
    """A TOML scalar or array if ``text`` parses as one, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
    node[parts[-1]] = parse_value(value.strip())


def _section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if name in SEEDED else set())
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, ArithmeticError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def from_dict(data):
    data = copy.deepcopy(data)
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}; allowed: seed, {', '.join(SECTIONS)}")
    seed = data.pop("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    built = {}
    for name, cls in SECTIONS.items():
        values = data.get(name, {})
        section = _section(name, cls, values)
        if name in SEEDED:
            section.seed = seed
        built[name] = section
    return PipelineConfig(seed=seed, **built)


def load(path=None, overrides=(), seed=None):
    """Read ``path`` (or start from defaults), apply ``key=value`` overrides, then ``seed``."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = int(seed)
    return from_dict(data)
