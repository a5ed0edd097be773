"""Plain-text run configuration: ``key = value`` lines under section headers.

Sections map onto the parameter dataclasses; unknown sections or keys are
errors. Values are coerced to the type of the field's default.
"""
import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .model import ToyUNetConfig
from .synth import SynthParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataParams:
    """How many bundles ``synth`` writes and how they are split."""
    count: int = 30
    val_count: int = 5
    test_count: int = 5
    noise_hu: float = 40.0
    blur: float = 0.8

    def __post_init__(self):
        if self.count < 1 or self.val_count < 0 or self.test_count < 0:
            raise ValueError("counts must be non-negative and count >= 1")
        if self.val_count + self.test_count >= self.count:
            raise ValueError("val_count + test_count must leave training volumes")


@dataclass(frozen=True)
class EvalParams:
    threshold: float = 0.5
    bd_frac: float = 0.8
    stride: int = 32
    post_lcc: bool = True

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 < self.bd_frac <= 1:
            raise ValueError("bd_frac must lie in (0, 1]")


# TrainConfig is one flat dataclass; its fields are grouped into sections here.
_TRAIN_SECTIONS = {
    "train": ("epochs", "warmup_epochs", "lr", "lr_drop_epoch", "lr_drop_factor", "beta1", "beta2",
              "adam_eps", "crops_per_epoch", "augment", "rotate_deg", "seed", "loss", "val_stride"),
    "loss": ("alpha_t", "beta_t", "lambda_fg", "epsilon", "lambda1", "lambda2", "delta0", "m", "nu_lr"),
    "cdt": ("lambda_cdt", "tau", "gamma", "kernel_size"),
}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthParams = field(default_factory=SynthParams)
    data: DataParams = field(default_factory=DataParams)
    model: ToyUNetConfig = field(default_factory=ToyUNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalParams = field(default_factory=EvalParams)

    def to_dict(self):
        return {k: asdict(getattr(self, k)) for k in ("synth", "data", "model", "train", "eval")}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def train_cfg(self):
        """TrainConfig with the evaluation threshold and BD fraction applied."""
        return replace(self.train, threshold=self.eval.threshold, bd_frac=self.eval.bd_frac)


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [int(p) for p in raw.replace("x", ",").split(",") if p.strip()]
            return tuple(parts * 3 if len(parts) == 1 else parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _section_fields(name):
    if name in _TRAIN_SECTIONS:
        return _TRAIN_SECTIONS[name]
    cls = {"synth": SynthParams, "data": DataParams, "model": ToyUNetConfig, "eval": EvalParams}.get(name)
    if cls is None:
        raise ConfigError(f"unknown section [{name}]")
    return tuple(f.name for f in fields(cls))


def _apply(cfg, sections):
    """Apply ``{section: {key: raw}}`` at once, so cross-field checks (such as
    warm-up shorter than the run) see every new value together."""
    changes = {}
    for section, values in sections.items():
        allowed = _section_fields(section)
        target = "train" if section in _TRAIN_SECTIONS else section
        obj = getattr(cfg, target)
        for key, raw in values.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            changes.setdefault(target, {})[key] = _coerce(raw, getattr(obj, key), f"{section}.{key}")
    for target, ch in changes.items():
        try:
            cfg = replace(cfg, **{target: replace(getattr(cfg, target), **ch)})
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{target}] {e}") from None
    return cfg


def parse_config(text, base=None):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0]) from None
    return _apply(base or RunConfig(), {section: dict(cp[section]) for section in cp.sections()})


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` as
    ``{"section.key": "value"}`` strings."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = open(path).read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        cfg = parse_config(text, cfg)
    grouped = {}
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        grouped.setdefault(section, {})[key] = str(raw)
    return _apply(cfg, grouped)


def dump_config(cfg):
    """Round-trippable text form of every field."""
    d = cfg.to_dict()
    out = []
    for section in ("synth", "data", "model"):
        out.append(f"[{section}]")
        out += [f"{k} = {_fmt(v)}" for k, v in d[section].items()]
        out.append("")
    for section, keys in _TRAIN_SECTIONS.items():
        out.append(f"[{section}]")
        out += [f"{k} = {_fmt(d['train'][k])}" for k in keys]
        out.append("")
    out.append("[eval]")
    out += [f"{k} = {_fmt(v)}" for k, v in d["eval"].items()]
    return "\n".join(out) + "\n"


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)
