"""Run configuration: ``key = value`` lines grouped under ``[section]`` headers.

Sections are ``model``, ``data``, ``train`` and ``ablation``. ``#`` starts a
comment. Unknown keys and badly typed values are rejected with the offending
line number; omitted keys keep their (toy-scale) defaults.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelSection:
    n_layers: int = 2
    heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    d_model1: int = 0  # 0: taken from the embedding source
    d_model2: int = 0
    label_num: int = 0  # 0: number of labels in the corpus
    classifier_d_ff: int = 0  # 0: d_model1 + d_model2
    use_softmax_pooling: bool = True
    pooling: str = "duo"
    dropout: float = 0.1
    label_smoothing: typing.Optional[float] = None  # None: 0.1 translation, 0.0 classification


@dataclass
class DataSection:
    corpus: str = ""
    valid_corpus: str = ""
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    emb_s: str = ""
    emb_p: str = ""
    freeze_pretrained: typing.Optional[bool] = None  # None: frozen in the classifier, trainable in the translator
    min_freq: int = 1
    synthetic: str = "none"
    synth_vocab: int = 40
    synth_min_len: int = 3
    synth_max_len: int = 8
    synth_train: int = 2000
    synth_valid: int = 200
    synth_classes: int = 4


@dataclass
class TrainSection:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    warmup: int = 200
    lr_scale: float = 1.0
    seed: int = 0
    runs: int = 3
    eval_bleu: bool = True
    timing: bool = False
    precision: str = "float32"


@dataclass
class AblationSection:
    meta_embeddings: bool = True
    kv_sharing: bool = True
    duo_norm: bool = True
    fusion: bool = True


@dataclass
class RunConfig:
    task: str = ""
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    lines: dict = field(default_factory=dict, repr=False, compare=False)
    source: str = ""

    def line_of(self, section, key):
        return self.lines.get((section, key))

    def path(self, key, required=True):
        """A ``[data]`` path that must exist; errors name the config line."""
        value = getattr(self.data, key)
        if not value:
            if required:
                raise ConfigError(f"[data] {key} is required for this command")
            return None
        if value.startswith("learned:"):
            return value
        if not Path(value).exists():
            raise ConfigError(f"[data] {key}: no such file {value!r}", self.line_of("data", key))
        return value


SECTIONS = ("model", "data", "train", "ablation")
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(raw, hint, lineno, key):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(raw, args[0], lineno, key)
    try:
        if hint is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {hint.__name__}, got {raw!r}", lineno) from None
    return raw


def parse_config_text(text: str, source="<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            if key != "task":
                raise ConfigError(f"key {key!r} outside any section", lineno)
            cfg.task = value
            cfg.lines[(None, key)] = lineno
            continue
        target = getattr(cfg, section)
        hints = typing.get_type_hints(type(target))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        setattr(target, key, _convert(value, hints[key], lineno, key))
        cfg.lines[(section, key)] = lineno
    return cfg


def parse_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Effective configuration in the same syntax the parser reads."""
    out = []
    if cfg.task:
        out.append(f"task = {cfg.task}")
    for name in SECTIONS:
        out.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
