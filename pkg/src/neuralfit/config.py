"""Run configuration: a sectioned key-value text file with typed values.

    [fitter]
    gru_units = 1024
    update_rule = lm-like

Every key has a default; unknown sections or keys are rejected.  The config
hash is a digest of the canonical rendering and is stamped on every artifact.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .classic import BaselineWeights, LMOptions
from .errors import BadConfig, IoError
from .fitter import FitterConfig, Schedule, TrainLossWeights

TASKS = ("body2d", "hmd", "face")

# keys whose default is a reduced desk-scale value rather than the full-scale one
DESK_SCALE = {
    ("train", "epochs"), ("train", "batch_size"), ("train", "anneal_epoch"), ("train", "lr"),
    ("data", "counts"), ("model", "n_verts"), ("model", "n_shape"), ("fitter", "mlp_units"),
}


@dataclass
class RunSection:
    task: str = "hmd"
    visibility: str = "half"
    seed: int = 0
    workers: int = 1
    deterministic: bool = True
    solver: str = "learned"


@dataclass
class DataSection:
    counts: tuple = (20000, 2000, 2000)
    noise_px: float = 1.0
    noise_pos: float = 0.005
    noise_rot: float = 0.01
    keypoint_dropout: float = 0.0
    split_ratio: float = 0.0   # > 0 replaces counts' split with floor(ratio n) train / rest test


@dataclass
class ModelSection:
    n_verts: int = 800
    n_shape: int = 8
    n_expr: int = 16
    n_landmarks: int = 64
    seed: int = 0


@dataclass
class GDSection:
    step: float = 1e-4
    iters: int = 100


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    fitter: FitterConfig = field(default_factory=FitterConfig)
    train: Schedule = field(default_factory=Schedule)
    loss: TrainLossWeights = field(default_factory=TrainLossWeights)
    lm: LMOptions = field(default_factory=LMOptions)
    prior: BaselineWeights = field(default_factory=BaselineWeights)
    gd: GDSection = field(default_factory=GDSection)

    def validate(self) -> "RunConfig":
        if self.run.task not in TASKS:
            raise BadConfig(f"task must be one of {TASKS}")
        if self.run.visibility not in ("full", "half"):
            raise BadConfig("visibility must be 'full' or 'half'")
        if self.run.solver not in ("lm", "gd", "learned"):
            raise BadConfig("solver must be one of lm, gd, learned")
        if self.run.workers < 1:
            raise BadConfig("workers must be >= 1")
        if len(self.data.counts) != 3 or min(self.data.counts) < 0:
            raise BadConfig("data.counts needs three non-negative integers (train, val, test)")
        self.fitter.validate()
        self.train.validate()
        return self

    @property
    def hash(self) -> str:
        return config_hash(self)


def _sections(cfg: RunConfig):
    for f in fields(cfg):
        yield f.name, getattr(cfg, f.name)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ", ".join(f"{k}:{_format(v)}" for k, v in sorted(value.items()))
    return str(value)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, dict):
            out = {}
            for item in text.split(","):
                if item.strip():
                    k, v = item.split(":")
                    out[k.strip()] = float(v)
            return out
    except ValueError:
        raise BadConfig(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def render(cfg: RunConfig, annotate: bool = False) -> str:
    lines = []
    for name, sec in _sections(cfg):
        lines.append(f"[{name}]")
        for f in fields(sec):
            line = f"{f.name} = {_format(getattr(sec, f.name))}"
            if annotate and (name, f.name) in DESK_SCALE:
                line += "  # desk-scale"
            lines.append(line)
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(render(cfg).encode("utf-8")).hexdigest()[:16]


def set_value(cfg: RunConfig, dotted: str, text: str) -> None:
    """Override ``section.key`` from its text form."""
    if "." not in dotted:
        raise BadConfig(f"override {dotted!r} must look like section.key")
    sec_name, key = dotted.split(".", 1)
    sec = getattr(cfg, sec_name, None)
    if sec is None or not hasattr(sec, "__dataclass_fields__"):
        raise BadConfig(f"unknown config section {sec_name!r}")
    if key not in sec.__dataclass_fields__:
        raise BadConfig(f"unknown config key {dotted!r}")
    setattr(sec, key, _parse(text, getattr(sec, key), dotted))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise BadConfig(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for sec_name in parser.sections():
        for key, value in parser.items(sec_name):
            set_value(cfg, f"{sec_name}.{key}", value)
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc


def default_config_text() -> str:
    return "# neuralfit run configuration\n" + render(RunConfig(), annotate=True)
