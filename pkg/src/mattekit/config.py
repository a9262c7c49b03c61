"""Pipeline configuration: nested YAML sections mapped onto the module configs.

Every section and key is optional; missing values take the defaults of the
corresponding dataclass. Unknown keys and malformed YAML are rejected with the
offending line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .dataset import DatasetConfig
from .losses import LossConfig
from .metrics import SweepConfig
from .model import Stage1Config, Stage2Config
from .training import TrainPlan


class ConfigError(ValueError):
    pass


def _fields(cls, exclude=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}


# section name -> (dataclass, keys the section does not own)
_SECTIONS = {
    "dataset": (DatasetConfig, ("seed",)),
    "training": (TrainPlan, ("seed",)),
    "loss": (LossConfig, ()),
    "eval": (SweepConfig, ("seed",)),
}
_MODEL_SECTIONS = {"stage1": (Stage1Config, ("width_multiplier",)),
                   "stage2": (Stage2Config, ("width_multiplier",))}
_PATH_KEYS = ("foregrounds", "backgrounds")


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    training: TrainPlan = field(default_factory=TrainPlan)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: SweepConfig = field(default_factory=SweepConfig)
    workers: int = 1
    paths: dict = field(default_factory=lambda: {k: None for k in _PATH_KEYS})

    def with_seed(self, seed):
        """Copy with ``seed`` pushed into every section that draws random numbers."""
        seed = int(seed)
        return dataclasses.replace(
            self,
            seed=seed,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
            eval=dataclasses.replace(self.eval, seed=seed),
        )

    def to_dict(self):
        out = {"seed": self.seed, "workers": self.workers}
        for name, (cls, skip) in _SECTIONS.items():
            sec = getattr(self, name)
            out[name] = {k: _plain(getattr(sec, k)) for k in _fields(cls, skip)}
        out["model"] = {"width_multiplier": self.stage1.width_multiplier}
        for name, (cls, skip) in _MODEL_SECTIONS.items():
            sec = getattr(self, name)
            out["model"][name] = {k: _plain(getattr(sec, k)) for k in _fields(cls, skip)}
        out["paths"] = dict(self.paths)
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _line(node):
    return node.start_mark.line + 1


def _mapping(node, where):
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"line {_line(node)}: {where} must be a mapping")
    return {k.value: (k, v) for k, v in node.value}


def _check_keys(items, allowed, where):
    for key, (knode, _) in items.items():
        if key not in allowed:
            raise ConfigError(
                f"line {_line(knode)}: unknown key {key!r} in {where}; "
                f"allowed: {', '.join(sorted(allowed))}"
            )


def _build(cls, items, where, **extra):
    kwargs = {k: yaml.safe_load(yaml.serialize(v)) for k, (_, v) in items.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        first = min((_line(k) for k, _ in items.values()), default=0)
        raise ConfigError(f"line {first}: invalid {where}: {exc}") from exc


def parse_config(text):
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else "?"
        raise ConfigError(f"line {line}: malformed config: {getattr(exc, 'problem', exc)}") from exc
    top = _mapping(root, "top level")
    allowed = set(_SECTIONS) | {"seed", "workers", "model", "paths"}
    _check_keys(top, allowed, "top level")

    def scalar(key, default):
        if key not in top:
            return default
        knode, vnode = top[key]
        val = yaml.safe_load(yaml.serialize(vnode))
        if not isinstance(val, int) or isinstance(val, bool) or val < 0:
            raise ConfigError(f"line {_line(knode)}: {key} must be a non-negative integer")
        return val

    seed = scalar("seed", 0)
    workers = scalar("workers", 1)
    sections = {}
    for name, (cls, skip) in _SECTIONS.items():
        items = _mapping(top[name][1], name) if name in top else {}
        _check_keys(items, _fields(cls, skip), name)
        sections[name] = _build(cls, items, name, **({"seed": seed} if "seed" in skip else {}))

    model = _mapping(top["model"][1], "model") if "model" in top else {}
    _check_keys(model, {"width_multiplier", *_MODEL_SECTIONS}, "model")
    wm = 1.0
    if "width_multiplier" in model:
        wm = yaml.safe_load(yaml.serialize(model["width_multiplier"][1]))
    for name, (cls, skip) in _MODEL_SECTIONS.items():
        items = _mapping(model[name][1], f"model.{name}") if name in model else {}
        _check_keys(items, _fields(cls, skip), f"model.{name}")
        sections[name] = _build(cls, items, f"model.{name}", width_multiplier=wm)

    paths = {k: None for k in _PATH_KEYS}
    items = _mapping(top["paths"][1], "paths") if "paths" in top else {}
    _check_keys(items, _PATH_KEYS, "paths")
    for k, (_, v) in items.items():
        paths[k] = yaml.safe_load(yaml.serialize(v))
    return PipelineConfig(seed=seed, workers=workers, paths=paths, **sections)


def load_config(path=None):
    """Read a YAML config file; ``None`` gives the full default configuration."""
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
