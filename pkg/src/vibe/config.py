"""Run configuration: one typed tree over every module's parameters.

Values resolve as defaults <- JSON file <- ``key=value`` overrides. Keys are
dotted (``ppo.clip``); every section mirrors a module dataclass, so the
defaults below are the library defaults.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from vibe.behavior import ReportConfig
from vibe.errors import ConfigError, MissingRequired, TypeMismatch, UnknownKey
from vibe.imitation.algorithms import BcConfig, HorizonSchedule, PpoConfig, RewardFloor
from vibe.imitation.training import GailConfig
from vibe.sim.world import SimConfig
from vibe.synth import SynthConfig
from vibe.tracker import AssociationConfig


@dataclass(frozen=True)
class DataSettings:
    demos: int = 100  # training trajectories taken from the train split
    detection_identities: int = 20  # car identities rendered as detections by `synth`
    detection_seed: int = 1


@dataclass(frozen=True)
class EvalSettings:
    windows: int = 1
    ticks: int = 2000
    split: str = "test"
    mot_radius: float = 1.0


_GAIL_SKIP = ("ppo", "schedule", "reward_floor", "seed")

SECTIONS = {
    "synth": SynthConfig,
    "tracker": AssociationConfig,
    "sim": SimConfig,
    "ppo": PpoConfig,
    "schedule": HorizonSchedule,
    "reward": RewardFloor,
    "gail": GailConfig,
    "bc": BcConfig,
    "report": ReportConfig,
    "data": DataSettings,
    "eval": EvalSettings,
}


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _schema():
    """Ordered ``{dotted key: (type hint, default)}`` for the whole tree."""
    out = {"seed": (int, 0)}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if cls is GailConfig and f.name in _GAIL_SKIP:
                continue
            if cls is SynthConfig and f.name == "seed":
                continue
            out[f"{name}.{f.name}"] = (hints[f.name], _default(f))
    return out


SCHEMA = _schema()


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def coerce(key, value, hint, default):
    """Check ``value`` against the field type, converting JSON lists to tuples."""
    args = typing.get_args(hint)
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce(key, value, inner[0], default)
    if hint is float:
        if _is_number(value):
            return float(value)
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is tuple:
        if isinstance(value, (list, tuple)):
            ref = default[0] if default else None
            if all(_is_number(v) if _is_number(ref) else isinstance(v, type(ref)) for v in value):
                return tuple(type(ref)(v) for v in value) if ref is not None else tuple(value)
    elif hint is dict:
        if isinstance(value, dict) and all(isinstance(k, str) and _is_number(v) for k, v in value.items()):
            return {k: float(v) for k, v in value.items()}
    raise TypeMismatch(key, f"expected {getattr(hint, '__name__', hint)}, got {value!r}")


def _flatten(tree, prefix=""):
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in SCHEMA:
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def parse_override(text):
    """``key=value``; the value is read as JSON, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep:
        raise MissingRequired(key, "override needs the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    return key, value


@dataclass
class RunConfig:
    values: dict
    source: str | None = None
    overrides: tuple = ()
    explicit: frozenset = field(default_factory=frozenset)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_dict(self):
        """Nested plain-JSON view of the resolved values."""
        tree = {}
        for key, v in self.values.items():
            *path, leaf = key.split(".")
            node = tree
            for p in path:
                node = node.setdefault(p, {})
            node[leaf] = list(v) if isinstance(v, tuple) else v
        return tree

    def with_seed(self, seed):
        values = dict(self.values, seed=int(seed))
        return RunConfig(values, self.source, self.overrides, self.explicit | {"seed"})

    # -- module configs --

    def _build(self, name, **extra):
        cls = SECTIONS[name]
        try:
            return cls(**self.section(name), **extra)
        except (TypeError, ValueError) as err:
            raise ConfigError(name, str(err)) from err

    def synth(self) -> SynthConfig:
        return self._build("synth", seed=self.seed)

    def tracker(self) -> AssociationConfig:
        return self._build("tracker")

    def sim(self) -> SimConfig:
        return self._build("sim")

    def bc(self) -> BcConfig:
        return self._build("bc")

    def report(self) -> ReportConfig:
        return self._build("report")

    def data(self) -> DataSettings:
        return self._build("data")

    def eval(self) -> EvalSettings:
        return self._build("eval")

    def gail(self) -> GailConfig:
        return self._build("gail", ppo=self._build("ppo"), schedule=self._build("schedule"),
                           reward_floor=self._build("reward"), seed=self.seed)


def parse_config(file=None, overrides=(), required=()) -> RunConfig:
    """Resolve defaults <- file <- overrides; errors name the offending key."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    explicit = set()
    layers = []
    if file is not None:
        text = Path(file).read_text()
        tree = json.loads(text) if text.strip() else {}
        if not isinstance(tree, dict):
            raise TypeMismatch("<root>", "config file must hold a JSON object")
        layers.append(list(_flatten(tree)))
    layers.append([parse_override(o) if isinstance(o, str) else tuple(o) for o in overrides])
    for layer in layers:
        for key, value in layer:
            if key not in SCHEMA:
                raise UnknownKey(key, "not a configuration key")
            hint, default = SCHEMA[key]
            values[key] = coerce(key, value, hint, default)
            explicit.add(key)
    for key in required:
        if key not in explicit:
            raise MissingRequired(key, "must be set in the config file or with --set")
    cfg = RunConfig(values, None if file is None else str(file), tuple(overrides), frozenset(explicit))
    for name in SECTIONS:  # range checks of the owning dataclasses
        cfg._build(name, **({"seed": 0} if name == "synth" else {}))
    cfg.gail()
    return cfg


def describe_keys() -> str:
    """``key = default`` for every configuration key, one per line."""
    lines = []
    for key, (_, default) in SCHEMA.items():
        if isinstance(default, tuple):
            default = list(default)
        lines.append(f"  {key} = {json.dumps(default, sort_keys=True)}")
    return "\n".join(lines)
