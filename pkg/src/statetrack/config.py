"""TOML experiment configuration with strict, field-level validation.

Sections: ``[model]``, ``[task]``, ``[train]``, ``[probe]``, ``[grid]`` and
``[output]``, plus top-level ``profile`` (``desk`` or ``paper``) and ``seed``.
Unknown sections or keys are rejected with the line they appear on.
"""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .network import PRESETS
from .operators import ACTIVATIONS, GATES
from .training import SCHEDULERS, TrainConfig

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class ProbeConfig:
    n: int = 200
    T: int = 200
    t0: int = 20
    sigma: float = 1e-2
    T_max: int = 512
    min_count: int = 5
    max_word_len: int = 4
    tau: float = 0.5


@dataclass(frozen=True)
class GridConfig:
    d_state: tuple[int, ...] = (16, 32)
    lr: tuple[float, ...] = (1e-3, 3e-3)
    scheduler: tuple[str, ...] = ("fixed",)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class OutputConfig:
    directory: str | None = None
    formats: tuple[str, ...] = ("csv", "json", "svg")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    probe: ProbeConfig = ProbeConfig()
    grid: GridConfig = GridConfig()
    output: OutputConfig = OutputConfig()
    profile: str = "desk"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "profile": self.profile, "seed": self.seed, "train": self.train.to_dict(),
            "probe": dataclasses.asdict(self.probe), "grid": {k: list(v) for k, v in dataclasses.asdict(self.grid).items()},
            "output": {"directory": self.output.directory, "formats": list(self.output.formats)},
        }


# key -> (section, TrainConfig field)
_MODEL_KEYS = {"kind": "model", "d_model": "d_model", "d_state": "d_state", "depth": "depth", "activation": "activation",
               "gate": "gate", "embedding": "embedding"}
_TASK_KEYS = {"group": "group", "generators_only": "generators_only"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - set(_MODEL_KEYS.values()) - set(_TASK_KEYS.values())
_SECTIONS = {"model", "task", "train", "probe", "grid", "output"}


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _err(text: str, section: str | None, key: str, msg: str) -> ConfigError:
    line = _line_of(text, section, key) if text else None
    where = f"[{section}] {key}" if section else key
    return ConfigError(f"{where}: {msg}" + (f" (line {line})" if line else ""))


def _coerce(value, typ, where):
    """Check a TOML value against a dataclass field type string."""
    t = str(typ)
    if "tuple" in t:
        if not isinstance(value, list):
            raise TypeError(f"{where} expects a list")
        inner = "float" if "float" in t else "int" if "int" in t else "str"
        return tuple(_coerce(v, inner, where) for v in value)
    if "None" in t and value is None:
        return None
    if "bool" in t:
        if not isinstance(value, bool):
            raise TypeError("expects true/false")
        return value
    if "int" in t and "float" not in t.split("|")[0]:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expects an integer")
        return value
    if "float" in t:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expects a number")
        return float(value)
    if "str" in t:
        if not isinstance(value, str):
            raise TypeError("expects a string")
        return value
    return value


def _fill(cls, raw: dict, section: str, text: str, allowed: dict | None = None) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        name = allowed.get(key) if allowed is not None else (key if key in types else None)
        if name is None or name not in types:
            raise _err(text, section, key, "unknown key")
        try:
            out[name] = _coerce(value, types[name], f"[{section}] {key}")
        except TypeError as exc:
            raise _err(text, section, key, str(exc)) from None
    return out


def parse_config(text: str, *, profile: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate a TOML document. ``profile``/``seed`` override the file."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from None
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise _err(text, None, f"[{key}]", "unknown section")
        elif key not in ("profile", "seed"):
            raise _err(text, None, key, "unknown key")
    prof = profile or doc.get("profile", "desk")
    if prof not in PROFILES:
        raise _err(text, None, "profile", f"must be one of {PROFILES}")
    s = seed if seed is not None else doc.get("seed", 0)
    if isinstance(s, bool) or not isinstance(s, int):
        raise _err(text, None, "seed", "expects an integer")

    tkw: dict = {}
    tkw.update(_fill(TrainConfig, doc.get("model", {}), "model", text, _MODEL_KEYS))
    tkw.update(_fill(TrainConfig, doc.get("task", {}), "task", text, _TASK_KEYS))
    tkw.update(_fill(TrainConfig, doc.get("train", {}), "train", text, {k: k for k in _TRAIN_KEYS}))
    _check_choice(text, "model", "kind", tkw.get("model"), tuple(PRESETS))
    _check_choice(text, "model", "activation", tkw.get("activation"), ACTIVATIONS)
    _check_choice(text, "model", "gate", tkw.get("gate"), GATES)
    _check_choice(text, "train", "scheduler", tkw.get("scheduler"), SCHEDULERS)
    try:
        train = TrainConfig.paper(**tkw) if prof == "paper" else TrainConfig.desk(**tkw)
        train.model_config(2).validate()
    except ConfigError as exc:
        raise ConfigError(f"[train] {exc}") from None
    probe = ProbeConfig(**_fill(ProbeConfig, doc.get("probe", {}), "probe", text))
    grid = GridConfig(**_fill(GridConfig, doc.get("grid", {}), "grid", text))
    output = OutputConfig(**_fill(OutputConfig, doc.get("output", {}), "output", text))
    if not 0 < probe.t0 < probe.T:
        raise _err(text, "probe", "t0", "must satisfy 0 < t0 < T")
    if probe.sigma <= 0:
        raise _err(text, "probe", "sigma", "must be positive")
    for sch in grid.scheduler:
        _check_choice(text, "grid", "scheduler", sch, SCHEDULERS)
    if not (grid.d_state and grid.lr and grid.scheduler and grid.seeds):
        raise ConfigError("[grid] every axis needs at least one value")
    return ExperimentConfig(train, probe, grid, output, prof, s)


def _check_choice(text, section, key, value, choices) -> None:
    if value is not None and value not in choices:
        raise _err(text, section, key, f"{value!r} is not one of {list(choices)}")


def load_config(path, **kw) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), **kw)


EXAMPLE = """\
profile = "desk"
seed = 0

[model]
kind = "tanh_rnn"      # one of the nine presets
d_model = 64
d_state = 32
depth = 1

[task]
group = "C2"

[train]
lr = 3e-3
scheduler = "fixed"
L_max = 32
eval_lengths = [64, 128, 256, 512]
max_total_epochs = 300

[probe]
T_max = 512

[grid]
d_state = [16, 32]
lr = [1e-3, 3e-3]
scheduler = ["fixed"]
seeds = [0, 1, 2]
"""
