"""
Config Module

Layered run configuration: dataclass defaults, then an INI file, then command-line
overrides (``--set section.key=value``).

Grammar: sections ``[run] [shapes] [encoder] [graph] [model] [train] [sampler]
[eval]``; ``key = value``; tuples are comma separated; booleans are ``true`` /
``false``; ``none`` clears an optional value; angles may be written as ``pi`` or
``pi/4``.
"""

import configparser
import hashlib
import json
import logging
import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

from .alignment_graph import GraphConfig
from .dataset_io import config_to_dict
from .encoder import EncoderConfig
from .energy_model import ModelConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .langevin import SamplerConfig
from .shapes import ShapeConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_NAME = "resolved_config.ini"
DIGEST_NAME = "config.digest"


@dataclass(frozen=True)
class RunSettings:
    """Section ``[run]``."""
    seed: int = 0
    output_dir: str = "runs/default"
    jobs: int = 1


SECTIONS: Dict[str, type] = {
    "run": RunSettings,
    "shapes": ShapeConfig,
    "encoder": EncoderConfig,
    "graph": GraphConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """Every section of a run; ``resolved()`` makes shared keys agree."""
    run: RunSettings = field(default_factory=RunSettings)
    shapes: ShapeConfig = field(default_factory=ShapeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    def resolved(self) -> "RunConfig":
        """Propagate ``[graph]`` K and L and the encoder width into the encoder and model sections."""
        encoder = replace(self.encoder, n_groups=self.graph.n_groups)
        model = replace(self.model, l_edge=self.graph.l_edge, channels=encoder.channels)
        return replace(self, encoder=encoder, model=model)

    def digest(self) -> str:
        canonical = json.dumps(config_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Value parsing
# ---------------------------------------------------------------------------

def _parse_float(text: str) -> float:
    t = text.strip().lower().replace(" ", "")
    sign = -1.0 if t.startswith("-") else 1.0
    t = t.lstrip("+-")
    if t == "pi":
        return sign * math.pi
    if t.startswith("pi/"):
        return sign * math.pi / float(t[3:])
    if t.endswith("*pi"):
        return sign * float(t[:-3]) * math.pi
    return sign * float(t)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got '{text}'")


def parse_value(text: str, annotation: Any) -> Any:
    """Convert ``text`` to the type named by a dataclass field annotation."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        return parse_value(text, inner[0])
    if origin in (tuple, Tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(parse_value(s, args[0]) for s in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(items)}")
        return tuple(parse_value(s, a) for s, a in zip(items, args))
    if annotation is bool:
        return _parse_bool(text)
    if annotation is int:
        return int(text.strip())
    if annotation is float:
        return _parse_float(text)
    return text.strip()


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_values(section: str, items: Iterable[Tuple[str, str]]) -> Dict[str, Any]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, text in items:
        if key not in known:
            raise ConfigError(f"unknown key '{section}.{key}'", f"{section}.{key}")
        try:
            values[key] = parse_value(text, hints[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{section}.{key}': {exc}", f"{section}.{key}") from exc
    return values


def _validate(config: RunConfig) -> RunConfig:
    for section in ("train", "sampler"):
        try:
            getattr(config, section).validate()
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}", section) from exc
    if config.run.jobs < 1:
        raise ConfigError("run.jobs must be >= 1", "run.jobs")
    return config


def split_override(text: str) -> Tuple[str, str, str]:
    """``"section.key=value"`` -> (section, key, value)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    name, value = text.split("=", 1)
    section, key = name.strip().split(".", 1)
    return section, key.strip(), value.strip()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Build a RunConfig from defaults, an optional INI file and overrides.

    Raises:
        ConfigError: Missing file, unknown section or key, or an invalid value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for text in overrides:
        section, key, value = split_override(text)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'", f"{section}.{key}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    parts: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'", section)
        parts[section] = SECTIONS[section](**_section_values(section, parser.items(section)))
    return _validate(RunConfig(**parts).resolved())


def render_config(config: RunConfig) -> str:
    """INI text of every key, sections in grammar order."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        value = getattr(config, section)
        for f in fields(value):
            lines.append(f"{f.name} = {format_value(getattr(value, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    """Write ``resolved_config.ini`` and ``config.digest`` into the output directory."""
    out = Path(out_dir) if out_dir is not None else config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(render_config(config), encoding="utf-8")
    (out / DIGEST_NAME).write_text(config.digest() + "\n", encoding="utf-8")
    logger.debug("resolved config written to %s", out)
    return out / RESOLVED_NAME
