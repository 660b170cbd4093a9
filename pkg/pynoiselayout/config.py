"""Flat key-value configuration composed from the section dataclasses.

The file format is one `section.key = value` per line with `#` comments:

    # decisive guidance
    guidance.alpha_cross = 0.3
    cluster.window = 30
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Union

from .common import (
    AblationVariant,
    ClusterConfig,
    DatasetConfig,
    EvalConfig,
    GuidanceConfig,
    SimConfig,
    TrainConfig,
)
from .pipeline import RunConfig
from .scene import PromptSpec
from .utils import config_hash

__all__ = ['RunSection', 'CliConfig', 'SEED_ENV', 'parse_value']

_log = logging.getLogger(__name__)

SEED_ENV = 'DECISIVE_SEED'

# Settings that do not change results; never written or hashed.
EPHEMERAL_KEYS = ('run.jobs',)

_TRUE = ('true', '1', 'yes', 'on')
_FALSE = ('false', '0', 'no', 'off')


@dataclass(frozen=True)
class RunSection:
    """Settings of a generation run and the worker pool."""
    seed: int = 0
    prompt: str = 'dog:1,cat:1'
    variant: AblationVariant = AblationVariant.FULL
    backbone: str = 'simulator'
    full_trace: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError('Jobs must be 1 or more')


def parse_value(text: str, default):
    """Coerce text to the type of a field's default value."""
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f'Invalid boolean: {text}')
    if isinstance(default, IntEnum):
        try:
            return type(default)[text.upper()]
        except KeyError as exc:
            raise ValueError(f'Invalid {type(default).__name__}: {text}') from exc
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, IntEnum):
        return value.name.lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class CliConfig:
    """All configuration sections of the command line."""
    sim: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def sections(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_flat(self) -> dict[str, object]:
        """Every setting keyed `section.key`."""
        flat = {}
        for section in self.sections():
            obj = getattr(self, section)
            for f in fields(obj):
                flat[f'{section}.{f.name}'] = getattr(obj, f.name)
        return flat

    def persisted(self) -> dict[str, object]:
        """Settings that determine outputs, without `EPHEMERAL_KEYS`."""
        return {k: v for k, v in self.to_flat().items() if k not in EPHEMERAL_KEYS}

    def apply(self, overrides: Union[dict[str, str], Iterable[str]]) -> 'CliConfig':
        """Get a copy with `section.key` values replaced.

        Args:
            overrides: A dict of key to text value, or `key=value` strings.

        Raises:
            ValueError: On unknown keys or values of the wrong type.
        """
        if not isinstance(overrides, dict):
            pairs = {}
            for item in overrides:
                if '=' not in item:
                    raise ValueError(f'Expected section.key=value, got {item!r}')
                key, value = item.split('=', 1)
                pairs[key.strip()] = value
            overrides = pairs
        updates: dict[str, dict] = {}
        defaults = self.to_flat()
        for key, value in overrides.items():
            if key not in defaults:
                raise ValueError(f'Unknown configuration key: {key}')
            section, name = key.split('.', 1)
            try:
                updates.setdefault(section, {})[name] = parse_value(
                    str(value), defaults[key])
            except ValueError as exc:
                raise ValueError(f'{key}: {exc}') from exc
        changed = {section: replace(getattr(self, section), **values)
                   for section, values in updates.items()}
        return replace(self, **changed)

    @classmethod
    def from_text(cls, text: str) -> 'CliConfig':
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f'Line {lineno}: expected section.key = value')
            key, value = line.split('=', 1)
            overrides[key.strip()] = value.strip()
        return cls().apply(overrides)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'CliConfig':
        with open(path, 'r', encoding='utf-8') as f:
            config = cls.from_text(f.read())
        _log.debug('Loaded configuration %s', path)
        return config

    def dump(self) -> str:
        lines = ['# pynoiselayout effective configuration']
        current = ''
        for key, value in self.persisted().items():
            section = key.split('.', 1)[0]
            if section != current:
                lines.append(f'# {section}')
                current = section
            lines.append(f'{key} = {_format_value(value)}')
        return '\n'.join(lines) + '\n'

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write `effective.conf` into a directory."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / 'effective.conf'
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.dump())
        return path

    def hash(self) -> str:
        return config_hash({k: _format_value(v) for k, v in self.persisted().items()})

    def resolve_seed(self, seed: Optional[int] = None) -> int:
        """Get the flag seed, else `DECISIVE_SEED`, else `run.seed`."""
        if seed is not None:
            return int(seed)
        env = os.getenv(SEED_ENV)
        if env:
            try:
                return int(env)
            except ValueError as exc:
                raise ValueError(f'{SEED_ENV} must be an integer') from exc
        return self.run.seed

    def run_config(self, **kwargs) -> RunConfig:
        """Compose a RunConfig.

        Args:
            **prompt (str|PromptSpec): Overrides `run.prompt`.
            **seed (int): Overrides the resolved seed.
            **variant (AblationVariant|str): Overrides `run.variant`.
            **full_trace (bool): Overrides `run.full_trace`.
        """
        prompt = kwargs.get('prompt') or self.run.prompt
        if not isinstance(prompt, PromptSpec):
            prompt = PromptSpec.parse(prompt)
        variant = kwargs.get('variant') or self.run.variant
        if isinstance(variant, str):
            variant = AblationVariant.parse(variant)
        full_trace = kwargs.get('full_trace')
        return RunConfig(
            prompt=prompt,
            seed=self.resolve_seed(kwargs.get('seed')),
            variant=variant,
            sim=self.sim,
            guidance=self.guidance,
            cluster=self.cluster,
            backbone=self.run.backbone,
            full_trace=self.run.full_trace if full_trace is None else full_trace,
        )
