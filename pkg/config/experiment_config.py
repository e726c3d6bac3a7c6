"""
Experiment Configuration
Parses and validates key=value (or YAML) experiment files
"""

import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

import yaml

from fedtucker.exceptions import ConfigError

logger = logging.getLogger(__name__)

METHODS = ('firm', 'fulldecomp', 'compjf', 'comprandjf', 'compavg')
HETERO_MODES = ('none', 'fixed', 'per_epoch')
ENCODINGS = ('raw', 'csr')
# Beyond six element maps the round-robin split leaves some maps all zero
MAX_ELEMENTS = 6
MAX_SEED = 2 ** 64 - 1


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one federated reconstruction run"""

    method: str = 'compjf'
    grid: Tuple[int, int] = (64, 64)
    angles: int = 40
    beamlets: int = 95
    clients: int = 4
    coefficients: Optional[List[float]] = None
    noise: float = 0.1
    ranks: Union[int, List[int]] = 32
    hetero: str = 'none'
    rank_range: Tuple[int, int] = (5, 26)
    epochs: int = 300
    lr: Optional[float] = None
    seed: int = 0
    topk: Optional[float] = None
    encoding: str = 'raw'
    early_stop: bool = False
    gamma: float = 0.01
    output_dir: str = 'results'
    ssim_scales: int = 3

    def validate(self):
        """
        Check every field and option combination

        Raises:
            ConfigError: Listing all problems found
        """
        problems = []
        if self.method not in METHODS:
            problems.append(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if len(self.grid) != 2 or not all(8 <= n <= 1024 for n in self.grid):
            problems.append(f"grid extents must lie in [8, 1024], got {self.grid}")
        if not 1 <= self.angles <= 2000:
            problems.append(f"angles must lie in [1, 2000], got {self.angles}")
        if not 1 <= self.beamlets <= 4000:
            problems.append(f"beamlets must lie in [1, 4000], got {self.beamlets}")
        if not 2 <= self.clients <= MAX_ELEMENTS + 1:
            problems.append(f"clients must lie in [2, {MAX_ELEMENTS + 1}], got {self.clients}")
        if self.coefficients is not None:
            if len(self.coefficients) != self.clients - 1:
                problems.append(
                    f"coefficients needs {self.clients - 1} values, got {len(self.coefficients)}"
                )
            if any(c <= 0 for c in self.coefficients):
                problems.append("coefficients must be positive")
        if not 0.0 <= self.noise <= 1.0:
            problems.append(f"noise must lie in [0, 1], got {self.noise}")

        max_rank = min(self.grid) if len(self.grid) == 2 else 0
        rank_values = self.ranks if isinstance(self.ranks, list) else [self.ranks]
        if any(not 1 <= r <= max_rank for r in rank_values):
            problems.append(f"ranks must lie in [1, {max_rank}], got {self.ranks}")
        if isinstance(self.ranks, list) and len(self.ranks) != self.clients:
            problems.append(f"ranks list needs {self.clients} entries, got {len(self.ranks)}")
        if self.hetero not in HETERO_MODES:
            problems.append(f"hetero must be one of {', '.join(HETERO_MODES)}, got {self.hetero!r}")
        lo, hi = self.rank_range
        if not 1 <= lo <= hi <= max_rank:
            problems.append(f"rank_range must satisfy 1 <= lo <= hi <= {max_rank}, got {self.rank_range}")

        if not 0 <= self.epochs <= 100000:
            problems.append(f"epochs must lie in [0, 100000], got {self.epochs}")
        if self.lr is not None and not self.lr > 0:
            problems.append(f"lr must be positive or auto, got {self.lr}")
        if not 0 <= self.seed <= MAX_SEED:
            problems.append(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.topk is not None and not 0 < self.topk <= 100:
            problems.append(f"topk must lie in (0, 100], got {self.topk}")
        if self.encoding not in ENCODINGS:
            problems.append(f"encoding must be one of {', '.join(ENCODINGS)}, got {self.encoding!r}")
        if self.gamma < 0:
            problems.append(f"gamma must be non-negative, got {self.gamma}")
        if not 1 <= self.ssim_scales <= 5:
            problems.append(f"ssim_scales must lie in [1, 5], got {self.ssim_scales}")
        elif min(self.grid) < 2 ** (self.ssim_scales - 1) * 11:
            problems.append(f"grid {self.grid} is too small for {self.ssim_scales} SSIM scales")

        # Option combinations
        if self.topk is not None and self.method != 'firm':
            problems.append("topk is a FIRM baseline and requires method=firm")
        if self.encoding == 'csr' and self.method != 'firm':
            problems.append("encoding=csr applies to full-size FIRM messages and requires method=firm")
        if self.hetero != 'none' and self.method not in ('fulldecomp', 'compjf', 'comprandjf'):
            problems.append("heterogeneous ranks require method fulldecomp, compjf or comprandjf")
        if self.method == 'compavg' and (self.hetero != 'none' or
                                         (isinstance(self.ranks, list) and len(set(self.ranks)) > 1)):
            problems.append("compavg averages factors and requires homogeneous ranks")
        if isinstance(self.ranks, list) and self.hetero != 'none':
            problems.append("a per-client ranks list cannot be combined with sampled ranks")
        if self.early_stop and self.noise <= 0:
            problems.append("early_stop uses the discrepancy principle and requires noise > 0")

        if problems:
            raise ConfigError('; '.join(problems), problems=problems)
        return self

    @property
    def element_coefficients(self):
        """Coefficients c_j, unit sum of squares when set to auto"""
        if self.coefficients is not None:
            return list(self.coefficients)
        n = self.clients - 1
        return [1.0 / n ** 0.5] * n

    def client_ranks(self):
        """Configured (homogeneous or listed) rank per client"""
        if isinstance(self.ranks, list):
            return list(self.ranks)
        return [self.ranks] * self.clients

    def to_text(self):
        """Canonical key=value form; parse_config(cfg.to_text()) == cfg"""
        return ''.join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _format_value(value):
    if value is None:
        return 'auto'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ','.join(_format_value(v) for v in value)
    return str(value)


def _parse_bool(value):
    lowered = value.lower()
    if lowered in ('true', '1', 'yes', 'on'):
        return True
    if lowered in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_grid(value):
    parts = value.replace('x', ',').replace('X', ',').split(',')
    extents = tuple(int(p) for p in parts if p.strip())
    if len(extents) == 1:
        extents = extents * 2
    if len(extents) != 2:
        raise ValueError(f"grid needs two extents, got {value!r}")
    return extents


def _parse_float_list(value):
    return [float(v) for v in value.split(',') if v.strip()]


def _parse_ranks(value):
    values = [int(v) for v in value.split(',') if v.strip()]
    if len(values) == 1 and ',' not in value:
        return values[0]
    return values


def _parse_pair(value):
    values = tuple(int(v) for v in value.split(',') if v.strip())
    if len(values) != 2:
        raise ValueError(f"expected lo,hi got {value!r}")
    return values


def _auto(parser):
    def parse(value):
        return None if value.lower() in ('auto', 'none', '') else parser(value)
    return parse


PARSERS = {
    'method': lambda v: v.lower(),
    'grid': _parse_grid,
    'angles': int,
    'beamlets': int,
    'clients': int,
    'coefficients': _auto(_parse_float_list),
    'noise': float,
    'ranks': _parse_ranks,
    'hetero': lambda v: v.lower(),
    'rank_range': _parse_pair,
    'epochs': int,
    'lr': _auto(float),
    'seed': int,
    'topk': _auto(float),
    'encoding': lambda v: v.lower(),
    'early_stop': _parse_bool,
    'gamma': float,
    'output_dir': str,
    'ssim_scales': int,
}


def _apply(values, key, raw, line=None):
    if key not in PARSERS:
        raise ConfigError(f"unknown key {key!r}", line=line)
    if key in values:
        raise ConfigError(f"duplicate key {key!r}", line=line)
    try:
        values[key] = PARSERS[key](raw.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value for {key}: {e}", line=line) from e


def parse_config(text) -> ExperimentConfig:
    """
    Parse key=value experiment text

    Args:
        text: One pair per line; '#' starts a comment

    Returns:
        Validated ExperimentConfig with defaults filled in

    Raises:
        ConfigError: On unknown keys, malformed lines or invalid combinations
    """
    values = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"expected key=value, got {raw_line.strip()!r}", line=number)
        key, raw = line.split('=', 1)
        _apply(values, key.strip().lower(), raw, line=number)
    return ExperimentConfig(**values).validate()


def config_from_mapping(mapping) -> ExperimentConfig:
    """Build a validated config from a dict (e.g. parsed YAML)"""
    values = {}
    for key, value in (mapping or {}).items():
        _apply(values, str(key).strip().lower(), _format_value(value))
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    """
    Load a config file: YAML for .yaml/.yml, key=value otherwise

    Args:
        path: Config file path

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: If the file is not UTF-8 text or fails parsing or validation
        OSError: If the file cannot be read
    """
    path = Path(path)
    logger.info(f"Loading experiment config from {path}")
    try:
        text = path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        raise ConfigError(f"config file is not valid UTF-8: {e}") from e
    if path.suffix.lower() in ('.yaml', '.yml'):
        try:
            mapping = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML: {e}") from e
        if mapping is not None and not isinstance(mapping, dict):
            raise ConfigError("YAML config must be a mapping")
        return config_from_mapping(mapping)
    return parse_config(text)
