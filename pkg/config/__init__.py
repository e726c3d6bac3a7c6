"""
Configuration Package for fedtucker

Contains experiment configuration parsing and environment-driven runtime settings.
"""

from .experiment_config import (ExperimentConfig, config_from_mapping, load_config,
                                parse_config)
from .runtime_config import RuntimeSettings, load_runtime_settings

__all__ = [
    'ExperimentConfig',
    'config_from_mapping',
    'load_config',
    'parse_config',
    'RuntimeSettings',
    'load_runtime_settings',
]
