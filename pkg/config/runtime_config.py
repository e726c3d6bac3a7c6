"""
Runtime Settings
Process-level settings read from the environment (and an optional .env file)

Settings are parsed on demand so a malformed variable surfaces as a
ConfigError where the caller can report it.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from fedtucker.exceptions import ConfigError

# Load environment variables from config/.env if present
env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)


def _int_or_none(value):
    if value is None or value.strip() == '':
        return None
    try:
        threads = int(value)
    except ValueError as e:
        raise ConfigError(f"FEDTUCKER_THREADS must be a positive integer, got {value!r}") from e
    if threads < 1:
        raise ConfigError(f"FEDTUCKER_THREADS must be a positive integer, got {value!r}")
    return threads


@dataclass
class RuntimeSettings:
    """Worker threads and logging destination"""

    threads: Optional[int] = None
    log_level: str = 'INFO'
    log_dir: str = 'logs'

    @classmethod
    def from_env(cls):
        """
        Read FEDTUCKER_THREADS, FEDTUCKER_LOG_LEVEL and FEDTUCKER_LOG_DIR

        Raises:
            ConfigError: If FEDTUCKER_THREADS is not a positive integer
        """
        return cls(
            threads=_int_or_none(os.getenv('FEDTUCKER_THREADS')),
            log_level=os.getenv('FEDTUCKER_LOG_LEVEL', 'INFO').upper(),
            log_dir=os.getenv('FEDTUCKER_LOG_DIR', 'logs'),
        )

    @property
    def worker_threads(self):
        """Thread cap for client steps; defaults to the CPU count"""
        return self.threads or os.cpu_count() or 1


def load_runtime_settings() -> RuntimeSettings:
    """Current runtime settings from the environment"""
    return RuntimeSettings.from_env()
