"""
Configuration for the identification lab.

Precedence: command-line flags > environment (.env via python-dotenv) >
config.json > DEFAULT_SETTINGS.
"""

import json
import logging
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from lab_errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

APP_ROOT = os.path.dirname(os.path.abspath(__file__))
SCHEMA_VERSION = "1.0"

DEFAULT_SETTINGS: Dict[str, Any] = {
    # model_core
    'tol': 1e-12,
    'max_iter': 10_000,
    'damping': 1.0,
    'policy_steps': True,
    # genericity_lab
    'fd_step': 1e-5,
    'svd_tol': 1e-8,
    'res_tol': 1e-8,
    'cluster_tol': 1e-4,
    'n_starts': 200,
    'probe_starts': 8,
    'gn_max_iter': 100,
    'inner_max_iter': 500,
    'u_max': 10.0,
    # exclusion_ident
    'grid_size': 1000,
    'root_tol': 1e-10,
    'match_tol': 1e-6,
    # runtime
    'output_dir': './reports',
    'workers': None,
    'seed': 0,
}

# Env var -> (setting, parser)
ENV_OVERRIDES = {
    'HDDC_OUTPUT_DIR': ('output_dir', str),
    'HDDC_WORKERS': ('workers', int),
    'HDDC_TOL': ('tol', float),
    'HDDC_SEED': ('seed', int),
}


def load_settings(config_file: Optional[str] = None) -> Dict[str, Any]:
    """Load settings from defaults, a JSON file and the environment."""
    settings = dict(DEFAULT_SETTINGS)

    if config_file is None:
        candidate = os.path.join(APP_ROOT, 'config.json')
        config_file = candidate if os.path.exists(candidate) else None

    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"settings file not found: {config_file}")
        try:
            with open(config_file, 'r') as f:
                user_settings = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"settings file {config_file} is not valid JSON: {e}") from e
        for key, value in user_settings.items():
            if key not in DEFAULT_SETTINGS:
                logger.warning("ignoring unknown setting %r in %s", key, config_file)
                continue
            settings[key] = value

    for env_name, (key, parse) in ENV_OVERRIDES.items():
        raw = os.getenv(env_name, '').strip()
        if not raw:
            continue
        try:
            settings[key] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"environment variable {env_name}={raw!r} is invalid") from e

    for key in ('tol', 'svd_tol', 'res_tol', 'cluster_tol', 'root_tol', 'match_tol', 'fd_step'):
        if float(settings[key]) <= 0:
            raise ConfigError(f"setting {key} must be positive, got {settings[key]}")
    for key in ('max_iter', 'inner_max_iter', 'gn_max_iter'):
        if int(settings[key]) < 1:
            raise ConfigError(f"setting {key} must be at least 1, got {settings[key]}")
    return settings


def resolve_workers(workers: Optional[int]) -> int:
    """None, 0 or negative means machine parallelism."""
    if workers is None or int(workers) <= 0:
        return os.cpu_count() or 1
    return int(workers)
