# SPDX-License-Identifier: Apache-2.0
"""Latent context persistence for learned handover prediction."""

import json as _json

from ._core import (
    LATENT_DIM,
    PAYLOAD_BYTES,
    Checkpoint,
    ConfigError,
    Error,
    PayloadError,
    bootstrap_ci,
    default_experiment_config,
    default_scenario_config,
    deserialize_latent,
    generate,
    l3_coefficient,
    scenario_summary,
    serialize_latent,
)
from ._core import evaluate as _evaluate

__version__ = "0.1.0"


def evaluate(config, trace_dir, checkpoint=None, cold_checkpoint=None):
    """Runs an experiment and returns the report as a dict.

    `config` may be a dict or a JSON string; missing keys keep their defaults.
    """
    if not isinstance(config, str):
        config = _json.dumps(config)
    return _json.loads(_evaluate(config, str(trace_dir), checkpoint, cold_checkpoint))


__all__ = [
    "LATENT_DIM",
    "PAYLOAD_BYTES",
    "Checkpoint",
    "ConfigError",
    "Error",
    "PayloadError",
    "bootstrap_ci",
    "default_experiment_config",
    "default_scenario_config",
    "deserialize_latent",
    "evaluate",
    "generate",
    "l3_coefficient",
    "scenario_summary",
    "serialize_latent",
]
