"""Backbone-free differentiable architecture search over block-wired complete DAGs."""

from .config import DEFAULT_OPS, ConfigError, SearchConfig
from .supergraph import ParentNetwork, build_parent, count_params, network_forward

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_OPS",
    "ConfigError",
    "SearchConfig",
    "ParentNetwork",
    "build_parent",
    "count_params",
    "network_forward",
]
