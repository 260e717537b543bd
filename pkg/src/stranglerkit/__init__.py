"""Toolkit for incremental monolith-to-microservice migration."""

from stranglerkit.io import bundled, load_model, load_trace, serialize
from stranglerkit.model import SystemModel, validate

__version__ = "0.1.0"

__all__ = ["SystemModel", "bundled", "load_model", "load_trace", "serialize", "validate"]
