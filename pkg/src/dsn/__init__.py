"""Dependency-aware sequence network for social media popularity prediction."""

__version__ = "0.1.0"

from .data import normalize_popularity  # noqa: F401
from .metrics import mae, src  # noqa: F401
from .model import ModelConfig  # noqa: F401
from .train import TrainConfig  # noqa: F401
