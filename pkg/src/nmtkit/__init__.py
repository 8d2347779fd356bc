"""Desk-scale sequence-to-sequence toolkit with an attention-only encoder-decoder."""
from . import data, model  # noqa: F401  (populate the problem and model registries)
from .hparams import HParams, get_hparams, register_hparams
from .registry import list_registry, registry

__version__ = "0.1.0"

__all__ = ["HParams", "get_hparams", "register_hparams", "list_registry", "registry"]
