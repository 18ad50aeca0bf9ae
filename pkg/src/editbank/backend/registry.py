"""Backend registry: id -> factory.

The `toy` backend ships with the package so everything runs with zero
downloads. Adapters for real models register themselves either via
`register_backend` or through the EDITBANK_BACKENDS environment variable,
which names a JSON file mapping backend ids to "module:callable" import
targets.
"""

from __future__ import annotations

import importlib
import json
import os
from typing import Callable

from ..errors import ValidationError
from .contracts import DiffusionBackend
from .toy import create_toy_backend

BACKENDS_ENV_VAR = "EDITBANK_BACKENDS"

_REGISTRY: dict[str, Callable[[int], DiffusionBackend]] = {
    "toy": create_toy_backend,
}
_env_loaded = False


def register_backend(backend_id: str, factory: Callable[[int], DiffusionBackend]) -> None:
    _REGISTRY[backend_id] = factory


def _load_env_backends() -> None:
    global _env_loaded
    if _env_loaded:
        return
    _env_loaded = True
    path = os.environ.get(BACKENDS_ENV_VAR)
    if not path:
        return
    try:
        with open(path, "r", encoding="utf-8") as fh:
            mapping = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read backend registry {path}: {exc}") from exc
    for backend_id, target in mapping.items():
        module_name, _, attr = target.partition(":")
        if not attr:
            raise ValidationError(
                f"registry entry {backend_id!r} must look like 'module:callable'"
            )
        module = importlib.import_module(module_name)
        register_backend(backend_id, getattr(module, attr))


def available_backends() -> list[str]:
    _load_env_backends()
    return sorted(_REGISTRY)


def get_backend(backend_id: str, seed: int = 0) -> DiffusionBackend:
    _load_env_backends()
    try:
        factory = _REGISTRY[backend_id]
    except KeyError:
        raise ValidationError(
            f"unknown backend {backend_id!r}; available: {', '.join(sorted(_REGISTRY))}"
        ) from None
    return factory(seed)


def backend_for_bank_id(bank_backend_id: str, seed_fallback: int = 0) -> DiffusionBackend:
    """Rebuild the backend a bank was trained against.

    Toy ids embed their seed (`toy-<seed>`), so the exact instance can be
    reconstructed; other ids resolve through the registry.
    """
    if bank_backend_id.startswith("toy-"):
        try:
            seed = int(bank_backend_id.split("-", 1)[1])
        except ValueError:
            raise ValidationError(f"malformed toy backend id {bank_backend_id!r}") from None
        return get_backend("toy", seed)
    return get_backend(bank_backend_id, seed_fallback)
