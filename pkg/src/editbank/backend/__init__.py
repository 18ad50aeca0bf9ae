from .contracts import (
    BackendDescriptor,
    ConditioningBundle,
    DiffusionBackend,
    LatentState,
    LayerShapeSpec,
    PerceptualFeatureProvider,
    TextImageEmbedder,
    single_head_attention,
    validate_overrides,
)
from .registry import (
    BACKENDS_ENV_VAR,
    available_backends,
    backend_for_bank_id,
    get_backend,
    register_backend,
)
from .toy import ToyBackend, ToyEmbedder, ToyFeatureProvider, create_toy_backend

__all__ = [
    "BackendDescriptor",
    "ConditioningBundle",
    "DiffusionBackend",
    "LatentState",
    "LayerShapeSpec",
    "PerceptualFeatureProvider",
    "TextImageEmbedder",
    "single_head_attention",
    "validate_overrides",
    "BACKENDS_ENV_VAR",
    "available_backends",
    "backend_for_bank_id",
    "get_backend",
    "register_backend",
    "ToyBackend",
    "ToyEmbedder",
    "ToyFeatureProvider",
    "create_toy_backend",
]
