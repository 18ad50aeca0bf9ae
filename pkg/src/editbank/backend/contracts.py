"""Contracts every diffusion backend must satisfy.

A backend bundles three things the rest of the package builds on:

* an instruction-conditioned denoiser whose cross-attention keys/values can
  be intercepted and replaced per layer (the injection site for learned
  instruction blocks),
* a text tokenizer plus per-layer key/value projections for instructions,
* a latent image codec and a noise parameterization mapping discrete
  training timesteps to noise levels.

Two side providers ride along: a joint text/image embedder (unit-norm
vectors in one shared space, used for phrase scoring and directional
metrics) and a perceptual feature provider (per-stage feature maps, used
by the perceptual distance metric).

Adapters for real pretrained editing models implement these same classes;
nothing in the core requires network access or GPU support.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class LayerShapeSpec:
    """Shape of one cross-attention layer, in forward-pass order.

    feature_dim is the width of the instruction keys/values consumed by the
    layer; attn_scale_dim is the dimension under the square root in the
    attention softmax scaling.
    """

    layer_index: int
    feature_dim: int
    attn_scale_dim: int

    def __post_init__(self):
        if self.layer_index < 0:
            raise ValidationError(f"layer_index must be >= 0, got {self.layer_index}")
        if self.feature_dim <= 0 or self.attn_scale_dim <= 0:
            raise ValidationError("feature_dim and attn_scale_dim must be positive")


@dataclass(frozen=True)
class BackendDescriptor:
    """Static facts about a backend.

    sigma_min / sigma_max are the backend's default sampling noise range;
    train_timesteps is the count of discrete diffusion timesteps, and
    max_tokens the full instruction token length (content + end marker +
    padding).
    """

    backend_id: str
    latent_shape: tuple[int, int, int]
    train_timesteps: int
    attention_layers: tuple[LayerShapeSpec, ...]
    max_tokens: int
    sigma_min: float = 0.02
    sigma_max: float = 10.0

    def __post_init__(self):
        if not self.attention_layers:
            raise ValidationError("descriptor needs at least one attention layer")
        if len(self.latent_shape) != 3 or any(d <= 0 for d in self.latent_shape):
            raise ValidationError(f"bad latent_shape {self.latent_shape}")
        if self.train_timesteps < 2:
            raise ValidationError("train_timesteps must be >= 2")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        indices = [spec.layer_index for spec in self.attention_layers]
        if len(set(indices)) != len(indices):
            raise ValidationError("duplicate layer_index in attention_layers")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValidationError("need 0 < sigma_min < sigma_max")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(spec.feature_dim for spec in self.attention_layers)


@dataclass
class LatentState:
    """A latent sample together with its discrete diffusion timestep."""

    data: np.ndarray
    timestep: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("latent contains non-finite values")


@dataclass
class ConditioningBundle:
    """Everything a denoiser call is conditioned on.

    kv_overrides, when present, replaces the first m rows of every
    attention layer's instruction keys/values: one (K, V) pair per layer,
    each shaped (m, feature_dim), sharing a single row count m.
    """

    image_latent: np.ndarray
    instruction_tokens: tuple[int, ...]
    kv_overrides: Optional[list[tuple[np.ndarray, np.ndarray]]] = None

    def __post_init__(self):
        self.image_latent = np.asarray(self.image_latent, dtype=np.float64)
        self.instruction_tokens = tuple(int(t) for t in self.instruction_tokens)


def validate_overrides(
    descriptor: BackendDescriptor,
    overrides: Sequence[tuple[np.ndarray, np.ndarray]],
) -> int:
    """Check override blocks against a descriptor; returns the row count m."""
    layers = descriptor.attention_layers
    if len(overrides) != len(layers):
        raise ValidationError(
            f"got {len(overrides)} override pairs for {len(layers)} attention layers"
        )
    m = None
    for spec, (k, v) in zip(layers, overrides):
        k = np.asarray(k)
        v = np.asarray(v)
        for name, block in (("K", k), ("V", v)):
            if block.ndim != 2 or block.shape[1] != spec.feature_dim:
                raise ValidationError(
                    f"layer {spec.layer_index}: {name} override shape "
                    f"{block.shape} does not match feature_dim {spec.feature_dim}"
                )
        if k.shape[0] != v.shape[0]:
            raise ValidationError(
                f"layer {spec.layer_index}: K has {k.shape[0]} rows but V has "
                f"{v.shape[0]}"
            )
        if m is None:
            m = k.shape[0]
        elif k.shape[0] != m:
            raise ValidationError(
                f"layer {spec.layer_index}: override row count {k.shape[0]} "
                f"differs from earlier layers ({m})"
            )
    if m is None or m < 1:
        raise ValidationError("overrides must cover at least one token row")
    if m > descriptor.max_tokens:
        raise ValidationError(
            f"override row count {m} exceeds max_tokens {descriptor.max_tokens}"
        )
    return m


def single_head_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale_dim: int
) -> np.ndarray:
    """softmax(Q Kᵀ / sqrt(scale_dim)) V for a single head.

    q: (n_queries, d), k/v: (n_keys, d) -> (n_queries, d).
    """
    scores = (q @ k.T) / np.sqrt(float(scale_dim))
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


class DiffusionBackend(ABC):
    """Denoiser with interceptable cross-attention plus codec and tokenizer.

    Instances are immutable after construction and safe for concurrent
    read-only prediction; gradient evaluations hold no shared state.
    """

    descriptor: BackendDescriptor

    @abstractmethod
    def tokenize(self, text: str) -> tuple[int, ...]:
        """Map text to a fixed-length token sequence (content, end, padding)."""

    @property
    @abstractmethod
    def empty_tokens(self) -> tuple[int, ...]:
        """The designated empty-instruction sequence."""

    @abstractmethod
    def content_length(self, tokens: Sequence[int]) -> int:
        """Number of content tokens (end marker and padding excluded)."""

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """RGB [0,1] image -> latent shaped per descriptor.latent_shape."""

    @abstractmethod
    def decode_latent(self, latent: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        """Latent -> RGB [0,1] image of the requested (H, W)."""

    @abstractmethod
    def text_kv(self, tokens: Sequence[int], layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        """The backend's own projected (K, V) for an instruction, each (l, d_i)."""

    @abstractmethod
    def predict_noise(self, state: LatentState, cond: ConditioningBundle) -> np.ndarray:
        """Noise estimate with the same shape as the latent.

        When cond.kv_overrides is set, the first m rows of every layer's
        instruction K/V are replaced before attention is computed.
        """

    @abstractmethod
    def grad_wrt_overrides(
        self,
        state: LatentState,
        cond: ConditioningBundle,
        target_noise: np.ndarray,
    ) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
        """Mean-squared-error loss against target_noise and its gradients.

        Returns (loss, [(dL/dK_i, dL/dV_i) per layer]) for the override
        blocks in cond.kv_overrides, which must be present.
        """

    @abstractmethod
    def sigma_for(self, t: int) -> float:
        """Noise level of discrete timestep t (monotone increasing in t)."""

    @abstractmethod
    def timestep_for(self, sigma: float) -> int:
        """Nearest discrete training timestep for a noise level."""

    @abstractmethod
    def forward_noise(self, latent: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        """Noised latent at timestep t given unit-variance noise."""

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.descriptor.train_timesteps:
            raise ValidationError(
                f"timestep {t} outside [0, {self.descriptor.train_timesteps})"
            )
        return t


class TextImageEmbedder(ABC):
    """Joint text/image embedding provider; outputs are unit-norm vectors."""

    @abstractmethod
    def embed_text(self, phrase: str) -> np.ndarray: ...

    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class PerceptualFeatureProvider(ABC):
    """Per-stage feature maps for perceptual distances, channel-last."""

    @abstractmethod
    def features(self, image: np.ndarray) -> list[np.ndarray]: ...
