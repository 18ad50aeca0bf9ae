"""Apply a trained instruction bank to new images.

Sampling runs Euler-ancestral steps down a Karras-style sigma schedule.
Every model call is made three times per step — unconditional, image-only,
and fully conditioned — and blended with two guidance scales. The fully
conditioned branch is the only one that ever sees the bank's K/V blocks,
selected per step by the timestep's segment; an optional switch timestep
applies the bank only while t >= switch_t and falls back to the empty
instruction below it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend.contracts import ConditioningBundle, DiffusionBackend, LatentState
from .bank import InstructionBank, bank_tokens, overrides_for
from .errors import ValidationError
from .validation import as_float_image

DEFAULT_TEXT_SCALE = 7.5
DEFAULT_IMAGE_SCALE = 1.5
DEFAULT_STEPS = 20
DEFAULT_RHO = 7.0


@dataclass
class EditConfig:
    """Sampler and guidance settings for one edit.

    switch_t partially applies the bank: blocks are injected only at
    timesteps >= switch_t. switch_t equal to train_timesteps disables the
    bank entirely; 0 (or None) applies it at every step. sigma_min and
    sigma_max default to the backend descriptor's values.
    """

    s_text: float = DEFAULT_TEXT_SCALE
    s_image: float = DEFAULT_IMAGE_SCALE
    steps: int = DEFAULT_STEPS
    sigma_min: Optional[float] = None
    sigma_max: Optional[float] = None
    rho: float = DEFAULT_RHO
    seed: int = 0
    switch_t: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.rho <= 0:
            raise ValidationError("rho must be positive")
        if self.sigma_min is not None and self.sigma_max is not None:
            if not 0 < self.sigma_min < self.sigma_max:
                raise ValidationError("need 0 < sigma_min < sigma_max")

    def resolved(self, backend: DiffusionBackend) -> "EditConfig":
        sigma_min = self.sigma_min if self.sigma_min is not None else backend.descriptor.sigma_min
        sigma_max = self.sigma_max if self.sigma_max is not None else backend.descriptor.sigma_max
        if not 0 < sigma_min < sigma_max:
            raise ValidationError("need 0 < sigma_min < sigma_max")
        return EditConfig(
            s_text=self.s_text, s_image=self.s_image, steps=self.steps,
            sigma_min=sigma_min, sigma_max=sigma_max, rho=self.rho,
            seed=self.seed, switch_t=self.switch_t,
        )


@dataclass(frozen=True)
class NoiseSchedule:
    """Descending sigmas with a terminal zero, plus (optionally) the
    nearest training timestep for each nonzero sigma."""

    sigmas: np.ndarray
    timesteps: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1


def karras_schedule(
    steps: int, sigma_min: float, sigma_max: float, rho: float = DEFAULT_RHO
) -> NoiseSchedule:
    """Polynomial-in-rho-space noise schedule with exact endpoints.

    sigma_i = (sigma_max^(1/rho) + i/(steps-1) * (sigma_min^(1/rho) -
    sigma_max^(1/rho)))^rho, with a terminal 0 appended. steps=1 collapses
    to [sigma_max, 0].
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValidationError("need 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValidationError("rho must be positive")
    if steps == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        ramp = np.linspace(0.0, 1.0, steps)
        min_inv = sigma_min ** (1.0 / rho)
        max_inv = sigma_max ** (1.0 / rho)
        sigmas = (max_inv + ramp * (min_inv - max_inv)) ** rho
        sigmas[0] = sigma_max
        sigmas[-1] = sigma_min
        sigmas = np.append(sigmas, 0.0)
    return NoiseSchedule(sigmas=sigmas)


def attach_timesteps(schedule: NoiseSchedule, backend: DiffusionBackend) -> NoiseSchedule:
    """Map each nonzero sigma to the backend's nearest training timestep."""
    timesteps = np.array(
        [backend.timestep_for(float(s)) for s in schedule.sigmas[:-1]], dtype=int
    )
    return NoiseSchedule(sigmas=schedule.sigmas, timesteps=timesteps)


def cfg_combine(
    e_uncond: np.ndarray,
    e_img_only: np.ndarray,
    e_full: np.ndarray,
    s_text: float,
    s_image: float,
) -> np.ndarray:
    """Dual-scale classifier-free guidance blend of three noise estimates.

    Equals e_uncond + s_image*(e_img_only - e_uncond) + s_text*(e_full -
    e_img_only); the grouped form below keeps the reduction identities
    (s_text=s_image=1 -> e_full, s_text=0/s_image=1 -> e_img_only) exact in
    floating point.
    """
    if not e_uncond.shape == e_img_only.shape == e_full.shape:
        raise ValidationError(
            f"prediction shapes differ: {e_uncond.shape}, {e_img_only.shape}, "
            f"{e_full.shape}"
        )
    return (
        (1.0 - s_image) * e_uncond
        + (s_image - s_text) * e_img_only
        + s_text * e_full
    )


def euler_ancestral_step(
    latent: np.ndarray,
    sigma_from: float,
    sigma_to: float,
    denoised: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral Euler step from sigma_from down to sigma_to.

    `denoised` is the clean-latent estimate at sigma_from. The drift moves
    the state toward it; ancestral noise of the standard magnitude is added
    except at the terminal sigma_to = 0.
    """
    if not sigma_from > sigma_to >= 0:
        raise ValidationError(f"need sigma_from > sigma_to >= 0, got {sigma_from}, {sigma_to}")
    if sigma_to > 0:
        sigma_up = min(
            sigma_to,
            np.sqrt(sigma_to**2 * (sigma_from**2 - sigma_to**2) / sigma_from**2),
        )
        sigma_down = np.sqrt(sigma_to**2 - sigma_up**2)
    else:
        sigma_up, sigma_down = 0.0, 0.0
    slope = (latent - denoised) / sigma_from
    out = latent + slope * (sigma_down - sigma_from)
    if sigma_to > 0:
        out = out + rng.standard_normal(latent.shape) * sigma_up
    return out


def _full_branch_cond(
    backend: DiffusionBackend,
    bank: Optional[InstructionBank],
    t: int,
    image_latent: np.ndarray,
    switch_t: Optional[int],
) -> ConditioningBundle:
    apply_bank = bank is not None and (switch_t is None or t >= switch_t)
    if apply_bank:
        return ConditioningBundle(
            image_latent=image_latent,
            instruction_tokens=bank_tokens(backend, bank),
            kv_overrides=overrides_for(bank, t, backend.descriptor.train_timesteps),
        )
    return ConditioningBundle(
        image_latent=image_latent,
        instruction_tokens=backend.empty_tokens,
        kv_overrides=None,
    )


def edit_latent(
    backend: DiffusionBackend,
    bank: Optional[InstructionBank],
    image_latent: np.ndarray,
    config: EditConfig,
) -> np.ndarray:
    """Sample an edited latent conditioned on an encoded input image."""
    cfg = config.resolved(backend)
    if bank is not None:
        if not bank.trained:
            raise ValidationError("bank is untrained; run inversion first")
        if bank.backend_id != backend.descriptor.backend_id:
            raise ValidationError(
                f"bank was trained for backend {bank.backend_id!r}, "
                f"got {backend.descriptor.backend_id!r}"
            )
    schedule = attach_timesteps(
        karras_schedule(cfg.steps, cfg.sigma_min, cfg.sigma_max, cfg.rho), backend
    )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    zeros_image = np.zeros_like(image_latent)
    empty = backend.empty_tokens

    x = rng.standard_normal(backend.descriptor.latent_shape) * schedule.sigmas[0]
    for i in range(schedule.steps):
        sigma = float(schedule.sigmas[i])
        t = int(schedule.timesteps[i])
        state = LatentState(x, t)
        e_uncond = backend.predict_noise(
            state, ConditioningBundle(zeros_image, empty)
        )
        e_img = backend.predict_noise(
            state, ConditioningBundle(image_latent, empty)
        )
        e_full = backend.predict_noise(
            state, _full_branch_cond(backend, bank, t, image_latent, cfg.switch_t)
        )
        combined = cfg_combine(e_uncond, e_img, e_full, cfg.s_text, cfg.s_image)
        denoised = x - sigma * combined
        x = euler_ancestral_step(x, sigma, float(schedule.sigmas[i + 1]), denoised, rng)
    return x


def edit_image(
    backend: DiffusionBackend,
    bank: Optional[InstructionBank],
    image,
    config: EditConfig = None,
) -> np.ndarray:
    """Edit an RGB [0,1] image with a trained bank (None = baseline run).

    Deterministic for a fixed config seed. Returns a float image the same
    size as the input.
    """
    cfg = config if config is not None else EditConfig()
    img = as_float_image(image)
    latent = backend.encode_image(img)
    edited = edit_latent(backend, bank, latent, cfg)
    return backend.decode_latent(edited, img.shape[:2])
