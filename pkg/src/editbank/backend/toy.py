"""Deterministic desk-scale backend.

A stand-in for a pretrained instruction-conditioned editing model, small
enough that inversion runs and full test sweeps finish in seconds on one
CPU core. All weights are derived from a single seed; identical seeds give
bitwise-identical predictions.

Architecture: the denoiser treats the 8x8 latent grid as 64 spatial query
tokens, runs them through two single-head cross-attention layers whose
keys/values come from the instruction, and predicts an edit delta on top
of the conditioning image latent:

    z0_hat  = image_latent + delta(z_t, t, image_latent, instruction)
    eps_hat = (z_t - z0_hat) / sigma(t)

With the empty instruction the delta stays small, so sampling reproduces
the conditioning image; learned instruction blocks steer the delta.
Gradients with respect to the injected K/V rows are hand-derived (plain
softmax-attention backprop) and checked against central finite differences
in the test suite.
"""

from __future__ import annotations

import hashlib
import zlib
from typing import Sequence

import numpy as np

from ..errors import ValidationError
from ..validation import as_float_image
from .contracts import (
    BackendDescriptor,
    ConditioningBundle,
    DiffusionBackend,
    LatentState,
    LayerShapeSpec,
    PerceptualFeatureProvider,
    TextImageEmbedder,
    validate_overrides,
)

PAD_TOKEN = 0
END_TOKEN = 1
_FIRST_WORD = 2
_VOCAB = 4096

_LATENT_SHAPE = (4, 8, 8)
_GRID = 8
_N_QUERIES = _GRID * _GRID
_TEXT_DIM = 24
_MAX_TOKENS = 16
_LAYER_DIMS = (16, 32)
_TRAIN_TIMESTEPS = 1000
_SIGMA_MIN = 0.02
_SIGMA_MAX = 10.0
_TIME_FREQS = 4

_STRIP = ".,;:!?\"'()[]"


def _word_id(word: str) -> int:
    return _FIRST_WORD + zlib.crc32(word.encode("utf-8")) % (_VOCAB - _FIRST_WORD)


def box_resize_down(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Area-average resize of an (H, W, C) array to (oh, ow, C).

    Each output cell averages the source pixels its box overlaps, with
    fractional edge weights, so block-constant images survive exactly.
    """
    oh, ow = out_hw
    h, w = image.shape[:2]
    if h < oh or w < ow:
        raise ValidationError(f"cannot downsample {h}x{w} to {oh}x{ow}")

    def weights(n_in: int, n_out: int) -> np.ndarray:
        scale = n_in / n_out
        mat = np.zeros((n_out, n_in))
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for r in range(int(np.floor(lo)), int(np.ceil(hi))):
                mat[i, r] = (min(hi, r + 1) - max(lo, r)) / scale
        return mat

    wr, wc = weights(h, oh), weights(w, ow)
    return np.einsum("ir,rsc,js->ijc", wr, image, wc)


def box_resize_up(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Piecewise-constant upsample of (h, w, C) to (H, W, C)."""
    oh, ow = out_hw
    h, w = image.shape[:2]
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return image[rows][:, cols]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class ToyBackend(DiffusionBackend):
    """Seeded toy diffusion backend; see module docstring."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        d1, d2 = _LAYER_DIMS

        self.embedding = rng.normal(0.0, 0.5, (_VOCAB, _TEXT_DIM))
        # padding embeds to zero so the empty instruction carries almost no
        # signal and the delta readout stays near zero without a bank
        self.embedding[PAD_TOKEN] = 0.0
        self.embedding[END_TOKEN] *= 0.1
        self.positional = rng.normal(0.0, 0.1, (_MAX_TOKENS, _TEXT_DIM))
        self.w_key = [
            rng.normal(0.0, 1.0, (_TEXT_DIM, d)) / np.sqrt(_TEXT_DIM)
            for d in _LAYER_DIMS
        ]
        self.w_val = [
            rng.normal(0.0, 1.0, (_TEXT_DIM, d)) / np.sqrt(_TEXT_DIM)
            for d in _LAYER_DIMS
        ]
        self.w_in = rng.normal(0.0, 1.0, (8, d1)) / np.sqrt(8)
        self.b_in = rng.normal(0.0, 0.1, d1)
        self.w_time = rng.normal(0.0, 1.0, (2 * _TIME_FREQS, d1)) / np.sqrt(2 * _TIME_FREQS)
        self.w_query1 = rng.normal(0.0, 1.0, (d1, d1)) / np.sqrt(d1)
        self.w_mid = rng.normal(0.0, 1.0, (d1, d2)) / np.sqrt(d1)
        self.b_mid = rng.normal(0.0, 0.1, d2)
        self.w_query2 = rng.normal(0.0, 1.0, (d2, d2)) / np.sqrt(d2)
        self.w_out = rng.normal(0.0, 0.3, (d2, _LATENT_SHAPE[0])) / np.sqrt(d2)
        # orthonormal 3->4 channel lift; its transpose inverts exactly
        self.chan_proj, _ = np.linalg.qr(rng.normal(0.0, 1.0, (4, 3)))

        self.descriptor = BackendDescriptor(
            backend_id=f"toy-{self.seed}",
            latent_shape=_LATENT_SHAPE,
            train_timesteps=_TRAIN_TIMESTEPS,
            attention_layers=tuple(
                LayerShapeSpec(layer_index=i, feature_dim=d, attn_scale_dim=d)
                for i, d in enumerate(_LAYER_DIMS)
            ),
            max_tokens=_MAX_TOKENS,
            sigma_min=_SIGMA_MIN,
            sigma_max=_SIGMA_MAX,
        )
        self.embedder = ToyEmbedder(self.seed)
        self.feature_provider = ToyFeatureProvider(self.seed)

    # -- text ---------------------------------------------------------------

    def tokenize(self, text: str) -> tuple[int, ...]:
        words = [w.strip(_STRIP) for w in text.lower().split()]
        words = [w for w in words if w]
        if len(words) > _MAX_TOKENS:
            raise ValidationError(
                f"instruction has {len(words)} tokens; max is {_MAX_TOKENS}"
            )
        ids = [_word_id(w) for w in words]
        if len(ids) < _MAX_TOKENS:
            ids.append(END_TOKEN)
        ids.extend([PAD_TOKEN] * (_MAX_TOKENS - len(ids)))
        return tuple(ids)

    @property
    def empty_tokens(self) -> tuple[int, ...]:
        return self.tokenize("")

    def content_length(self, tokens: Sequence[int]) -> int:
        return sum(1 for t in tokens if t >= _FIRST_WORD)

    def _token_rows(self, tokens: Sequence[int]) -> np.ndarray:
        ids = list(tokens)
        if len(ids) > _MAX_TOKENS:
            raise ValidationError(
                f"token sequence length {len(ids)} exceeds {_MAX_TOKENS}"
            )
        ids.extend([PAD_TOKEN] * (_MAX_TOKENS - len(ids)))
        if any(not 0 <= t < _VOCAB for t in ids):
            raise ValidationError("token id out of range")
        return self.embedding[ids] + self.positional

    def text_kv(self, tokens: Sequence[int], layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= layer_index < len(_LAYER_DIMS):
            raise ValidationError(f"no attention layer {layer_index}")
        rows = self._token_rows(tokens)
        return rows @ self.w_key[layer_index], rows @ self.w_val[layer_index]

    # -- image codec ----------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        img = as_float_image(image)
        pooled = box_resize_down(img, (_GRID, _GRID)) - 0.5
        return np.einsum("ck,ijk->cij", self.chan_proj, pooled)

    def decode_latent(self, latent: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != _LATENT_SHAPE:
            raise ValidationError(
                f"latent shape {latent.shape} does not match {_LATENT_SHAPE}"
            )
        pooled = np.einsum("ck,cij->ijk", self.chan_proj, latent) + 0.5
        return np.clip(box_resize_up(pooled, size), 0.0, 1.0)

    # -- noise parameterization ------------------------------------------------

    def sigma_for(self, t: int) -> float:
        t = self.check_timestep(t)
        frac = t / (_TRAIN_TIMESTEPS - 1)
        return float(_SIGMA_MIN * (_SIGMA_MAX / _SIGMA_MIN) ** frac)

    def timestep_for(self, sigma: float) -> int:
        if sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {sigma}")
        frac = np.log(sigma / _SIGMA_MIN) / np.log(_SIGMA_MAX / _SIGMA_MIN)
        t = int(round(frac * (_TRAIN_TIMESTEPS - 1)))
        return min(max(t, 0), _TRAIN_TIMESTEPS - 1)

    def forward_noise(self, latent: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if latent.shape != _LATENT_SHAPE or noise.shape != _LATENT_SHAPE:
            raise ValidationError("latent/noise shape mismatch in forward_noise")
        return latent + self.sigma_for(t) * noise

    # -- denoiser ---------------------------------------------------------------

    def _resolve_kv(self, cond: ConditioningBundle) -> list[tuple[np.ndarray, np.ndarray]]:
        pairs = [self.text_kv(cond.instruction_tokens, i) for i in range(len(_LAYER_DIMS))]
        if cond.kv_overrides is None:
            return pairs
        m = validate_overrides(self.descriptor, cond.kv_overrides)
        merged = []
        for (k, v), (k_ov, v_ov) in zip(pairs, cond.kv_overrides):
            k = k.copy()
            v = v.copy()
            k[:m] = np.asarray(k_ov, dtype=np.float64)
            v[:m] = np.asarray(v_ov, dtype=np.float64)
            merged.append((k, v))
        return merged

    def _time_features(self, t: int) -> np.ndarray:
        tau = t / _TRAIN_TIMESTEPS
        ks = np.arange(1, _TIME_FREQS + 1)
        ang = 2.0 * np.pi * ks * tau
        return np.concatenate([np.sin(ang), np.cos(ang)])

    def _forward(self, state: LatentState, cond: ConditioningBundle) -> dict:
        t = self.check_timestep(state.timestep)
        z = np.asarray(state.data, dtype=np.float64)
        c = np.asarray(cond.image_latent, dtype=np.float64)
        if z.shape != _LATENT_SHAPE:
            raise ValidationError(f"latent shape {z.shape} != {_LATENT_SHAPE}")
        if c.shape != _LATENT_SHAPE:
            raise ValidationError(f"image conditioning shape {c.shape} != {_LATENT_SHAPE}")
        (k1, v1), (k2, v2) = self._resolve_kv(cond)
        d1, d2 = _LAYER_DIMS
        sigma = self.sigma_for(t)

        x = z.reshape(4, _N_QUERIES).T
        ci = c.reshape(4, _N_QUERIES).T
        pre = (
            np.concatenate([x / np.sqrt(sigma * sigma + 1.0), ci], axis=1) @ self.w_in
            + self.b_in
            + self._time_features(t) @ self.w_time
        )
        f = np.tanh(pre)
        q1 = f @ self.w_query1
        p1 = _softmax_rows(q1 @ k1.T / np.sqrt(d1))
        a1 = p1 @ v1
        g = np.tanh((f + a1) @ self.w_mid + self.b_mid)
        q2 = g @ self.w_query2
        p2 = _softmax_rows(q2 @ k2.T / np.sqrt(d2))
        a2 = p2 @ v2
        delta = (a2 @ self.w_out).T.reshape(_LATENT_SHAPE)
        eps_hat = (z - (c + delta)) / sigma
        return {
            "eps_hat": eps_hat, "sigma": sigma,
            "q1": q1, "p1": p1, "v1": v1, "k1": k1,
            "q2": q2, "p2": p2, "v2": v2, "k2": k2, "g": g,
        }

    def predict_noise(self, state: LatentState, cond: ConditioningBundle) -> np.ndarray:
        return self._forward(state, cond)["eps_hat"]

    def grad_wrt_overrides(
        self,
        state: LatentState,
        cond: ConditioningBundle,
        target_noise: np.ndarray,
    ) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
        if cond.kv_overrides is None:
            raise ValidationError("grad_wrt_overrides requires cond.kv_overrides")
        m = validate_overrides(self.descriptor, cond.kv_overrides)
        target = np.asarray(target_noise, dtype=np.float64)
        if target.shape != _LATENT_SHAPE:
            raise ValidationError(f"target shape {target.shape} != {_LATENT_SHAPE}")

        ctx = self._forward(state, cond)
        d1, d2 = _LAYER_DIMS
        resid = ctx["eps_hat"] - target
        loss = float(np.mean(resid * resid))

        d_eps = 2.0 * resid / resid.size
        d_delta = (-d_eps / ctx["sigma"]).reshape(4, _N_QUERIES).T
        d_a2 = d_delta @ self.w_out.T

        p2, q2, v2, k2 = ctx["p2"], ctx["q2"], ctx["v2"], ctx["k2"]
        d_v2 = p2.T @ d_a2
        d_p2 = d_a2 @ v2.T
        d_s2 = p2 * (d_p2 - (d_p2 * p2).sum(axis=1, keepdims=True))
        d_k2 = d_s2.T @ q2 / np.sqrt(d2)
        d_q2 = d_s2 @ k2 / np.sqrt(d2)

        g = ctx["g"]
        d_g = d_q2 @ self.w_query2.T
        d_u = d_g * (1.0 - g * g)
        d_fa1 = d_u @ self.w_mid.T

        p1, q1, v1, k1 = ctx["p1"], ctx["q1"], ctx["v1"], ctx["k1"]
        d_v1 = p1.T @ d_fa1
        d_p1 = d_fa1 @ v1.T
        d_s1 = p1 * (d_p1 - (d_p1 * p1).sum(axis=1, keepdims=True))
        d_k1 = d_s1.T @ q1 / np.sqrt(d1)

        grads = [(d_k1[:m].copy(), d_v1[:m].copy()), (d_k2[:m].copy(), d_v2[:m].copy())]
        return loss, grads

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (
            self.embedding, self.positional, *self.w_key, *self.w_val,
            self.w_in, self.b_in, self.w_time, self.w_query1, self.w_mid,
            self.b_mid, self.w_query2, self.w_out, self.chan_proj,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class ToyEmbedder(TextImageEmbedder):
    """Hash-based text embedding and handcrafted image statistics,
    projected into one shared unit sphere."""

    DIM = 32

    def __init__(self, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(int(seed) + 104729))
        self.table = rng.normal(0.0, 1.0, (_VOCAB, self.DIM))
        self.image_proj = rng.normal(0.0, 1.0, (25, self.DIM)) / 5.0

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        return v / max(float(np.linalg.norm(v)), 1e-12)

    def embed_text(self, phrase: str) -> np.ndarray:
        words = [w.strip(_STRIP) for w in phrase.lower().split()]
        words = [w for w in words if w]
        if not words:
            return self._unit(self.table[END_TOKEN])
        rows = self.table[[_word_id(w) for w in words]]
        return self._unit(rows.mean(axis=0))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = as_float_image(image)
        luma = img @ np.array([0.299, 0.587, 0.114])
        pooled = box_resize_down(luma[:, :, None], (4, 4))[:, :, 0]
        feats = np.concatenate([
            img.mean(axis=(0, 1)),
            img.std(axis=(0, 1)),
            pooled.ravel(),
            [np.abs(np.diff(luma, axis=0)).mean(), np.abs(np.diff(luma, axis=1)).mean()],
            [1.0],
        ])
        return self._unit(feats @ self.image_proj)


class ToyFeatureProvider(PerceptualFeatureProvider):
    """Three feature stages: raw pixels plus two pooled, channel-mixed maps."""

    def __init__(self, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(int(seed) + 15485863))
        self.mix = [rng.normal(0.0, 1.0, (3, 8)) for _ in range(2)]

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        img = as_float_image(image)
        h, w = img.shape[:2]
        stages = [img]
        for level, mix in enumerate(self.mix, start=1):
            factor = 2 ** level
            pooled = box_resize_down(img, (max(h // factor, 1), max(w // factor, 1)))
            stages.append(np.tanh(pooled @ mix))
        return stages


def create_toy_backend(seed: int = 0) -> ToyBackend:
    """Toy backend factory: all contract surfaces, derived from one seed."""
    return ToyBackend(seed)
