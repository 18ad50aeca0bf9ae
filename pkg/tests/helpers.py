"""Shared test utilities: planted embedders, marker images, and independent
oracles that never touch the library's own computation paths."""

from __future__ import annotations

import numpy as np

from editbank.backend.contracts import PerceptualFeatureProvider, TextImageEmbedder

# -- planted embedding fixture ---------------------------------------------------
#
# Image sets embed onto two orthogonal axes (before -> e0, after -> e1) and
# each phrase gets exact, hand-chosen cosines to those axes. "grass" is the
# planted before-side phrase (gap +0.7), "snow" the after-side one.

PLANTED_SIMS = {
    # phrase: (cos to before set, cos to after set)
    "grass": (0.9, 0.2),
    "snow": (0.2, 0.9),
    "sky": (0.3, 0.35),
    "road": (0.1, 0.15),
    "tree": (0.4, 0.38),
}
PLANTED_VOCAB = tuple(PLANTED_SIMS)

_DIM = 2 + len(PLANTED_SIMS)
_BEFORE_AXIS = np.eye(_DIM)[0]
_AFTER_AXIS = np.eye(_DIM)[1]


def marker_image(index: int, size: int = 8) -> np.ndarray:
    """Constant image whose value encodes an index, PNG-quantization safe."""
    return np.full((size, size, 3), index / 16.0)


def marker_index(image: np.ndarray) -> int:
    return int(round(float(image[0, 0, 0]) * 16.0))


class PlantedEmbedder(TextImageEmbedder):
    """Marker images with even index embed to the before axis, odd to the
    after axis; phrases get exact planted cosines to both axes."""

    def __init__(self, scale: float = 1.0):
        self.scale = scale
        self.phrase_vecs = {}
        for i, (phrase, (sim_before, sim_after)) in enumerate(PLANTED_SIMS.items()):
            vec = sim_before * _BEFORE_AXIS + sim_after * _AFTER_AXIS
            filler = 1.0 - sim_before**2 - sim_after**2
            vec = vec + np.sqrt(filler) * np.eye(_DIM)[2 + i]
            self.phrase_vecs[phrase] = vec

    def embed_text(self, phrase: str) -> np.ndarray:
        return self.scale * self.phrase_vecs[phrase]

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        axis = _BEFORE_AXIS if marker_index(image) % 2 == 0 else _AFTER_AXIS
        return self.scale * axis


class DirectionalEmbedder(TextImageEmbedder):
    """Maps marker indices straight to fixed vectors; for directional-score
    constructions."""

    def __init__(self, table: dict[int, np.ndarray]):
        self.table = table

    def embed_text(self, phrase: str) -> np.ndarray:
        raise NotImplementedError

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(self.table[marker_index(image)], dtype=np.float64)


class StubFeatureProvider(PerceptualFeatureProvider):
    """Feature stages supplied by an arbitrary function of the image."""

    def __init__(self, fn, stages: int = 1):
        self.fn = fn
        self.stages = stages

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        return [self.fn(image) for _ in range(self.stages)]


# -- independent oracles ------------------------------------------------------------


def two_loop_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force per-pixel MSE, written as plain loops."""
    h, w, c = a.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                d = float(a[i, j, k]) - float(b[i, j, k])
                total += d * d
    return total / (h * w * c)


def manual_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale_dim: int):
    """Row-by-row softmax attention; returns (weights, output)."""
    nq = q.shape[0]
    weights = np.zeros((nq, k.shape[0]))
    for i in range(nq):
        scores = np.array([np.dot(q[i], k[j]) for j in range(k.shape[0])])
        scores = scores / np.sqrt(scale_dim)
        e = np.exp(scores - scores.max())
        weights[i] = e / e.sum()
    return weights, weights @ v


def blocky_test_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Block-constant float image in a clip-safe range."""
    cells = rng.uniform(0.15, 0.65, size=(8, 8, 3))
    reps = size // 8
    return np.repeat(np.repeat(cells, reps, axis=0), reps, axis=1)
