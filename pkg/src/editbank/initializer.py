"""Transformation-oriented instruction initialization.

Given before/after image sets, find the vocabulary phrase that best
separates each side (highest mean-similarity gap), truncate weak phrases,
and assemble a "turn X into Y" seed instruction. Everything here is a
pure function over immutable inputs, so phrase scoring parallelizes
trivially.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .backend.contracts import TextImageEmbedder
from .errors import ValidationError

DEFAULT_CAPTION_SIZE = 5
DEFAULT_TRUNCATION = 0.15


@dataclass(frozen=True)
class PhraseVocabulary:
    """Deduplicated, ordered phrase list; order breaks score ties."""

    phrases: tuple[str, ...]
    source_path: str = "<memory>"

    def __post_init__(self):
        if not self.phrases:
            raise ValidationError("phrase vocabulary is empty")
        if len(set(self.phrases)) != len(self.phrases):
            raise ValidationError("phrase vocabulary contains duplicates")

    @classmethod
    def from_lines(cls, lines: Sequence[str], source_path: str = "<memory>") -> "PhraseVocabulary":
        seen: dict[str, None] = {}
        for line in lines:
            phrase = line.strip()
            if phrase and phrase not in seen:
                seen[phrase] = None
        return cls(tuple(seen), source_path)

    @classmethod
    def load(cls, path) -> "PhraseVocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_lines(fh.readlines(), str(path))

    @classmethod
    def bundled(cls) -> "PhraseVocabulary":
        text = resources.files("editbank.data").joinpath("vocabulary.txt").read_text("utf-8")
        return cls.from_lines(text.splitlines(), "<bundled>")

    def __len__(self) -> int:
        return len(self.phrases)

    def index(self, phrase: str) -> int:
        return self.phrases.index(phrase)


@dataclass(frozen=True)
class PhraseScore:
    """Audit record for one phrase: per-side similarity and their gap."""

    phrase: str
    similarity_x: float
    similarity_y: float
    sensitivity: float


@dataclass(frozen=True)
class InitOutcome:
    """Chosen unique phrases, the assembled instruction (None when the
    after-side phrase was truncated), and the full scoring audit trail."""

    p_x: Optional[str]
    p_y: Optional[str]
    instruction_text: Optional[str]
    scores: tuple[PhraseScore, ...] = field(default=())


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm embedding in similarity computation")
    return float(np.dot(a, b) / (na * nb))


def set_similarity(phrase: str, images: Sequence[np.ndarray], embedder: TextImageEmbedder) -> float:
    """Mean cosine similarity between a phrase and a set of images."""
    if not images:
        raise ValidationError("set_similarity needs at least one image")
    text_vec = np.asarray(embedder.embed_text(phrase), dtype=np.float64)
    return float(
        np.mean([_cosine(text_vec, np.asarray(embedder.embed_image(img), dtype=np.float64))
                 for img in images])
    )


def caption_search(
    images: Sequence[np.ndarray],
    vocab: PhraseVocabulary,
    r: int,
    embedder: TextImageEmbedder,
) -> list[str]:
    """The r vocabulary phrases most similar to the image set, descending.

    Ties keep vocabulary order, so the result is reproducible for any
    embedder.
    """
    if r < 1:
        raise ValidationError("caption size r must be >= 1")
    if len(vocab) < r:
        raise ValidationError(
            f"vocabulary has {len(vocab)} phrases; caption needs {r}"
        )
    scored = [
        (-set_similarity(phrase, images, embedder), idx, phrase)
        for idx, phrase in enumerate(vocab.phrases)
    ]
    scored.sort()
    return [phrase for _, _, phrase in scored[:r]]


def unique_phrase(
    side: str,
    before_images: Sequence[np.ndarray],
    after_images: Sequence[np.ndarray],
    vocab: PhraseVocabulary,
    embedder: TextImageEmbedder,
    r: int = DEFAULT_CAPTION_SIZE,
    eta: float = DEFAULT_TRUNCATION,
) -> tuple[Optional[str], list[PhraseScore]]:
    """Most side-distinctive caption phrase, or None below the cutoff.

    side "x" captions the before set and scores sim(before) - sim(after);
    side "y" mirrors it. The returned scores list covers every caption
    phrase for auditability.
    """
    if side not in ("x", "y"):
        raise ValidationError(f"side must be 'x' or 'y', got {side!r}")
    if not before_images or not after_images:
        raise ValidationError("both image sets must be nonempty")
    own = before_images if side == "x" else after_images
    candidates = caption_search(own, vocab, r, embedder)

    scores = []
    for phrase in candidates:
        sim_x = set_similarity(phrase, before_images, embedder)
        sim_y = set_similarity(phrase, after_images, embedder)
        sens = sim_x - sim_y if side == "x" else sim_y - sim_x
        scores.append(PhraseScore(phrase, sim_x, sim_y, sens))

    best = max(
        scores,
        key=lambda s: (s.sensitivity, -vocab.index(s.phrase)),
    )
    chosen = best.phrase if best.sensitivity >= eta else None
    return chosen, scores


def build_init_instruction(p_x: Optional[str], p_y: Optional[str]) -> Optional[str]:
    """Assemble the transformation template; None means no seed instruction.

    A missing after-side phrase makes the whole instruction None; a missing
    before-side phrase falls back to "turn it into ...".
    """
    if p_y is None:
        return None
    if p_x is None:
        return f"turn it into {p_y}"
    return f"turn {p_x} into {p_y}"


def propose_instruction(
    before_images: Sequence[np.ndarray],
    after_images: Sequence[np.ndarray],
    vocab: PhraseVocabulary,
    embedder: TextImageEmbedder,
    r: int = DEFAULT_CAPTION_SIZE,
    eta: float = DEFAULT_TRUNCATION,
) -> InitOutcome:
    """Run both unique-phrase extractions and fill the template."""
    p_x, scores_x = unique_phrase("x", before_images, after_images, vocab, embedder, r, eta)
    p_y, scores_y = unique_phrase("y", before_images, after_images, vocab, embedder, r, eta)
    return InitOutcome(
        p_x=p_x,
        p_y=p_y,
        instruction_text=build_init_instruction(p_x, p_y),
        scores=tuple(scores_x + scores_y),
    )
