"""Scikit-learn style estimator over the inversion/editing pipeline.

fit(X, y) learns an instruction bank from before-images X and after-images
y; transform(X) edits new images with it. Parameters follow scikit-learn
conventions (stored verbatim in __init__, fitted state in trailing-
underscore attributes), so the estimator clones, pickles its params, and
composes with the wider ecosystem.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .backend.registry import get_backend
from .editor import EditConfig, edit_image
from .errors import ValidationError
from .initializer import PhraseVocabulary, propose_instruction
from .inversion import ExemplarSet, InversionConfig, run_inversion
from .validation import as_image_list, check_paired_images


class EditInverter(BaseEstimator, TransformerMixin):
    """Learn an editing effect from image pairs and apply it to new images.

    Parameters
    ----------
    backend : str, default="toy"
        Backend id in the registry.
    init_text : str, "auto", or None, default="auto"
        Seed instruction. "auto" runs the transformation-oriented
        initializer over the training pairs; None trains fixed-length
        blocks from the empty instruction.
    segments : int, default=5
        Number of timestep segments in the bank.
    steps_per_segment : int, default=1000
    learning_rate : float, default=0.001
    batch_size : int, default=1
    optimizer_kind : {"adam", "sgd"}, default="adam"
    caption_size : int, default=5
        Phrases per caption during auto-initialization.
    truncation : float, default=0.15
        Minimum similarity gap for a unique phrase to survive.
    s_text, s_image : float
        Guidance scales used by transform.
    sampler_steps : int, default=20
    switch_t : int or None
        Apply the bank only at timesteps >= switch_t during transform.
    seed : int, default=0

    Attributes
    ----------
    bank_ : InstructionBank
        The learned instruction bank.
    trace_ : TrainingTrace
        Per-step loss records from inversion.
    init_outcome_ : InitOutcome or None
        Initializer audit trail when init_text="auto".
    """

    def __init__(
        self,
        backend: str = "toy",
        init_text: Optional[str] = "auto",
        segments: int = 5,
        steps_per_segment: int = 1000,
        learning_rate: float = 0.001,
        batch_size: int = 1,
        optimizer_kind: str = "adam",
        caption_size: int = 5,
        truncation: float = 0.15,
        s_text: float = 7.5,
        s_image: float = 1.5,
        sampler_steps: int = 20,
        switch_t: Optional[int] = None,
        seed: int = 0,
    ):
        self.backend = backend
        self.init_text = init_text
        self.segments = segments
        self.steps_per_segment = steps_per_segment
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.optimizer_kind = optimizer_kind
        self.caption_size = caption_size
        self.truncation = truncation
        self.s_text = s_text
        self.s_image = s_image
        self.sampler_steps = sampler_steps
        self.switch_t = switch_t
        self.seed = seed

    def fit(self, X, y):
        """Invert the editing effect shown by pairs (X[i] -> y[i])."""
        before, after = check_paired_images(X, y)
        backend = get_backend(self.backend, self.seed)

        self.init_outcome_ = None
        if self.init_text == "auto":
            self.init_outcome_ = propose_instruction(
                before,
                after,
                PhraseVocabulary.bundled(),
                backend.embedder,
                r=self.caption_size,
                eta=self.truncation,
            )
            init_text = self.init_outcome_.instruction_text
        else:
            init_text = self.init_text

        config = InversionConfig(
            steps_per_segment=self.steps_per_segment,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            segments=self.segments,
            seed=self.seed,
            optimizer_kind=self.optimizer_kind,
        )
        exemplars = ExemplarSet(pairs=list(zip(before, after)))
        self.bank_, self.trace_ = run_inversion(backend, exemplars, init_text, config)
        self.backend_ = backend
        return self

    def transform(self, X):
        """Apply the learned edit; returns a stacked (n, H, W, 3) array."""
        if not hasattr(self, "bank_"):
            raise NotFittedError("EditInverter must be fitted before transform")
        images = as_image_list(X)
        config = EditConfig(
            s_text=self.s_text,
            s_image=self.s_image,
            steps=self.sampler_steps,
            seed=self.seed,
            switch_t=self.switch_t,
        )
        edited = [edit_image(self.backend_, self.bank_, img, config) for img in images]
        return np.stack(edited)

    def predict(self, X):
        """Alias for transform, for predict-shaped pipelines."""
        return self.transform(X)
