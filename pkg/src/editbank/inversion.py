"""Inversion loop: fit instruction-bank blocks to exemplar pairs.

Each training step samples one pair and one timestep inside the segment
being trained, noises the encoded after-image to that timestep, and takes
a gradient step on the squared error between the sampled noise and the
denoiser's prediction conditioned on the before-image plus the segment's
K/V blocks. Backend weights never change; each timestep's gradients touch
exactly one segment, so segments train independently.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .backend.contracts import ConditioningBundle, DiffusionBackend, LatentState
from .bank import (
    InstructionBank,
    bank_init_from_text,
    bank_save,
    bank_tokens,
    f32_exact,
    segment_bounds,
)
from .errors import TrainingDivergedError, ValidationError
from .validation import check_paired_images

CHECKPOINT_INTERVAL = 250


@dataclass
class ExemplarSet:
    """Paired before/after images demonstrating one editing effect."""

    pairs: list[tuple[np.ndarray, np.ndarray]]
    resolution: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not self.pairs:
            raise ValidationError("exemplar set needs at least one pair")
        before = [p[0] for p in self.pairs]
        after = [p[1] for p in self.pairs]
        before, after = check_paired_images(before, after)
        self.pairs = list(zip(before, after))
        self.resolution = before[0].shape[:2]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class InversionConfig:
    steps_per_segment: int = 1000
    learning_rate: float = 0.001
    batch_size: int = 1
    segments: int = 5
    seed: int = 0
    optimizer_kind: str = "adam"

    def __post_init__(self):
        if self.steps_per_segment < 1 or self.batch_size < 1 or self.segments < 1:
            raise ValidationError("steps_per_segment, batch_size, segments must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ValidationError("optimizer_kind must be 'adam' or 'sgd'")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    segment: int
    step: int
    t: int
    loss: float


@dataclass
class TrainingTrace:
    records: list[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def losses(self, segment: Optional[int] = None) -> np.ndarray:
        values = [r.loss for r in self.records if segment is None or r.segment == segment]
        return np.asarray(values)

    def smoothed_loss(self, segment: int, window: int = 100) -> tuple[float, float]:
        """Mean loss over the first and last `window` steps of a segment."""
        losses = self.losses(segment)
        w = min(window, len(losses))
        return float(losses[:w].mean()), float(losses[-w:].mean())

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps({"segment": r.segment, "step": r.step, "t": r.t, "loss": r.loss})
            for r in self.records
        )


class _BlockOptimizer:
    """Adam or plain SGD over one segment's K/V blocks."""

    def __init__(self, kind: str, lr: float, shapes: Sequence[tuple[int, int]]):
        self.kind = kind
        self.lr = lr
        self.step_count = 0
        if kind == "adam":
            self.m = [(np.zeros(s), np.zeros(s)) for s in shapes]
            self.v = [(np.zeros(s), np.zeros(s)) for s in shapes]

    def apply(
        self,
        blocks: list[tuple[np.ndarray, np.ndarray]],
        grads: list[tuple[np.ndarray, np.ndarray]],
    ) -> None:
        self.step_count += 1
        if self.kind == "sgd":
            for (k, v), (gk, gv) in zip(blocks, grads):
                k -= self.lr * gk
                v -= self.lr * gv
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            corr1 = 1.0 - b1 ** self.step_count
            corr2 = 1.0 - b2 ** self.step_count
            for i, ((k, v), (gk, gv)) in enumerate(zip(blocks, grads)):
                for block, grad, mom, sec in (
                    (k, gk, self.m[i][0], self.v[i][0]),
                    (v, gv, self.m[i][1], self.v[i][1]),
                ):
                    mom *= b1
                    mom += (1 - b1) * grad
                    sec *= b2
                    sec += (1 - b2) * grad * grad
                    block -= self.lr * (mom / corr1) / (np.sqrt(sec / corr2) + eps)
        for k, v in blocks:
            k[:] = f32_exact(k)
            v[:] = f32_exact(v)


def _sample_loss_and_grads(
    backend: DiffusionBackend,
    bank: InstructionBank,
    segment: int,
    pair_latents: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
) -> tuple[float, int, list[tuple[np.ndarray, np.ndarray]]]:
    """Draw (t, noise) for one pair and evaluate loss plus block gradients."""
    seg = bank.segmentation(backend.descriptor.train_timesteps)
    lo, hi = segment_bounds(segment, seg)
    t = int(rng.integers(lo, hi))
    cond_latent, target_latent = pair_latents

    eps = rng.standard_normal(backend.descriptor.latent_shape)
    z_t = backend.forward_noise(target_latent, t, eps)
    cond = ConditioningBundle(
        image_latent=cond_latent,
        instruction_tokens=bank_tokens(backend, bank),
        kv_overrides=bank.blocks[segment],
    )
    loss, grads = backend.grad_wrt_overrides(LatentState(z_t, t), cond, eps)
    return loss, t, grads


def inversion_step(
    backend: DiffusionBackend,
    bank: InstructionBank,
    segment: int,
    pair_latents: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    optimizer: _BlockOptimizer,
) -> tuple[float, int]:
    """One single-pair stochastic update of a segment's blocks.

    pair_latents is (encoded before, encoded after). The timestep is drawn
    uniformly from the segment's range, the noise target is fresh standard
    normal, and only the owning segment's blocks change.
    """
    loss, t, grads = _sample_loss_and_grads(backend, bank, segment, pair_latents, rng)
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss} in segment {segment} "
            f"(optimizer step {optimizer.step_count})",
            segment=segment,
            step=optimizer.step_count,
        )
    optimizer.apply(bank.blocks[segment], grads)
    return loss, t


def run_inversion(
    backend: DiffusionBackend,
    exemplars: ExemplarSet,
    init_text: Optional[str],
    config: InversionConfig,
    checkpoint_path=None,
) -> tuple[InstructionBank, TrainingTrace]:
    """Train a fresh bank over all segments, highest-noise segment first.

    Segments are mutually independent, so the order is a convention;
    training walks them the way the sampler will visit them. Deterministic
    for a fixed seed. When checkpoint_path is set, the bank is snapshotted
    there every CHECKPOINT_INTERVAL steps (atomic write, so an interrupted
    run keeps its last checkpoint).
    """
    started = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    bank = bank_init_from_text(backend, init_text, config.segments)
    bank.training_config = config.echo()

    latents = [
        (backend.encode_image(before), backend.encode_image(after))
        for before, after in exemplars.pairs
    ]
    shapes = [(bank.token_count, spec.feature_dim) for spec in bank.layers]

    trace = TrainingTrace()
    global_step = 0
    for segment in reversed(range(config.segments)):
        optimizer = _BlockOptimizer(config.optimizer_kind, config.learning_rate, shapes)
        for step in range(config.steps_per_segment):
            if config.batch_size == 1:
                idx = int(rng.integers(0, len(latents)))
                loss, last_t = inversion_step(
                    backend, bank, segment, latents[idx], rng, optimizer
                )
            else:
                acc = None
                losses = []
                for _ in range(config.batch_size):
                    idx = int(rng.integers(0, len(latents)))
                    sample_loss, last_t, grads = _sample_loss_and_grads(
                        backend, bank, segment, latents[idx], rng
                    )
                    losses.append(sample_loss)
                    if acc is None:
                        acc = [(gk.copy(), gv.copy()) for gk, gv in grads]
                    else:
                        for (ak, av), (gk, gv) in zip(acc, grads):
                            ak += gk
                            av += gv
                loss = float(np.mean(losses))
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss} in segment {segment} (step {step})",
                        segment=segment,
                        step=step,
                    )
                scale = 1.0 / config.batch_size
                optimizer.apply(
                    bank.blocks[segment],
                    [(ak * scale, av * scale) for ak, av in acc],
                )
            trace.records.append(
                StepRecord(segment=segment, step=step, t=last_t, loss=float(loss))
            )
            global_step += 1
            if checkpoint_path is not None and global_step % CHECKPOINT_INTERVAL == 0:
                bank_save(bank, checkpoint_path)

    bank.trained = True
    trace.wall_time = time.perf_counter() - started
    if checkpoint_path is not None:
        bank_save(bank, checkpoint_path)
    return bank, trace
