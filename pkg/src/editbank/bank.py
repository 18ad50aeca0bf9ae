"""Time-segmented instruction banks.

A bank holds, for each of `segment_count` contiguous timestep ranges and
each cross-attention layer, one pair of key/value blocks that replace the
first `token_count` instruction rows during denoising. Banks are plain
values: reads are concurrency-safe, and an inversion run owns its bank
exclusively while training.

Block values are kept at float32 precision (stored as float64 for the
math) so the on-disk format below is lossless and save/load round-trips
bitwise.

File format (extension `.itb`): 8-byte magic ``ITBANK01``, a 4-byte
little-endian length followed by a UTF-8 JSON manifest {format_version,
backend_id, m, j, init_text, layer_dims, training, payload_checksum},
then the payload: little-endian float32, segment-major, then layer, K
block before V block, each row-major (m, d_i). payload_checksum is the
CRC-32 of the payload bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend.contracts import DiffusionBackend, LayerShapeSpec
from .errors import (
    BankChecksumError,
    BankShapeError,
    BankVersionError,
    ValidationError,
)

MAGIC = b"ITBANK01"
FORMAT_VERSION = 1
NONE_TOKEN_COUNT = 10
DEFAULT_SEGMENTS = 5


def f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 grid point, kept as float64."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class TimeSegmentation:
    """Equal partition of [0, train_timesteps) into `segments` ranges.

    Segment 0 owns the lowest-noise timesteps; denoising therefore walks
    the segments from last to first.
    """

    segments: int
    train_timesteps: int

    def __post_init__(self):
        if not 1 <= self.segments <= self.train_timesteps:
            raise ValidationError(
                f"need 1 <= segments <= train_timesteps, got "
                f"{self.segments} / {self.train_timesteps}"
            )

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.train_timesteps:
            raise ValidationError(
                f"timestep {t} outside [0, {self.train_timesteps})"
            )
        return t


def segment_index(t: int, seg: TimeSegmentation) -> int:
    """Which segment owns timestep t: floor(t * segments / train_timesteps)."""
    t = seg.check_t(t)
    return (t * seg.segments) // seg.train_timesteps


def segment_bounds(segment: int, seg: TimeSegmentation) -> tuple[int, int]:
    """Half-open timestep range [lo, hi) owned by a segment."""
    if not 0 <= segment < seg.segments:
        raise ValidationError(f"segment {segment} outside [0, {seg.segments})")
    lo = -((-segment * seg.train_timesteps) // seg.segments)
    hi = -((-(segment + 1) * seg.train_timesteps) // seg.segments)
    return lo, hi


@dataclass
class InstructionBank:
    """Learned per-segment, per-layer K/V blocks plus their metadata.

    blocks[s][i] is a (keys, values) pair for segment s and attention
    layer i, each shaped (token_count, layer feature_dim).
    """

    token_count: int
    segment_count: int
    layers: tuple[LayerShapeSpec, ...]
    blocks: list[list[tuple[np.ndarray, np.ndarray]]]
    init_text: Optional[str]
    backend_id: str
    trained: bool = False
    training_config: Optional[dict] = None

    def __post_init__(self):
        if self.segment_count < 1:
            raise ValidationError("segment_count must be >= 1")
        if len(self.blocks) != self.segment_count:
            raise ValidationError("blocks do not cover every segment")
        for s, per_layer in enumerate(self.blocks):
            if len(per_layer) != len(self.layers):
                raise ValidationError(f"segment {s} missing layer blocks")
            for spec, (k, v) in zip(self.layers, per_layer):
                for name, block in (("K", k), ("V", v)):
                    if block.shape != (self.token_count, spec.feature_dim):
                        raise ValidationError(
                            f"segment {s} layer {spec.layer_index}: {name} shape "
                            f"{block.shape} != ({self.token_count}, {spec.feature_dim})"
                        )
                    if not np.all(np.isfinite(block)):
                        raise ValidationError(
                            f"segment {s} layer {spec.layer_index}: non-finite {name}"
                        )

    def segmentation(self, train_timesteps: int) -> TimeSegmentation:
        return TimeSegmentation(self.segment_count, train_timesteps)

    def equals(self, other: "InstructionBank") -> bool:
        if (
            self.token_count != other.token_count
            or self.segment_count != other.segment_count
            or self.layers != other.layers
            or self.init_text != other.init_text
            or self.backend_id != other.backend_id
            or self.trained != other.trained
            or self.training_config != other.training_config
        ):
            return False
        for mine, theirs in zip(self.blocks, other.blocks):
            for (k1, v1), (k2, v2) in zip(mine, theirs):
                if not (np.array_equal(k1, k2) and np.array_equal(v1, v2)):
                    return False
        return True


def bank_init_from_text(
    backend: DiffusionBackend,
    init_text: Optional[str],
    segments: int = DEFAULT_SEGMENTS,
) -> InstructionBank:
    """Fresh bank whose blocks start at the backend's own K/V for the text.

    A None init_text trains fixed-length features: NONE_TOKEN_COUNT rows
    seeded from the empty instruction's keys/values. Every segment gets an
    independent copy of the same initial blocks.
    """
    if segments < 1:
        raise ValidationError("segments must be >= 1")
    desc = backend.descriptor
    if init_text is None:
        tokens = backend.empty_tokens
        m = NONE_TOKEN_COUNT
    else:
        tokens = backend.tokenize(init_text)
        m = backend.content_length(tokens)
    if m < 1:
        raise ValidationError("init text has no content tokens")
    if m > desc.max_tokens:
        raise ValidationError(
            f"init text has {m} content tokens; max is {desc.max_tokens}"
        )

    per_layer = []
    for spec in desc.attention_layers:
        k, v = backend.text_kv(tokens, spec.layer_index)
        per_layer.append((f32_exact(k[:m]), f32_exact(v[:m])))
    blocks = [
        [(k.copy(), v.copy()) for k, v in per_layer] for _ in range(segments)
    ]
    return InstructionBank(
        token_count=m,
        segment_count=segments,
        layers=desc.attention_layers,
        blocks=blocks,
        init_text=init_text,
        backend_id=desc.backend_id,
    )


def bank_tokens(backend: DiffusionBackend, bank: InstructionBank) -> tuple[int, ...]:
    """Instruction tokens underlying a bank's overrides."""
    if bank.init_text is None:
        return backend.empty_tokens
    return backend.tokenize(bank.init_text)


def overrides_for(bank: InstructionBank, t: int, train_timesteps: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """The live per-layer (K, V) blocks owned by timestep t's segment."""
    seg = bank.segmentation(train_timesteps)
    return bank.blocks[segment_index(t, seg)]


# -- serialization -------------------------------------------------------------


def bank_save(bank: InstructionBank, path) -> None:
    """Write a bank atomically (temp file + rename)."""
    payload = bytearray()
    for per_layer in bank.blocks:
        for k, v in per_layer:
            payload += np.ascontiguousarray(k, dtype="<f4").tobytes()
            payload += np.ascontiguousarray(v, dtype="<f4").tobytes()
    payload = bytes(payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "backend_id": bank.backend_id,
        "m": bank.token_count,
        "j": bank.segment_count,
        "init_text": bank.init_text,
        "layer_dims": [spec.feature_dim for spec in bank.layers],
        "attn_scale_dims": [spec.attn_scale_dim for spec in bank.layers],
        "trained": bank.trained,
        "training": bank.training_config,
        "payload_checksum": zlib.crc32(payload),
    }
    blob = json.dumps(manifest, ensure_ascii=False).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def bank_load(path) -> InstructionBank:
    """Read a bank, verifying magic, version, checksum, and shapes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise BankVersionError(f"{path}: not an instruction-bank file (bad magic)")
    offset = len(MAGIC)
    (manifest_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if offset + manifest_len > len(raw):
        raise BankShapeError(f"{path}: manifest length exceeds file size")
    try:
        manifest = json.loads(raw[offset : offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankShapeError(f"{path}: unreadable manifest: {exc}") from exc
    offset += manifest_len
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BankVersionError(
            f"{path}: format_version {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    payload = raw[offset:]
    checksum = zlib.crc32(payload)
    if checksum != manifest.get("payload_checksum"):
        raise BankChecksumError(
            f"{path}: payload checksum {checksum:#010x} does not match manifest "
            f"{manifest.get('payload_checksum', 0):#010x}"
        )

    m = int(manifest["m"])
    j = int(manifest["j"])
    dims = [int(d) for d in manifest["layer_dims"]]
    scale_dims = [int(d) for d in manifest.get("attn_scale_dims", dims)]
    expected = 4 * 2 * m * sum(dims) * j
    if len(payload) != expected:
        raise BankShapeError(
            f"{path}: payload holds {len(payload)} bytes but manifest "
            f"(m={m}, j={j}, dims={dims}) requires {expected}"
        )

    flat = np.frombuffer(payload, dtype="<f4")
    blocks = []
    cursor = 0
    for _ in range(j):
        per_layer = []
        for d in dims:
            k = flat[cursor : cursor + m * d].reshape(m, d).astype(np.float64)
            cursor += m * d
            v = flat[cursor : cursor + m * d].reshape(m, d).astype(np.float64)
            cursor += m * d
            per_layer.append((k, v))
        blocks.append(per_layer)
    layers = tuple(
        LayerShapeSpec(layer_index=i, feature_dim=d, attn_scale_dim=sd)
        for i, (d, sd) in enumerate(zip(dims, scale_dims))
    )
    return InstructionBank(
        token_count=m,
        segment_count=j,
        layers=layers,
        blocks=blocks,
        init_text=manifest.get("init_text"),
        backend_id=manifest["backend_id"],
        trained=bool(manifest.get("trained", False)),
        training_config=manifest.get("training"),
    )
