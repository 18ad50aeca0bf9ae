"""Paired-edit benchmark handling.

On-disk layout, one dataset per subdirectory:

    root/<dataset>/metadata.json        {"name", "category", "instruction"}
    root/<dataset>/train/before_000.png + after_000.png + ...
    root/<dataset>/test/before_000.png + after_000.png + ...

category is "local" or "global" (case-insensitive). The loader validates
strictly and reports every problem it finds, with paths. A synthetic
generator writes desk-scale fixture suites whose edits are exact uint8
transforms, so oracle tests can assert bit-exact outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .backend.contracts import PerceptualFeatureProvider, TextImageEmbedder
from .errors import ValidationError
from .metrics import MetricsReport, clip_directional, lpips, psnr, ssim

CATEGORIES = ("local", "global")
_LUMA = np.array([0.299, 0.587, 0.114])


class SuiteValidationError(ValidationError):
    """Carries every problem found while validating a suite."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        summary = "\n  ".join(self.problems)
        super().__init__(f"benchmark validation failed:\n  {summary}")


def load_image(path) -> np.ndarray:
    """PNG -> float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Float [0,1] (or uint8) image -> 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass
class BenchmarkDataset:
    """One editing effect: metadata plus paired image paths."""

    name: str
    category: str
    instruction_text: str
    train_pairs: list[tuple[Path, Path]]
    test_pairs: list[tuple[Path, Path]]

    def load_train_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(load_image(b), load_image(a)) for b, a in self.train_pairs]

    def load_test_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(load_image(b), load_image(a)) for b, a in self.test_pairs]


@dataclass
class BenchmarkSuite:
    datasets: list[BenchmarkDataset]
    root: Path

    def by_name(self, name: str) -> BenchmarkDataset:
        for ds in self.datasets:
            if ds.name == name:
                return ds
        raise KeyError(name)


def _collect_pairs(split_dir: Path, problems: list[str]) -> list[tuple[Path, Path]]:
    if not split_dir.is_dir():
        problems.append(f"{split_dir}: missing split directory")
        return []
    befores = {p.stem[len("before_"):]: p for p in sorted(split_dir.glob("before_*.png"))}
    afters = {p.stem[len("after_"):]: p for p in sorted(split_dir.glob("after_*.png"))}
    pairs = []
    for idx in sorted(befores):
        if idx not in afters:
            problems.append(f"{split_dir}: before_{idx}.png has no after_{idx}.png")
        else:
            pairs.append((befores[idx], afters[idx]))
    for idx in sorted(afters):
        if idx not in befores:
            problems.append(f"{split_dir}: after_{idx}.png has no before_{idx}.png")
    if not befores and not afters:
        problems.append(f"{split_dir}: no image pairs")
    return pairs


def _validate_images(pairs: list[tuple[Path, Path]], problems: list[str]) -> None:
    size = None
    for before, after in pairs:
        for path in (before, after):
            try:
                with Image.open(path) as img:
                    img.load()
                    this_size = img.size
            except Exception as exc:
                problems.append(f"{path}: unreadable image ({exc})")
                continue
            if size is None:
                size = this_size
            elif this_size != size:
                problems.append(
                    f"{path}: size {this_size} differs from dataset size {size}"
                )


def load_suite(root) -> BenchmarkSuite:
    """Load and strictly validate every dataset under root."""
    root = Path(root)
    if not root.is_dir():
        raise SuiteValidationError([f"{root}: benchmark root does not exist"])
    problems: list[str] = []
    datasets: list[BenchmarkDataset] = []
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        problems.append(f"{root}: no dataset directories")
    for sub in subdirs:
        meta_path = sub / "metadata.json"
        if not meta_path.is_file():
            problems.append(f"{meta_path}: missing metadata.json")
            continue
        try:
            meta = json.loads(meta_path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            problems.append(f"{meta_path}: unreadable metadata ({exc})")
            continue
        name = meta.get("name") or sub.name
        category = str(meta.get("category", "")).lower()
        if category not in CATEGORIES:
            problems.append(
                f"{meta_path}: category {meta.get('category')!r} is not local/global"
            )
            continue
        train = _collect_pairs(sub / "train", problems)
        test = _collect_pairs(sub / "test", problems)
        _validate_images(train + test, problems)
        datasets.append(
            BenchmarkDataset(
                name=name,
                category=category,
                instruction_text=str(meta.get("instruction", "")),
                train_pairs=train,
                test_pairs=test,
            )
        )
    names = [ds.name for ds in datasets]
    for name in sorted(set(names)):
        if names.count(name) > 1:
            problems.append(f"{root}: duplicate dataset name {name!r}")
    if problems:
        raise SuiteValidationError(problems)
    return BenchmarkSuite(datasets=datasets, root=root)


def load_pairs_dir(path) -> list[tuple[Path, Path]]:
    """Accept either a bare before_/after_ directory, a dataset directory
    (uses its train split), or a split directory."""
    path = Path(path)
    problems: list[str] = []
    if (path / "train").is_dir():
        pairs = _collect_pairs(path / "train", problems)
    else:
        pairs = _collect_pairs(path, problems)
    _validate_images(pairs, problems)
    if problems:
        raise SuiteValidationError(problems)
    return pairs


# -- synthetic fixtures ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Recipe for one generated dataset; the effect is an exact uint8 map."""

    name: str
    category: str
    effect: str
    instruction: str = ""
    train_pairs: int = 4
    test_pairs: int = 2
    resolution: tuple[int, int] = (32, 32)
    amount: float = 0.3

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"category must be one of {CATEGORIES}")
        if self.effect not in EFFECTS:
            raise ValidationError(f"unknown effect {self.effect!r}; have {sorted(EFFECTS)}")
        if self.train_pairs < 1 or self.test_pairs < 1:
            raise ValidationError("need at least one train and one test pair")


def _effect_channel_shift(before: np.ndarray, amount: float) -> np.ndarray:
    offset = int(round(amount * 255.0))
    after = before.astype(np.int64).copy()
    after[:, :, 0] = np.clip(after[:, :, 0] + offset, 0, 255)
    return after.astype(np.uint8)


def _effect_grayscale(before: np.ndarray, amount: float) -> np.ndarray:
    luma = np.clip(np.round(before.astype(np.float64) @ _LUMA), 0, 255).astype(np.uint8)
    return np.repeat(luma[:, :, None], 3, axis=2)


def _effect_invert_region(before: np.ndarray, amount: float) -> np.ndarray:
    h, w = before.shape[:2]
    after = before.copy()
    rows = slice(h // 4, h // 2)
    cols = slice(w // 4, w // 2)
    after[rows, cols, 0] = 255 - after[rows, cols, 0]
    return after


EFFECTS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "channel_shift": _effect_channel_shift,
    "grayscale": _effect_grayscale,
    "invert_region": _effect_invert_region,
}


def apply_effect(effect: str, before_uint8: np.ndarray, amount: float = 0.3) -> np.ndarray:
    """Ground-truth transform of a synthetic dataset, on uint8 pixels."""
    return EFFECTS[effect](before_uint8, amount)


def _blocky_image(rng: np.random.Generator, resolution: tuple[int, int]) -> np.ndarray:
    """8x8 random cells upsampled to full resolution; values keep headroom
    so channel shifts never clip."""
    cells = rng.integers(30, 170, size=(8, 8, 3), dtype=np.int64).astype(np.uint8)
    h, w = resolution
    rows = (np.arange(h) * 8) // h
    cols = (np.arange(w) * 8) // w
    return cells[rows][:, cols]


def make_synthetic_suite(root, specs: Sequence[SyntheticDatasetSpec], seed: int = 0) -> BenchmarkSuite:
    """Write a procedurally generated suite and return it (re-loaded).

    Deterministic: a fixed seed reproduces every byte on disk.
    """
    root = Path(root)
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValidationError("synthetic dataset names must be unique")
    for spec in specs:
        ds_dir = root / spec.name
        (ds_dir / "train").mkdir(parents=True, exist_ok=True)
        (ds_dir / "test").mkdir(parents=True, exist_ok=True)
        (ds_dir / "metadata.json").write_text(
            json.dumps(
                {
                    "name": spec.name,
                    "category": spec.category,
                    "instruction": spec.instruction,
                    "effect": spec.effect,
                    "amount": spec.amount,
                },
                indent=2,
            ),
            "utf-8",
        )
        for split, count in (("train", spec.train_pairs), ("test", spec.test_pairs)):
            for idx in range(count):
                before = _blocky_image(rng, spec.resolution)
                after = apply_effect(spec.effect, before, spec.amount)
                save_image(ds_dir / split / f"before_{idx:03d}.png", before)
                save_image(ds_dir / split / f"after_{idx:03d}.png", after)
    return load_suite(root)


# -- evaluation --------------------------------------------------------------------


@dataclass
class DatasetResult:
    name: str
    category: str
    report: MetricsReport


@dataclass
class SuiteEvaluation:
    results: list[DatasetResult] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def aggregate(self, category: Optional[str] = None) -> Optional[MetricsReport]:
        """Unweighted mean over datasets (optionally one category)."""
        picked = [
            r.report for r in self.results if category is None or r.category == category
        ]
        if not picked:
            return None
        return MetricsReport(
            psnr_db=float(np.mean([r.psnr_db for r in picked])),
            ssim=float(np.mean([r.ssim for r in picked])),
            lpips=float(np.mean([r.lpips for r in picked])),
            clip_direction=float(np.mean([r.clip_direction for r in picked])),
            counts=int(sum(r.counts for r in picked)),
        )

    def as_dict(self) -> dict:
        aggregates = {}
        for key, category in (("global", "global"), ("local", "local"), ("overall", None)):
            agg = self.aggregate(category)
            aggregates[key] = agg.as_dict() if agg else None
        return {
            "datasets": [
                {"name": r.name, "category": r.category, **r.report.as_dict()}
                for r in self.results
            ],
            "aggregates": aggregates,
            "failures": dict(self.failures),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


NEUTRAL_DIRECTION_SCORE = 1.0


def evaluate_dataset(
    dataset: BenchmarkDataset,
    edit_fn: Callable[[np.ndarray], np.ndarray],
    embedder: TextImageEmbedder,
    feature_provider: PerceptualFeatureProvider,
) -> MetricsReport:
    """Metrics over a dataset's test pairs.

    The directional score uses the dataset's train pairs as the reference
    edit direction. A degenerate (zero-norm) mean direction, as a no-op
    edit_fn produces, scores the neutral 1.0 so the report stays finite.
    """
    test = dataset.load_test_pairs()
    train = dataset.load_train_pairs()
    outputs = [edit_fn(before) for before, _ in test]
    try:
        direction = clip_directional(
            inputs=[before for before, _ in test],
            outputs=outputs,
            ref_before=[before for before, _ in train],
            ref_after=[after for _, after in train],
            embedder=embedder,
        )
    except ValidationError as exc:
        if "zero-norm" not in str(exc):
            raise
        direction = NEUTRAL_DIRECTION_SCORE
    return MetricsReport(
        psnr_db=float(np.mean([psnr(out, after) for out, (_, after) in zip(outputs, test)])),
        ssim=float(np.mean([ssim(out, after) for out, (_, after) in zip(outputs, test)])),
        lpips=float(
            np.mean([lpips(out, after, feature_provider) for out, (_, after) in zip(outputs, test)])
        ),
        clip_direction=direction,
        counts=len(test),
    )


def evaluate_suite(
    suite: BenchmarkSuite,
    edit_fn: Callable[[np.ndarray], np.ndarray],
    embedder: TextImageEmbedder,
    feature_provider: PerceptualFeatureProvider,
) -> SuiteEvaluation:
    """Evaluate every dataset; a failing edit_fn marks that dataset failed
    and the run continues. Results are independent of dataset order."""
    evaluation = SuiteEvaluation()
    for dataset in suite.datasets:
        try:
            report = evaluate_dataset(dataset, edit_fn, embedder, feature_provider)
        except Exception as exc:
            evaluation.failures[dataset.name] = str(exc)
            continue
        evaluation.results.append(DatasetResult(dataset.name, dataset.category, report))
    evaluation.results.sort(key=lambda r: r.name)
    return evaluation


def render_table(evaluation: SuiteEvaluation, method: str = "ours") -> str:
    """Aligned plain-text summary: global, local, then overall rows."""
    header = ("Datasets", "Method", "PSNR", "SSIM", "LPIPS", "Direct.")
    rows = [header]
    for label, category in (("global", "global"), ("local", "local"), ("overall", None)):
        agg = evaluation.aggregate(category)
        if agg is None:
            continue
        rows.append(
            (
                label,
                method,
                f"{agg.psnr_db:.2f}",
                f"{agg.ssim:.4f}",
                f"{agg.lpips:.4f}",
                f"{agg.clip_direction:.4f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
