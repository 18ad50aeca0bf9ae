import json

import numpy as np
import pytest
from PIL import Image

from editbank import (
    MetricsReport,
    SyntheticDatasetSpec,
    ValidationError,
    load_suite,
    make_synthetic_suite,
    psnr,
    render_table,
)
from editbank.benchmark import (
    DatasetResult,
    SuiteEvaluation,
    SuiteValidationError,
    apply_effect,
    evaluate_dataset,
    evaluate_suite,
    load_image,
    load_pairs_dir,
    save_image,
)
from helpers import StubFeatureProvider


class _MeanEmbedder:
    """Channel means as a 3-vector; enough for directional scores."""

    def embed_text(self, phrase):
        raise NotImplementedError

    def embed_image(self, image):
        return image.mean(axis=(0, 1))


def _specs():
    return [
        SyntheticDatasetSpec(
            name="gray_world", category="global", effect="grayscale",
            instruction="make it black and white", train_pairs=4, test_pairs=2,
        ),
        SyntheticDatasetSpec(
            name="patch_recolor", category="local", effect="invert_region",
            instruction="recolor the patch", train_pairs=4, test_pairs=2,
        ),
    ]


class TestSyntheticSuite:
    def test_image_count_on_disk(self, tmp_path):
        make_synthetic_suite(tmp_path, _specs(), seed=3)
        pngs = sorted(tmp_path.rglob("*.png"))
        assert len(pngs) == 2 * (4 + 2) * 2

    def test_grayscale_after_equals_rounded_luma(self, two_dataset_suite):
        dataset = two_dataset_suite.by_name("gray_world")
        for before_path, after_path in dataset.train_pairs + dataset.test_pairs:
            before = np.asarray(Image.open(before_path).convert("RGB"))
            after = np.asarray(Image.open(after_path).convert("RGB"))
            assert np.array_equal(after, apply_effect("grayscale", before))

    def test_channel_shift_is_exact_uint8_arithmetic(self, shift_suite):
        dataset = shift_suite.datasets[0]
        for before_path, after_path in dataset.train_pairs + dataset.test_pairs:
            before = np.asarray(Image.open(before_path).convert("RGB"))
            after = np.asarray(Image.open(after_path).convert("RGB"))
            expected = before.astype(np.int64)
            expected[:, :, 0] = np.clip(expected[:, :, 0] + 76, 0, 255)
            assert np.array_equal(after, expected.astype(np.uint8))
            assert np.array_equal(after[:, :, 1:], before[:, :, 1:])

    def test_same_seed_identical_bytes(self, tmp_path):
        roots = []
        for name in ("a", "b"):
            root = tmp_path / name
            make_synthetic_suite(root, _specs(), seed=42)
            roots.append(root)
        files_a = sorted(roots[0].rglob("*"))
        files_b = sorted(roots[1].rglob("*"))
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            if fa.is_file():
                assert fa.read_bytes() == fb.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        make_synthetic_suite(tmp_path / "a", _specs(), seed=1)
        make_synthetic_suite(tmp_path / "b", _specs(), seed=2)
        a = (tmp_path / "a/gray_world/train/before_000.png").read_bytes()
        b = (tmp_path / "b/gray_world/train/before_000.png").read_bytes()
        assert a != b

    def test_generated_suite_passes_loader(self, tmp_path):
        make_synthetic_suite(tmp_path, _specs(), seed=9)
        suite = load_suite(tmp_path)
        assert [ds.name for ds in suite.datasets] == ["gray_world", "patch_recolor"]
        assert {ds.category for ds in suite.datasets} == {"global", "local"}


class TestLoader:
    def test_loads_two_datasets_with_categories(self, two_dataset_suite):
        assert len(two_dataset_suite.datasets) == 2
        assert two_dataset_suite.by_name("gray_world").category == "global"
        assert two_dataset_suite.by_name("patch_recolor").category == "local"
        assert two_dataset_suite.by_name("gray_world").instruction_text

    def test_missing_after_image_names_index(self, tmp_path):
        make_synthetic_suite(
            tmp_path, [_specs()[0].__class__(
                name="gray_world", category="global", effect="grayscale",
                train_pairs=4, test_pairs=2,
            )], seed=3,
        )
        (tmp_path / "gray_world/train/after_003.png").unlink()
        with pytest.raises(SuiteValidationError, match="003"):
            load_suite(tmp_path)

    def test_uppercase_category_normalized(self, tmp_path):
        make_synthetic_suite(tmp_path, [_specs()[0]], seed=3)
        meta_path = tmp_path / "gray_world/metadata.json"
        meta = json.loads(meta_path.read_text())
        meta["category"] = "GLOBAL"
        meta_path.write_text(json.dumps(meta))
        assert load_suite(tmp_path).datasets[0].category == "global"

    def test_unknown_category_rejected(self, tmp_path):
        make_synthetic_suite(tmp_path, [_specs()[0]], seed=3)
        meta_path = tmp_path / "gray_world/metadata.json"
        meta = json.loads(meta_path.read_text())
        meta["category"] = "regional"
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(SuiteValidationError, match="regional"):
            load_suite(tmp_path)

    def test_missing_metadata_reported_with_path(self, tmp_path):
        make_synthetic_suite(tmp_path, [_specs()[0]], seed=3)
        (tmp_path / "gray_world/metadata.json").unlink()
        with pytest.raises(SuiteValidationError, match="metadata.json"):
            load_suite(tmp_path)

    def test_unreadable_image_reported(self, tmp_path):
        make_synthetic_suite(tmp_path, [_specs()[0]], seed=3)
        (tmp_path / "gray_world/train/before_001.png").write_bytes(b"not a png")
        with pytest.raises(SuiteValidationError, match="before_001"):
            load_suite(tmp_path)

    def test_problems_aggregate_across_datasets(self, tmp_path):
        make_synthetic_suite(tmp_path, _specs(), seed=3)
        (tmp_path / "gray_world/train/after_000.png").unlink()
        (tmp_path / "patch_recolor/test/after_001.png").unlink()
        with pytest.raises(SuiteValidationError) as err:
            load_suite(tmp_path)
        assert len(err.value.problems) == 2

    def test_pairs_dir_accepts_bare_and_dataset_layouts(self, tmp_path, two_dataset_suite):
        root = two_dataset_suite.root / "gray_world"
        assert len(load_pairs_dir(root)) == 4
        assert len(load_pairs_dir(root / "train")) == 4
        assert len(load_pairs_dir(root / "test")) == 2


class TestImageIO:
    def test_png_roundtrip_exact_on_uint8_grid(self, tmp_path, rng):
        arr = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        path = tmp_path / "x.png"
        save_image(path, arr)
        assert np.array_equal(load_image(path), arr.astype(np.float64) / 255.0)

    def test_float_save_quantizes_by_rounding(self, tmp_path):
        img = np.full((8, 8, 3), 0.5)
        path = tmp_path / "y.png"
        save_image(path, img)
        assert np.array_equal(
            np.asarray(Image.open(path)), np.full((8, 8, 3), 128, dtype=np.uint8)
        )


class TestEvaluation:
    def _providers(self):
        return _MeanEmbedder(), StubFeatureProvider(lambda img: img, stages=2)

    def test_identity_edit_fn_reproduces_pairwise_psnr(self, two_dataset_suite):
        embedder, provider = self._providers()
        dataset = two_dataset_suite.by_name("gray_world")
        report = evaluate_dataset(dataset, lambda img: img, embedder, provider)
        expected = np.mean([psnr(b, a) for b, a in dataset.load_test_pairs()])
        assert report.psnr_db == pytest.approx(expected, abs=1e-12)

    def test_oracle_edit_fn_hits_caps(self, two_dataset_suite):
        embedder, provider = self._providers()
        evaluation = evaluate_suite(
            two_dataset_suite,
            _oracle_edit_fn(two_dataset_suite),
            embedder,
            provider,
        )
        assert not evaluation.failures
        for result in evaluation.results:
            assert result.report.psnr_db == 99.0
            assert result.report.ssim == pytest.approx(1.0, abs=1e-9)
            assert result.report.lpips == 0.0
            assert result.report.counts == 2

    def test_overall_aggregate_is_count_weighted(self, two_dataset_suite):
        embedder, provider = self._providers()
        evaluation = evaluate_suite(
            two_dataset_suite, lambda img: img, embedder, provider
        )
        local = evaluation.aggregate("local")
        global_ = evaluation.aggregate("global")
        overall = evaluation.aggregate(None)
        n_local = sum(1 for r in evaluation.results if r.category == "local")
        n_global = sum(1 for r in evaluation.results if r.category == "global")
        expected = (n_local * local.psnr_db + n_global * global_.psnr_db) / (
            n_local + n_global
        )
        assert overall.psnr_db == pytest.approx(expected, abs=1e-12)

    def test_order_independence(self, two_dataset_suite):
        import copy

        embedder, provider = self._providers()
        forward = evaluate_suite(two_dataset_suite, lambda img: img, embedder, provider)
        reversed_suite = copy.copy(two_dataset_suite)
        reversed_suite.datasets = list(reversed(two_dataset_suite.datasets))
        backward = evaluate_suite(reversed_suite, lambda img: img, embedder, provider)
        assert forward.as_dict() == backward.as_dict()

    def test_failing_edit_fn_marks_dataset_and_continues(self, two_dataset_suite):
        embedder, provider = self._providers()
        gray_tests = [
            b for b, _ in two_dataset_suite.by_name("gray_world").load_test_pairs()
        ]

        def edit_fn(image):
            if any(np.array_equal(image, b) for b in gray_tests):
                raise RuntimeError("boom")
            return image

        evaluation = evaluate_suite(two_dataset_suite, edit_fn, embedder, provider)
        assert set(evaluation.failures) == {"gray_world"}
        assert [r.name for r in evaluation.results] == ["patch_recolor"]

    def test_report_json_structure(self, two_dataset_suite):
        embedder, provider = self._providers()
        evaluation = evaluate_suite(two_dataset_suite, lambda img: img, embedder, provider)
        doc = json.loads(evaluation.to_json())
        assert {d["name"] for d in doc["datasets"]} == {"gray_world", "patch_recolor"}
        assert set(doc["aggregates"]) == {"global", "local", "overall"}
        for key in ("psnr_db", "ssim", "lpips", "clip_direction", "counts"):
            assert key in doc["aggregates"]["overall"]


def _oracle_edit_fn(suite):
    lookup = []
    for dataset in suite.datasets:
        for before, after in dataset.load_test_pairs():
            lookup.append((before, after))

    def edit_fn(image):
        for before, after in lookup:
            if np.array_equal(image, before):
                return after
        raise AssertionError("unknown test image")

    return edit_fn


class TestTable:
    def _planted_evaluation(self):
        # category means chosen so the overall row reads 20.68 / 0.6922 /
        # 0.1918 / 0.3140
        return SuiteEvaluation(
            results=[
                DatasetResult(
                    "g", "global",
                    MetricsReport(18.66, 0.5842, 0.2526, 0.2798, counts=5),
                ),
                DatasetResult(
                    "l", "local",
                    MetricsReport(22.70, 0.8002, 0.1310, 0.3482, counts=5),
                ),
            ]
        )

    def test_sections_in_published_order(self):
        table = render_table(self._planted_evaluation())
        lines = table.splitlines()
        assert lines[0].split() == ["Datasets", "Method", "PSNR", "SSIM", "LPIPS", "Direct."]
        labels = [line.split()[0] for line in lines[2:]]
        assert labels == ["global", "local", "overall"]

    def test_published_cell_formats_verbatim(self):
        table = render_table(self._planted_evaluation())
        overall = [l for l in table.splitlines() if l.startswith("overall")][0]
        assert "20.68" in overall
        assert "0.6922" in overall
        assert "0.1918" in overall
        assert "0.3140" in overall

    def test_method_column(self):
        table = render_table(self._planted_evaluation(), method="baseline")
        assert "baseline" in table
