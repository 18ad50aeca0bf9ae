"""editbank: invert editing effects from image pairs into time-segmented
attention instruction banks, apply them to new images, and evaluate on
paired benchmarks."""

__version__ = "0.1.0"

from .backend import (
    BackendDescriptor,
    ConditioningBundle,
    DiffusionBackend,
    LatentState,
    LayerShapeSpec,
    available_backends,
    create_toy_backend,
    get_backend,
    register_backend,
    single_head_attention,
)
from .bank import (
    InstructionBank,
    TimeSegmentation,
    bank_init_from_text,
    bank_load,
    bank_save,
    overrides_for,
    segment_bounds,
    segment_index,
)
from .benchmark import (
    BenchmarkDataset,
    BenchmarkSuite,
    SyntheticDatasetSpec,
    evaluate_dataset,
    evaluate_suite,
    load_suite,
    make_synthetic_suite,
    render_table,
)
from .editor import (
    EditConfig,
    NoiseSchedule,
    cfg_combine,
    edit_image,
    edit_latent,
    euler_ancestral_step,
    karras_schedule,
)
from .errors import (
    BankChecksumError,
    BankFormatError,
    BankShapeError,
    BankVersionError,
    EditBankError,
    TrainingDivergedError,
    ValidationError,
)
from .estimator import EditInverter
from .initializer import (
    InitOutcome,
    PhraseScore,
    PhraseVocabulary,
    build_init_instruction,
    caption_search,
    propose_instruction,
    set_similarity,
    unique_phrase,
)
from .inversion import (
    ExemplarSet,
    InversionConfig,
    TrainingTrace,
    inversion_step,
    run_inversion,
)
from .metrics import MetricsReport, clip_directional, lpips, psnr, ssim

__all__ = [
    "__version__",
    "BackendDescriptor",
    "ConditioningBundle",
    "DiffusionBackend",
    "LatentState",
    "LayerShapeSpec",
    "available_backends",
    "create_toy_backend",
    "get_backend",
    "register_backend",
    "single_head_attention",
    "InstructionBank",
    "TimeSegmentation",
    "bank_init_from_text",
    "bank_load",
    "bank_save",
    "overrides_for",
    "segment_bounds",
    "segment_index",
    "BenchmarkDataset",
    "BenchmarkSuite",
    "SyntheticDatasetSpec",
    "evaluate_dataset",
    "evaluate_suite",
    "load_suite",
    "make_synthetic_suite",
    "render_table",
    "EditConfig",
    "NoiseSchedule",
    "cfg_combine",
    "edit_image",
    "edit_latent",
    "euler_ancestral_step",
    "karras_schedule",
    "BankChecksumError",
    "BankFormatError",
    "BankShapeError",
    "BankVersionError",
    "EditBankError",
    "TrainingDivergedError",
    "ValidationError",
    "EditInverter",
    "InitOutcome",
    "PhraseScore",
    "PhraseVocabulary",
    "build_init_instruction",
    "caption_search",
    "propose_instruction",
    "set_similarity",
    "unique_phrase",
    "ExemplarSet",
    "InversionConfig",
    "TrainingTrace",
    "inversion_step",
    "run_inversion",
    "MetricsReport",
    "clip_directional",
    "lpips",
    "psnr",
    "ssim",
]
