"""Billboard localization: a NumPy encoder-decoder segmenter and its evaluation tools."""
from .data import DatasetManifest, SamplePair, SynthConfig, generate_synthetic, load_manifest, load_sample, write_manifest
from .errors import (
    AdlocusError,
    ConfigError,
    ContractError,
    FormatError,
    ManifestError,
    ShapeError,
    TrainingError,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    RocPoint,
    accuracy,
    best_threshold,
    binarize,
    confusion,
    evaluate_dataset,
    fpr_tpr,
    fw_iou,
    mean_accuracy,
    mean_iou,
    pixel_accuracy,
    threshold_sweep,
)
from .model import ModelConfig, ModelParams, build_model, forward, load_weights, save_weights
from .trainer import TrainConfig, TrainReport, evaluate_loss, train

__version__ = "0.1.0"
