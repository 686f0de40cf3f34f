"""Missing-modality multimodal classification with context-driven feature completion."""
from .data import (
    AvailabilityMask,
    RawSample,
    SyntheticSpec,
    TemplateSchema,
    enumerate_patterns,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .metrics import MetricReport, macro_ovr_auc
from .model import CMML, ModelConfig, ablate, tensorize
from .trainer import TrainConfig, build_model, complete_features, evaluate, train

__version__ = "0.1.0"
