"""clsd: a desk-scale CTR training lab with confidence-weighted losses."""

__version__ = "0.1.0"

from .corpus import Batch, Corpus, FieldSchema, GenConfig, SampleRecord
from .model import ForwardTrace, ModelMeta, ModelParams
from .objective import LossConfig, TeacherOracle
from .trainer import AdamState, RunReport, TrainConfig

__all__ = [
    "Batch",
    "Corpus",
    "FieldSchema",
    "GenConfig",
    "SampleRecord",
    "ForwardTrace",
    "ModelMeta",
    "ModelParams",
    "LossConfig",
    "TeacherOracle",
    "AdamState",
    "RunReport",
    "TrainConfig",
    "__version__",
]
