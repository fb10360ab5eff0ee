"""Export per-layer next-token logits from Hugging Face causal LMs into the
ACDS logit-stream format."""

from .export import ExportJob, export_logits
from .stream_format import StreamStep, write_acds
from .train import HeadTrainConfig, train_amateur_head

__version__ = "0.1.0"

__all__ = [
    "ExportJob",
    "export_logits",
    "StreamStep",
    "write_acds",
    "HeadTrainConfig",
    "train_amateur_head",
    "__version__",
]
