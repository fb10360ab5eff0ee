"""Layer-contrastive decoding engine for multi-exit language models."""

from .contrast import (
    AcdConfig,
    ExpertSource,
    InvalidDistributionError,
    PlausibleSet,
    acd_distribution,
    acd_distribution_from_logits,
    contrast_scores,
    plausible_set,
    redistribute,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "AcdConfig",
    "ExpertSource",
    "InvalidDistributionError",
    "PlausibleSet",
    "acd_distribution",
    "acd_distribution_from_logits",
    "contrast_scores",
    "plausible_set",
    "redistribute",
    "softmax",
    "__version__",
]
