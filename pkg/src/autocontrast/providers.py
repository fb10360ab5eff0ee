"""Concrete distribution providers over a multi-exit model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .contrast import AcdConfig, acd_distribution, softmax
from .model import MultiExitModel, forward_all_exits


def _crop(context: Sequence[int], context_len: int) -> list[int]:
    context = list(context)
    return context[-context_len:]


class ExitProvider:
    """Softmax of a single exit layer's last-position logits.

    Contexts longer than the model window are cropped to the most recent
    tokens, so open-ended generation can run past context_len.
    """

    def __init__(self, model: MultiExitModel, exit_id: int):
        if exit_id not in model.config.exit_layers:
            raise ValueError(
                f"exit {exit_id} not in model exits {list(model.config.exit_layers)}"
            )
        self.model = model
        self.exit_id = exit_id

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        ctx = _crop(context, self.model.config.context_len)
        logits = forward_all_exits(self.model, ctx)[self.exit_id]
        return softmax(logits)


class AcdProvider:
    """Contrastive distribution from two exits of one model, one trunk pass."""

    def __init__(self, model: MultiExitModel, acd: AcdConfig):
        for exit_id in (acd.expert_exit, acd.amateur_exit):
            if exit_id not in model.config.exit_layers:
                raise ValueError(
                    f"exit {exit_id} not in model exits "
                    f"{list(model.config.exit_layers)}"
                )
        self.model = model
        self.acd = acd

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        ctx = _crop(context, self.model.config.context_len)
        logits = forward_all_exits(self.model, ctx, self.acd.expert_source)
        p_exp = softmax(logits[self.acd.expert_exit])
        p_ama = softmax(logits[self.acd.amateur_exit])
        return acd_distribution(p_exp, p_ama, self.acd.alpha)


class UniformProvider:
    """Debug provider: uniform over the vocabulary, regardless of context."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)
