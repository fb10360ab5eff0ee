"""Train a linear amateur head over one intermediate layer of a frozen
causal LM: AdamW at 2e-4 with a linear-decay schedule, zero-initialized
head, cross-entropy against the next token.  Only one head is trained at a
time; for a frozen base this is equivalent to training the heads jointly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .export import n_layers


class HeadTrainingDivergedError(RuntimeError):
    def __init__(self, loss_trace: list[float]):
        super().__init__(f"head training diverged; loss trace {loss_trace}")
        self.loss_trace = loss_trace


@dataclass
class HeadTrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    sequence_len: int = 64


def base_checksum(model) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _chunk(token_sequences, sequence_len):
    chunks = []
    for seq in token_sequences:
        for start in range(0, len(seq) - 1, sequence_len):
            window = seq[start:start + sequence_len + 1]
            if len(window) >= 2:
                chunks.append(window)
    if not chunks:
        raise ValueError("corpus yields no training windows")
    return chunks


def train_amateur_head(
    model, exit_layer: int, token_sequences, cfg: HeadTrainConfig | None = None
) -> tuple[torch.nn.Linear, list[float]]:
    """Returns (head, per-epoch mean loss).  Base weights are untouched."""
    cfg = cfg or HeadTrainConfig()
    total = n_layers(model)
    if not 1 <= exit_layer <= total:
        raise ValueError(f"exit layer {exit_layer} outside 1..{total}")
    d_model = int(model.config.hidden_size)
    vocab = int(model.get_output_embeddings().weight.shape[0])
    head = torch.nn.Linear(d_model, vocab)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    if cfg.epochs == 0:
        return head, []

    frozen = [p for p in model.parameters()]
    states = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    model.eval()

    chunks = _chunk(token_sequences, cfg.sequence_len)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = math.ceil(len(chunks) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history: list[float] = []
    step = 0
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(chunks))
            epoch_losses = []
            for b in range(steps_per_epoch):
                batch = [chunks[i] for i in order[b * cfg.batch_size:
                                                  (b + 1) * cfg.batch_size]]
                width = max(len(c) for c in batch)
                tokens = torch.zeros(len(batch), width, dtype=torch.long)
                labels = torch.full((len(batch), width - 1), -100,
                                    dtype=torch.long)
                for i, c in enumerate(batch):
                    tokens[i, :len(c)] = torch.tensor(c)
                    labels[i, :len(c) - 1] = torch.tensor(c[1:])
                with torch.no_grad():
                    out = model(tokens, output_hidden_states=True)
                    hidden = out.hidden_states[exit_layer][:, :-1]
                logits = head(hidden)
                loss = torch.nn.functional.cross_entropy(
                    logits.reshape(-1, vocab), labels.reshape(-1),
                    ignore_index=-100,
                )
                for g in opt.param_groups:
                    g["lr"] = cfg.learning_rate * (1 - step / total_steps)
                opt.zero_grad()
                loss.backward()
                opt.step()
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise HeadTrainingDivergedError(epoch_losses + [value])
                epoch_losses.append(value)
                step += 1
            history.append(float(np.mean(epoch_losses)))
    finally:
        for p, state in zip(frozen, states):
            p.requires_grad_(state)
    return head, history
