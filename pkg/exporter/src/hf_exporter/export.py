"""Export per-layer next-token logits from a Hugging Face causal LM.

One forward pass per step; hidden states are tapped at each requested layer.
The final layer always uses the model's own LM head (the expert).  An
intermediate layer uses either a trained amateur head (see ``train``) or, as
a zero-training fallback, the model's final norm plus LM head applied to the
intermediate hidden state (the "logit lens"; this fallback has no published
counterpart and is labeled accordingly in reports).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .stream_format import (
    MODE_INTERACTIVE,
    MODE_TEACHER_FORCED,
    StreamStep,
    write_acds,
)

FALLBACK_LABEL = "logit-lens fallback (no trained amateur head)"


@dataclass
class ExportJob:
    model_id: str
    exit_layers: tuple[int, ...]
    inputs: list[str]
    mode: str = "teacher_forced"  # or "interactive"
    output_path: str = "export.acds"
    max_new_tokens: int = 50
    amateur_heads: dict[int, "torch.nn.Linear"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("teacher_forced", "interactive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.inputs:
            raise ValueError("at least one input text/prompt is required")
        if list(self.exit_layers) != sorted(set(self.exit_layers)):
            raise ValueError("exit layers must be sorted ascending and unique")


def load_model_and_tokenizer(model_id: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(model_id)
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    return model, tokenizer


def n_layers(model) -> int:
    return int(model.config.num_hidden_layers)


def _final_norm(model):
    for path in ("transformer.ln_f", "model.norm", "gpt_neox.final_layer_norm"):
        obj = model
        try:
            for attr in path.split("."):
                obj = getattr(obj, attr)
            return obj
        except AttributeError:
            continue
    raise ValueError(
        f"cannot locate the final norm of {type(model).__name__}; "
        "a trained amateur head is required for this architecture"
    )


def _check_round_trip(tokenizer, text: str) -> list[int]:
    ids = tokenizer.encode(text, add_special_tokens=False)
    if tokenizer.decode(ids) != text:
        raise ValueError(
            f"tokenizer does not round-trip the input text: {text[:60]!r}"
        )
    return ids


@torch.no_grad()
def exit_logits_all_positions(
    model, ids: list[int], exit_layers: tuple[int, ...],
    amateur_heads: dict[int, torch.nn.Linear] | None = None,
) -> dict[int, np.ndarray]:
    """(T, V) float32 next-token logits per requested layer, one forward."""
    amateur_heads = amateur_heads or {}
    total = n_layers(model)
    for layer in exit_layers:
        if not 1 <= layer <= total:
            raise ValueError(f"exit layer {layer} outside 1..{total}")
    tokens = torch.tensor([ids], dtype=torch.long)
    out = model(tokens, output_hidden_states=True)
    lm_head = model.get_output_embeddings()
    result: dict[int, np.ndarray] = {}
    for layer in exit_layers:
        if layer == total:
            logits = out.logits[0]
        elif layer in amateur_heads:
            logits = amateur_heads[layer](out.hidden_states[layer][0])
        else:
            # zero-training fallback: final norm + LM head on the
            # intermediate hidden state
            logits = lm_head(_final_norm(model)(out.hidden_states[layer][0]))
        result[layer] = logits.float().cpu().numpy()
    return result


def _teacher_forced_steps(model, ids, exit_layers, amateur_heads):
    per_layer = exit_logits_all_positions(model, ids, exit_layers, amateur_heads)
    steps = []
    for pos in range(len(ids)):
        chosen = ids[pos + 1] if pos + 1 < len(ids) else None
        steps.append(StreamStep(
            step=pos,
            logits={layer: per_layer[layer][pos] for layer in exit_layers},
            chosen_token=chosen,
        ))
    return steps


def _interactive_steps(model, ids, exit_layers, amateur_heads, max_new_tokens):
    final = n_layers(model)
    context = list(ids)
    steps = []
    for step in range(max_new_tokens):
        per_layer = exit_logits_all_positions(
            model, context, exit_layers, amateur_heads
        )
        last = {layer: per_layer[layer][-1] for layer in exit_layers}
        chosen = int(np.argmax(last[final]))
        steps.append(StreamStep(step=step, logits=last, chosen_token=chosen))
        context.append(chosen)
    return steps


def export_logits(job: ExportJob, model=None, tokenizer=None) -> list[Path]:
    """Run the job; returns the written stream paths, one per input.

    Everything is validated (model, exits, tokenizer round-trip of every
    input) before the first byte is written.
    """
    if model is None or tokenizer is None:
        model, tokenizer = load_model_and_tokenizer(job.model_id)
    total = n_layers(model)
    exit_ids = tuple(job.exit_layers)
    if total not in exit_ids:
        exit_ids = tuple(sorted(set(exit_ids) | {total}))
    for layer in exit_ids:
        if not 1 <= layer <= total:
            raise ValueError(f"exit layer {layer} outside 1..{total}")
    all_ids = [_check_round_trip(tokenizer, text) for text in job.inputs]
    for ids in all_ids:
        if not ids:
            raise ValueError("input tokenizes to an empty sequence")

    vocab = int(model.get_output_embeddings().weight.shape[0])
    base = Path(job.output_path)
    paths = []
    for i, ids in enumerate(all_ids):
        if len(all_ids) == 1:
            path = base
        else:
            path = base.with_name(f"{base.stem}.{i}{base.suffix}")
        if job.mode == "teacher_forced":
            mode = MODE_TEACHER_FORCED
            steps = _teacher_forced_steps(model, ids, exit_ids, job.amateur_heads)
        else:
            mode = MODE_INTERACTIVE
            steps = _interactive_steps(model, ids, exit_ids, job.amateur_heads,
                                       job.max_new_tokens)
        with open(path, "wb") as f:
            write_acds(f, mode, vocab, exit_ids, steps)
        paths.append(path)
    return paths
