"""Command-line surface for exporting ACDS logit streams from Hugging Face
causal LMs.  Exit codes: 0 success, 2 usage, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import torch

from .export import (
    FALLBACK_LABEL,
    ExportJob,
    export_logits,
    load_model_and_tokenizer,
    n_layers,
)
from .train import HeadTrainConfig, HeadTrainingDivergedError, train_amateur_head


@click.group()
def main() -> None:
    """Export per-layer logits from causal LMs into ACDS streams."""


@main.command("export")
@click.option("--model", "model_id", required=True,
              help="Hugging Face model id or local checkpoint directory")
@click.option("--exits", required=True,
              help="comma-separated layer indices; the final layer is "
                   "always included")
@click.option("--text", "texts", multiple=True)
@click.option("--input-file", "input_file", type=click.Path(exists=True),
              help="one text/prompt per line")
@click.option("--mode", default="teacher_forced",
              type=click.Choice(["teacher_forced", "interactive"]),
              show_default=True)
@click.option("--max-new-tokens", default=50, show_default=True)
@click.option("--amateur-head", "head_path", default=None,
              type=click.Path(exists=True),
              help="trained head weights for the lowest non-final exit")
@click.option("--out", "out_path", required=True, type=click.Path())
def export_cmd(model_id, exits, texts, input_file, mode, max_new_tokens,
               head_path, out_path):
    """Write one ACDS stream per input text/prompt."""
    inputs = list(texts)
    if input_file:
        inputs += [l for l in Path(input_file).read_text().splitlines()
                   if l.strip()]
    try:
        exit_layers = tuple(sorted({int(x) for x in exits.split(",")}))
        job = ExportJob(model_id=model_id, exit_layers=exit_layers,
                        inputs=inputs, mode=mode, output_path=out_path,
                        max_new_tokens=max_new_tokens)
    except ValueError as exc:
        raise click.UsageError(str(exc))

    try:
        model, tokenizer = load_model_and_tokenizer(model_id)
        if head_path:
            payload = torch.load(head_path, weights_only=True)
            head = torch.nn.Linear(payload["weight"].shape[1],
                                   payload["weight"].shape[0])
            head.load_state_dict(payload)
            amateur = min(e for e in exit_layers if e != n_layers(model))
            job.amateur_heads = {amateur: head}
        else:
            lower = [e for e in exit_layers if e != n_layers(model)]
            if lower:
                click.echo(f"note: exits {lower} use the {FALLBACK_LABEL}",
                           err=True)
        with torch.no_grad():
            paths = export_logits(job, model=model, tokenizer=tokenizer)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(4)
    for path in paths:
        click.echo(f"wrote {path}")


@main.command("train-head")
@click.option("--model", "model_id", required=True)
@click.option("--exit", "exit_layer", required=True, type=int)
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True), help="plain text file")
@click.option("--lr", default=2e-4, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--epochs", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--sequence-len", default=64, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def train_head_cmd(model_id, exit_layer, corpus_path, lr, batch_size, epochs,
                   seed, sequence_len, out_path):
    """Train one amateur head on the frozen model and save its weights."""
    cfg = HeadTrainConfig(learning_rate=lr, batch_size=batch_size,
                          epochs=epochs, seed=seed, sequence_len=sequence_len)
    try:
        model, tokenizer = load_model_and_tokenizer(model_id)
        text = Path(corpus_path).read_text()
        ids = tokenizer.encode(text, add_special_tokens=False)
        head, history = train_amateur_head(model, exit_layer, [ids], cfg)
        torch.save(head.state_dict(), out_path)
    except HeadTrainingDivergedError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(3)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(4)
    click.echo(f"wrote {out_path}")
    for epoch, loss in enumerate(history):
        click.echo(f"epoch {epoch}: loss {loss:.4f}")


if __name__ == "__main__":
    main()
