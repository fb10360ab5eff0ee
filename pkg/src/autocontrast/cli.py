"""Command-line surface: train the trunk and exit heads, generate with any
strategy over any provider, evaluate metrics, and run side-by-side
comparison grids.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from .contrast import AcdConfig, ExpertSource
from .corpus import first_words, load_corpus, text_to_tokens, tokens_to_text
from .decoding import GenerationConfig, decode
from .manifest import RunManifest, file_sha256
from .metrics import (
    EMBEDDER_CAVEAT,
    coherence,
    make_recall_tasks,
    model_embedding_bag,
    ngram_diversity,
    one_hot_bag_embedder,
    perplexity,
    recall_accuracy,
)
from .model import (
    HeadTrainConfig,
    MultiExitConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train_base,
    train_exit_heads,
)
from .providers import AcdProvider, ExitProvider, UniformProvider
from .stream import ReplayProvider, read_stream

EXIT_NUMERICAL = 3
EXIT_IO = 4

CHECKPOINT_DIR_ENV = "AUTOCONTRAST_CHECKPOINT_DIR"


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    env_dir = os.environ.get(CHECKPOINT_DIR_ENV)
    if env_dir and (Path(env_dir) / path).exists():
        return Path(env_dir) / path
    raise click.UsageError(f"checkpoint not found: {path}")


def _load_model(path: str):
    with open(_resolve_checkpoint(path), "rb") as f:
        return load_checkpoint(f)


def _io_guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TrainingDivergedError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        click.echo(f"loss trace tail: {exc.loss_trace[-5:]}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)


def _per_prompt_seed(base_seed: int, index: int) -> int:
    # splittable seeding: one independent stream per prompt
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Layer-contrastive decoding engine."""


# ----------------------------------------------------------------------- train


def _train_options(fn):
    for opt in reversed(
        [
            click.option("--corpus", "corpus_path", required=True,
                         type=click.Path(exists=True)),
            click.option("--corpus-format", default="bytes",
                         type=click.Choice(["bytes", "tokens"])),
            click.option("--out", "out_path", required=True, type=click.Path()),
            click.option("--lr", default=2e-4, show_default=True),
            click.option("--schedule", default="linear_decay",
                         type=click.Choice(["linear_decay", "constant"])),
            click.option("--batch-size", default=32, show_default=True),
            click.option("--epochs", default=1, show_default=True),
            click.option("--seed", default=0, show_default=True),
            click.option("--sequence-len", default=128, show_default=True),
        ]
    ):
        fn = opt(fn)
    return fn


@main.group()
def train() -> None:
    """Train the base trunk or the exit heads."""


@train.command("base")
@_train_options
@click.option("--vocab-size", default=256, show_default=True)
@click.option("--context-len", default=256, show_default=True)
@click.option("--n-layers", default=8, show_default=True)
@click.option("--d-model", default=128, show_default=True)
@click.option("--n-heads", default=4, show_default=True)
@click.option("--exit-layers", default="2,4,6,8", show_default=True,
              help="comma-separated exit layer indices; must end at the final layer")
@click.option("--optimizer", default="adamw", type=click.Choice(["sgd", "adamw"]),
              show_default=True)
def train_base_cmd(corpus_path, corpus_format, out_path, lr, schedule, batch_size,
                   epochs, seed, sequence_len, vocab_size, context_len, n_layers,
                   d_model, n_heads, exit_layers, optimizer):
    """Train the trunk plus the original final head."""
    try:
        model_cfg = MultiExitConfig(
            vocab_size=vocab_size, context_len=context_len, n_layers=n_layers,
            d_model=d_model, n_heads=n_heads,
            exit_layers=tuple(int(x) for x in exit_layers.split(",")),
        )
        train_cfg = HeadTrainConfig(
            learning_rate=lr, schedule=schedule, batch_size=batch_size,
            epochs=epochs, seed=seed, sequence_len=sequence_len,
            optimizer=optimizer,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))

    def run():
        corpus = load_corpus(corpus_path, corpus_format)
        model = train_base(model_cfg, corpus, train_cfg)
        with open(out_path, "wb") as f:
            save_checkpoint(model, f)
        return model

    model = _io_guard(run)
    manifest = RunManifest(
        command="train base",
        config={"model": asdict(model_cfg), "train": asdict(train_cfg),
                "corpus": str(corpus_path)},
        seed=seed,
        checkpoint_hash=file_sha256(out_path),
        output_paths=[str(out_path)],
    )
    manifest.write(str(out_path) + ".manifest.json")
    report = {"per_epoch_loss": model.base_loss_history}
    Path(str(out_path) + ".loss.json").write_text(json.dumps(report, indent=2) + "\n")
    click.echo(f"wrote {out_path} (manifest {manifest.hash()})")
    for epoch, loss in enumerate(model.base_loss_history):
        click.echo(f"epoch {epoch}: loss {loss:.4f}")


@train.command("heads")
@_train_options
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--optimizer", default="sgd", type=click.Choice(["sgd", "adamw"]),
              show_default=True)
def train_heads_cmd(corpus_path, corpus_format, out_path, lr, schedule, batch_size,
                    epochs, seed, sequence_len, checkpoint_path, optimizer):
    """Train all new exit heads on the frozen trunk."""
    try:
        train_cfg = HeadTrainConfig(
            learning_rate=lr, schedule=schedule, batch_size=batch_size,
            epochs=epochs, seed=seed, sequence_len=sequence_len,
            optimizer=optimizer,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))

    def run():
        model = _load_model(checkpoint_path)
        corpus = load_corpus(corpus_path, corpus_format)
        model, history = train_exit_heads(model, corpus, train_cfg)
        with open(out_path, "wb") as f:
            save_checkpoint(model, f)
        return history

    history = _io_guard(run)
    manifest = RunManifest(
        command="train heads",
        config={"train": asdict(train_cfg), "corpus": str(corpus_path),
                "source_checkpoint": str(checkpoint_path)},
        seed=seed,
        checkpoint_hash=file_sha256(out_path),
        output_paths=[str(out_path)],
    )
    manifest.write(str(out_path) + ".manifest.json")
    Path(str(out_path) + ".loss.json").write_text(
        json.dumps({"per_head_per_epoch_loss": history}, indent=2) + "\n"
    )
    click.echo(f"wrote {out_path} (manifest {manifest.hash()})")
    for exit_id, losses in history.items():
        click.echo(f"exit {exit_id}: " + " ".join(f"{x:.4f}" for x in losses))


# -------------------------------------------------------------------- generate


def _build_provider(model, acd, exit_id, expert, amateur, alpha, expert_source):
    if acd:
        expert = expert if expert is not None else model.config.n_layers
        if amateur is None:
            raise click.UsageError("--acd requires --amateur")
        for e in (expert, amateur):
            if e not in model.config.exit_layers:
                raise click.UsageError(
                    f"unknown exit {e}; available exits: "
                    f"{list(model.config.exit_layers)}"
                )
        return AcdProvider(model, AcdConfig(
            expert_exit=expert, amateur_exit=amateur, alpha=alpha,
            expert_source=ExpertSource(expert_source)))
    exit_id = exit_id if exit_id is not None else model.config.n_layers
    if exit_id not in model.config.exit_layers:
        raise click.UsageError(
            f"unknown exit {exit_id}; available exits: "
            f"{list(model.config.exit_layers)}"
        )
    return ExitProvider(model, exit_id)


def _generation_config(strategy, max_new_tokens, beam_width, k, p, seed, stop_token):
    try:
        return GenerationConfig(
            strategy=strategy, max_new_tokens=max_new_tokens,
            beam_width=beam_width, k=k, p=p, seed=seed, stop_token=stop_token,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _read_prompts(prompts_path, prompt_words):
    lines = [l for l in Path(prompts_path).read_text().splitlines() if l.strip()]
    return [first_words(l, prompt_words) for l in lines]


def _generate_records(provider_factory, prompts, gen_cfg, manifest_hash):
    records = []
    for i, prompt_text in enumerate(prompts):
        prompt_tokens = text_to_tokens(prompt_text)
        cfg = GenerationConfig(**{**asdict(gen_cfg),
                                  "seed": _per_prompt_seed(gen_cfg.seed, i)})
        result = decode(provider_factory(), prompt_tokens, cfg)
        records.append({
            "prompt_text": prompt_text,
            "prompt_tokens": result.prompt,
            "continuation_tokens": result.continuation,
            "continuation_text": tokens_to_text(result.continuation),
            "step_probs": result.step_probs,
            "metadata": result.metadata,
            "manifest_hash": manifest_hash,
        })
    return records


def _write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


@main.command("generate")
@click.option("--checkpoint", "checkpoint_path", default=None)
@click.option("--stream", "stream_path", default=None, type=click.Path())
@click.option("--prompts", "prompts_path", required=True, type=click.Path(exists=True))
@click.option("--prompt-words", default=32, show_default=True)
@click.option("--strategy", default="greedy",
              type=click.Choice(["greedy", "beam", "top_k", "top_p"]),
              show_default=True)
@click.option("--max-new-tokens", default=100, show_default=True)
@click.option("--beam-width", default=5, show_default=True)
@click.option("-k", "--k", default=50, show_default=True)
@click.option("-p", "--p", default=0.95, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--stop-token", default=None, type=int)
@click.option("--acd", is_flag=True, help="use the contrastive distribution")
@click.option("--expert", default=None, type=int, help="expert exit id")
@click.option("--amateur", default=None, type=int, help="amateur exit id")
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--expert-source", default="original_head",
              type=click.Choice(["original_head", "new_head"]), show_default=True)
@click.option("--exit", "exit_id", default=None, type=int,
              help="generate from a single exit layer")
@click.option("--out", "out_path", required=True, type=click.Path())
def generate_cmd(checkpoint_path, stream_path, prompts_path, prompt_words, strategy,
                 max_new_tokens, beam_width, k, p, seed, stop_token, acd, expert,
                 amateur, alpha, expert_source, exit_id, out_path):
    """Generate continuations for each prompt line."""
    if (checkpoint_path is None) == (stream_path is None):
        raise click.UsageError("provide exactly one of --checkpoint or --stream")
    gen_cfg = _generation_config(strategy, max_new_tokens, beam_width, k, p, seed,
                                 stop_token)
    prompts = _io_guard(_read_prompts, prompts_path, prompt_words)

    if checkpoint_path is not None:
        model = _io_guard(_load_model, checkpoint_path)
        checkpoint_hash = file_sha256(_resolve_checkpoint(checkpoint_path))

        def provider_factory():
            return _build_provider(model, acd, exit_id, expert, amateur, alpha,
                                   expert_source)
    else:
        raw = _io_guard(Path(stream_path).read_bytes)
        checkpoint_hash = None

        def provider_factory():
            import io

            header, records = read_stream(io.BytesIO(raw))
            acd_cfg = None
            if acd:
                exp = expert if expert is not None else max(header.exit_ids)
                if amateur is None:
                    raise click.UsageError("--acd requires --amateur")
                acd_cfg = AcdConfig(expert_exit=exp, amateur_exit=amateur,
                                    alpha=alpha)
            return ReplayProvider(header, records, acd=acd_cfg)

    manifest = RunManifest(
        command="generate",
        config={
            "generation": asdict(gen_cfg), "prompt_words": prompt_words,
            "acd": acd, "expert": expert, "amateur": amateur, "alpha": alpha,
            "expert_source": expert_source, "exit": exit_id,
            "source": checkpoint_path or stream_path,
        },
        seed=seed,
        checkpoint_hash=checkpoint_hash,
        output_paths=[str(out_path)],
    )
    records = _io_guard(_generate_records, provider_factory, prompts, gen_cfg,
                        manifest.hash())
    _io_guard(_write_jsonl, out_path, records)
    manifest.write(str(out_path) + ".manifest.json")
    click.echo(f"wrote {len(records)} generation records to {out_path} "
               f"(manifest {manifest.hash()})")


# ------------------------------------------------------------------------ eval


def _emit_report(report: dict, out_path: str | None) -> None:
    def flat(prefix, obj):
        if isinstance(obj, dict):
            for key in sorted(obj):
                yield from flat(f"{prefix}{key}.", obj[key])
        elif isinstance(obj, list):
            for i, item in enumerate(obj):
                yield from flat(f"{prefix}{i}.", item)
        else:
            yield f"{prefix.rstrip('.')}: {obj}"

    for line in flat("", {k: v for k, v in report.items() if k != "records"}):
        click.echo(line)
    if out_path:
        Path(out_path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


@main.command("eval")
@click.option("--generations", "generations_path", default=None,
              type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", default=None)
@click.option("--diversity", is_flag=True)
@click.option("--coherence", "coherence_flag", is_flag=True)
@click.option("--perplexity", "perplexity_flag", is_flag=True)
@click.option("--recall", "recall_flag", is_flag=True)
@click.option("--corpus", "corpus_path", default=None, type=click.Path(exists=True))
@click.option("--corpus-format", default="bytes",
              type=click.Choice(["bytes", "tokens"]))
@click.option("--words", default=None, type=int,
              help="total word count for word-level perplexity")
@click.option("--n-tasks", default=1000, show_default=True)
@click.option("--task-vocab", default=None, type=int)
@click.option("--task-context-len", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--exit", "exit_id", default=None, type=int)
@click.option("--acd", is_flag=True)
@click.option("--expert", default=None, type=int)
@click.option("--amateur", default=None, type=int)
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--expert-source", default="original_head",
              type=click.Choice(["original_head", "new_head"]))
@click.option("--uniform-provider", is_flag=True,
              help="debug: replace the model provider with a uniform one")
@click.option("--embedder", default="model", type=click.Choice(["model", "onehot"]),
              show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(generations_path, checkpoint_path, diversity, coherence_flag,
             perplexity_flag, recall_flag, corpus_path, corpus_format, words,
             n_tasks, task_vocab, task_context_len, seed, exit_id, acd, expert,
             amateur, alpha, expert_source, uniform_provider, embedder, out_path):
    """Evaluate metrics over a generations file or a checkpoint."""
    if not any([diversity, coherence_flag, perplexity_flag, recall_flag]):
        raise click.UsageError(
            "select at least one metric "
            "(--diversity/--coherence/--perplexity/--recall)"
        )
    report: dict = {"records": [], "aggregate": {}, "caveats": []}
    model = None
    if checkpoint_path is not None:
        model = _io_guard(_load_model, checkpoint_path)

    if diversity or coherence_flag:
        if generations_path is None:
            raise click.UsageError("--diversity/--coherence need --generations")
        records = _io_guard(
            lambda: [json.loads(l) for l in Path(generations_path).read_text().splitlines() if l.strip()]
        )
        embed = None
        if coherence_flag:
            if embedder == "model":
                if model is None:
                    raise click.UsageError(
                        "--coherence with the model embedder needs --checkpoint"
                    )
                embed = model_embedding_bag(model)
            else:
                vocab = model.config.vocab_size if model else 256
                embed = one_hot_bag_embedder(vocab)
            report["caveats"].append(EMBEDDER_CAVEAT)
        div_values, coh_values = [], []
        for rec in records:
            entry = {"prompt_text": rec.get("prompt_text", "")}
            tokens = rec["continuation_tokens"]
            if diversity:
                if len(tokens) >= 4:
                    entry["diversity"] = ngram_diversity(tokens).aggregate
                    div_values.append(entry["diversity"])
                else:
                    entry["diversity"] = None
            if coherence_flag:
                if tokens:
                    entry["coherence"] = coherence(
                        rec["prompt_tokens"], tokens, embed, embedder_id=embedder
                    ).value
                    coh_values.append(entry["coherence"])
                else:
                    entry["coherence"] = None
            report["records"].append(entry)
        if diversity:
            report["aggregate"]["mean_diversity"] = float(np.mean(div_values))
        if coherence_flag:
            report["aggregate"]["mean_coherence"] = float(np.mean(coh_values))

    if perplexity_flag:
        if corpus_path is None:
            raise click.UsageError("--perplexity needs --corpus")
        corpus = _io_guard(load_corpus, corpus_path, corpus_format)
        if uniform_provider:
            vocab = model.config.vocab_size if model else 256
            provider = UniformProvider(vocab)
        else:
            if model is None:
                raise click.UsageError("--perplexity needs --checkpoint "
                                       "(or --uniform-provider)")
            provider = _build_provider(model, acd, exit_id, expert, amateur,
                                       alpha, expert_source)
        word_counts = [words] if words is not None else None
        if word_counts is not None and len(corpus) != 1:
            raise click.UsageError("--words applies to single-sequence corpora")
        ppl = perplexity(provider, corpus, word_counts)
        report["aggregate"]["token_perplexity"] = ppl.token_ppl
        if ppl.word_ppl is not None:
            report["aggregate"]["word_perplexity"] = ppl.word_ppl
        if ppl.n_floored:
            report["caveats"].append(
                f"{ppl.n_floored} target tokens had probability below the floor"
            )

    if recall_flag:
        if model is None and not uniform_provider:
            raise click.UsageError("--recall needs --checkpoint")
        vocab = task_vocab or (model.config.vocab_size if model else 256)
        tasks = make_recall_tasks(seed=seed, n=n_tasks, vocab=vocab,
                                  context_len=task_context_len)
        accuracies = {}
        if uniform_provider:
            accuracies["uniform"] = recall_accuracy(UniformProvider(vocab), tasks)
        else:
            for e in model.config.exit_layers:
                accuracies[f"exit_{e}"] = recall_accuracy(
                    ExitProvider(model, e), tasks
                )
            if acd:
                provider = _build_provider(model, True, None, expert, amateur,
                                           alpha, expert_source)
                accuracies["acd"] = recall_accuracy(provider, tasks)
        report["aggregate"]["recall_accuracy"] = accuracies

    _emit_report(report, out_path)


# --------------------------------------------------------------------- compare


@main.command("compare")
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--prompts", "prompts_path", required=True, type=click.Path(exists=True))
@click.option("--prompt-words", default=32, show_default=True)
@click.option("--strategies", default="greedy,beam,top_k,top_p", show_default=True)
@click.option("--max-new-tokens", default=100, show_default=True)
@click.option("--beam-width", default=5, show_default=True)
@click.option("-k", "--k", default=50, show_default=True)
@click.option("-p", "--p", default=0.95, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--amateur", default=None, type=int,
              help="amateur exit for the contrast column (default: middle exit)")
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--expert-source", default="original_head",
              type=click.Choice(["original_head", "new_head"]))
@click.option("--sweep/--no-sweep", default=True, show_default=True,
              help="also generate greedily from every exit layer")
@click.option("--out", "out_dir", required=True, type=click.Path())
def compare_cmd(checkpoint_path, prompts_path, prompt_words, strategies,
                max_new_tokens, beam_width, k, p, seed, amateur, alpha,
                expert_source, sweep, out_dir):
    """Run the strategies x {plain, contrastive} grid and a per-layer sweep."""
    model = _io_guard(_load_model, checkpoint_path)
    exits = list(model.config.exit_layers)
    final = exits[-1]
    if amateur is None:
        amateur = exits[(len(exits) - 1) // 2] if len(exits) > 1 else None
    if amateur is None or amateur >= final:
        raise click.UsageError("need an amateur exit strictly below the final exit")
    strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]

    prompts = _io_guard(_read_prompts, prompts_path, prompt_words)
    out = Path(out_dir)
    _io_guard(out.mkdir, parents=True, exist_ok=True)
    embed = model_embedding_bag(model)

    manifest = RunManifest(
        command="compare",
        config={
            "strategies": strategy_list, "prompt_words": prompt_words,
            "max_new_tokens": max_new_tokens, "beam_width": beam_width,
            "k": k, "p": p, "amateur": amateur, "alpha": alpha,
            "expert_source": expert_source, "sweep": sweep,
        },
        seed=seed,
        checkpoint_hash=file_sha256(_resolve_checkpoint(checkpoint_path)),
        output_paths=[str(out)],
    )

    def cell_metrics(records):
        divs = [
            ngram_diversity(r["continuation_tokens"]).aggregate
            for r in records
            if len(r["continuation_tokens"]) >= 4
        ]
        cohs = [
            coherence(r["prompt_tokens"], r["continuation_tokens"], embed,
                      embedder_id="model").value
            for r in records
            if r["continuation_tokens"]
        ]
        return {
            "diversity": float(np.mean(divs)) if divs else None,
            "coherence": float(np.mean(cohs)) if cohs else None,
            "n": len(records),
            "manifest_hash": manifest.hash(),
        }

    table: dict = {}
    for strategy in strategy_list:
        gen_cfg = _generation_config(strategy, max_new_tokens, beam_width, k, p,
                                     seed, None)
        for label, factory in (
            ("plain", lambda: ExitProvider(model, final)),
            ("acd", lambda: AcdProvider(model, AcdConfig(
                expert_exit=final, amateur_exit=amateur, alpha=alpha,
                expert_source=ExpertSource(expert_source)))),
        ):
            records = _generate_records(factory, prompts, gen_cfg, manifest.hash())
            _write_jsonl(out / f"{strategy}_{label}.jsonl", records)
            table[f"{strategy}+{label}"] = cell_metrics(records)

    sweep_table: dict = {}
    if sweep:
        gen_cfg = _generation_config("greedy", max_new_tokens, beam_width, k, p,
                                     seed, None)
        for e in exits:
            records = _generate_records(lambda: ExitProvider(model, e), prompts,
                                        gen_cfg, manifest.hash())
            _write_jsonl(out / f"sweep_exit_{e}.jsonl", records)
            sweep_table[f"exit_{e}"] = cell_metrics(records)

    result = {
        "grid": table,
        "per_layer_sweep": sweep_table,
        "caveats": [EMBEDDER_CAVEAT],
    }
    (out / "comparison.json").write_text(json.dumps(result, sort_keys=True,
                                                    indent=2) + "\n")
    manifest.write(out / "manifest.json")

    width = max(len(name) for name in list(table) + list(sweep_table) or ["x"])
    click.echo(f"{'cell'.ljust(width)}  diversity  coherence")
    for name, cell in {**table, **sweep_table}.items():
        div = "-" if cell["diversity"] is None else f"{cell['diversity']:.3f}"
        coh = "-" if cell["coherence"] is None else f"{cell['coherence']:.3f}"
        click.echo(f"{name.ljust(width)}  {div:>9}  {coh:>9}")
    click.echo(f"caveat: {EMBEDDER_CAVEAT}")


if __name__ == "__main__":
    main()
