import io

import numpy as np
import pytest
import torch

from hf_exporter.export import ExportJob, exit_logits_all_positions, export_logits
from hf_exporter.stream_format import StreamStep, write_acds
from hf_exporter.train import (
    HeadTrainConfig,
    base_checksum,
    train_amateur_head,
)

from autocontrast.decoding import GenerationConfig, decode_greedy
from autocontrast.stream import ReplayProvider, read_stream

PROMPTS = [
    "The captain watched the harbor",
    "Every morning the teacher",
    "A small green engine",
    "That old bridge carried",
    "Some distant village kept",
    "The quiet river moved",
    "Another winter evening came",
    "This narrow street held",
    "Each silver window showed",
    "No gentle journey ends",
]


def test_job_validation():
    with pytest.raises(ValueError):
        ExportJob(model_id="x", exit_layers=(2, 1), inputs=["a"])
    with pytest.raises(ValueError):
        ExportJob(model_id="x", exit_layers=(1,), inputs=[])
    with pytest.raises(ValueError):
        ExportJob(model_id="x", exit_layers=(1,), inputs=["a"], mode="stream")


def test_invalid_exit_rejected_before_writing(loaded, tmp_path):
    model, tokenizer = loaded
    out = tmp_path / "bad.acds"
    job = ExportJob(model_id="local", exit_layers=(9,), inputs=["hello"],
                    output_path=str(out))
    with pytest.raises(ValueError):
        export_logits(job, model=model, tokenizer=tokenizer)
    assert not out.exists()


def test_teacher_forced_record_cardinality(loaded, tmp_path):
    model, tokenizer = loaded
    text = "abcdefghij"  # 10 byte-level tokens
    assert len(tokenizer.encode(text, add_special_tokens=False)) == 10
    out = tmp_path / "tf.acds"
    job = ExportJob(model_id="local", exit_layers=(2, 4), inputs=[text],
                    mode="teacher_forced", output_path=str(out))
    export_logits(job, model=model, tokenizer=tokenizer)
    with open(out, "rb") as f:
        header, records = read_stream(f)
        records = list(records)
    assert header.exit_ids == (2, 4)
    assert len(records) == 10
    for i, rec in enumerate(records):
        assert rec.step == i
        assert set(rec.logits) == {2, 4}
    # every position except the last carries the actual next token
    ids = tokenizer.encode(text, add_special_tokens=False)
    assert [r.chosen_token for r in records[:-1]] == ids[1:]
    assert records[-1].chosen_token is None


def test_teacher_forced_export_deterministic(loaded, tmp_path):
    model, tokenizer = loaded
    blobs = []
    for name in ("a.acds", "b.acds"):
        out = tmp_path / name
        job = ExportJob(model_id="local", exit_layers=(2,), inputs=["hello"],
                        output_path=str(out))
        export_logits(job, model=model, tokenizer=tokenizer)
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]


def test_final_exit_matches_model_logits(loaded):
    model, tokenizer = loaded
    ids = tokenizer.encode("harbor", add_special_tokens=False)
    per_layer = exit_logits_all_positions(model, ids, (4,))
    with torch.no_grad():
        want = model(torch.tensor([ids])).logits[0].numpy()
    np.testing.assert_allclose(per_layer[4], want, atol=1e-5)


def test_round_trip_failure_detected(loaded, tmp_path):
    model, _ = loaded

    class LossyTokenizer:
        def encode(self, text, add_special_tokens=False):
            return [1, 2, 3]

        def decode(self, ids):
            return "something else"

    job = ExportJob(model_id="local", exit_layers=(4,), inputs=["hello"],
                    output_path=str(tmp_path / "x.acds"))
    with pytest.raises(ValueError, match="round-trip"):
        export_logits(job, model=model, tokenizer=LossyTokenizer())


def test_multiple_inputs_one_stream_each(loaded, tmp_path):
    model, tokenizer = loaded
    job = ExportJob(model_id="local", exit_layers=(4,),
                    inputs=["abc", "defg"],
                    output_path=str(tmp_path / "multi.acds"))
    paths = export_logits(job, model=model, tokenizer=tokenizer)
    assert [p.name for p in paths] == ["multi.0.acds", "multi.1.acds"]
    for path, n in zip(paths, (3, 4)):
        with open(path, "rb") as f:
            _, records = read_stream(f)
            assert len(list(records)) == n


# ------------------------------------------------------------- head training


def test_train_head_frozen_base_and_loss_decrease(loaded):
    model, tokenizer = loaded
    rng = np.random.default_rng(0)
    text = "".join(rng.choice(list("abcd "), size=4000))
    ids = tokenizer.encode(text, add_special_tokens=False)
    before = base_checksum(model)
    cfg = HeadTrainConfig(learning_rate=5e-3, batch_size=8, epochs=3,
                          sequence_len=32)
    head, history = train_amateur_head(model, 2, [ids], cfg)
    assert base_checksum(model) == before
    assert len(history) == 3
    assert history[-1] < history[0]


def test_train_head_zero_epochs_gives_zero_head(loaded):
    model, _ = loaded
    head, history = train_amateur_head(
        model, 2, [[1, 2, 3]], HeadTrainConfig(epochs=0))
    assert history == []
    assert torch.all(head.weight == 0) and torch.all(head.bias == 0)


def test_trained_head_feeds_export(loaded, tmp_path):
    model, tokenizer = loaded
    ids = tokenizer.encode("abcabcabc", add_special_tokens=False)
    head, _ = train_amateur_head(
        model, 2, [ids], HeadTrainConfig(epochs=1, sequence_len=8))
    out = tmp_path / "headed.acds"
    job = ExportJob(model_id="local", exit_layers=(2, 4), inputs=["abcabc"],
                    output_path=str(out), amateur_heads={2: head})
    export_logits(job, model=model, tokenizer=tokenizer)
    with open(out, "rb") as f:
        header, records = read_stream(f)
        assert len(list(records)) == 6


# --------------------------------------------------------------- acceptance


def test_acceptance_exporter_conformance(loaded, tmp_path):
    """Exported streams pass the engine's reader and plain-greedy replay
    reproduces the source model's own greedy continuation on 10 prompts."""
    model, tokenizer = loaded
    n_new = 20
    all_match = True
    for i, prompt in enumerate(PROMPTS):
        ids = tokenizer.encode(prompt, add_special_tokens=False)
        out = tmp_path / f"p{i}.acds"
        job = ExportJob(model_id="local", exit_layers=(2, 4), inputs=[prompt],
                        mode="interactive", output_path=str(out),
                        max_new_tokens=n_new)
        export_logits(job, model=model, tokenizer=tokenizer)

        with torch.no_grad():
            oracle = model.generate(
                torch.tensor([ids]), do_sample=False, max_new_tokens=n_new,
            )[0][len(ids):].tolist()

        with open(out, "rb") as f:
            header, records = read_stream(f)
            provider = ReplayProvider(header, records)
            result = decode_greedy(provider, ids, GenerationConfig(
                strategy="greedy", max_new_tokens=n_new))
        if result.continuation != oracle:
            all_match = False
    status = "PASS" if all_match else "FAIL"
    print(f"[ACCEPTANCE] exporter conformance (greedy replay, 10 prompts): "
          f"{status}")
    assert all_match
