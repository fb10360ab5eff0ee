import io
import math

import numpy as np
import pytest
import torch

from autocontrast.contrast import ExpertSource
from autocontrast.model import (
    HeadTrainConfig,
    MultiExitConfig,
    MultiExitModel,
    TrainingDivergedError,
    base_parameter_bytes,
    expert_head_source,
    forward_all_exits,
    load_checkpoint,
    save_checkpoint,
    train_base,
    train_exit_heads,
)

TINY = MultiExitConfig(
    vocab_size=8, context_len=32, n_layers=2, d_model=32, n_heads=2, exit_layers=(1, 2)
)


def cycle_corpus(n=1000):
    return [[0, 1, 2] * n]


def bigram_corpus(seed=0, n=20000, vocab=8):
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.ones(vocab) * 0.5, size=vocab)
    toks = [int(rng.integers(vocab))]
    for _ in range(n):
        toks.append(int(rng.choice(vocab, p=transitions[toks[-1]])))
    return [toks]


@pytest.fixture(scope="module")
def trained_tiny():
    cfg = HeadTrainConfig(learning_rate=1e-2, batch_size=16, epochs=5, seed=0,
                          sequence_len=31)
    return train_base(TINY, cycle_corpus(), cfg)


# --------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        MultiExitConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        MultiExitConfig(n_layers=8, exit_layers=(2, 4))  # missing final layer
    with pytest.raises(ValueError):
        MultiExitConfig(n_layers=8, exit_layers=(4, 2, 8))
    with pytest.raises(ValueError):
        HeadTrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        HeadTrainConfig(schedule="cosine")


# -------------------------------------------------------------------- forward


def test_forward_all_exits_keys_and_shapes():
    torch.manual_seed(0)
    model = MultiExitModel(TINY)
    out = forward_all_exits(model, [1, 2, 3])
    assert sorted(out) == [1, 2]
    for logits in out.values():
        assert logits.shape == (TINY.vocab_size,)
        assert np.all(np.isfinite(logits))


def test_zero_init_head_gives_zero_logits():
    torch.manual_seed(0)
    model = MultiExitModel(TINY)
    out = forward_all_exits(model, [5, 1, 2])
    np.testing.assert_array_equal(out[1], np.zeros(TINY.vocab_size, np.float32))


def test_forward_deterministic_bit_for_bit():
    torch.manual_seed(1)
    model = MultiExitModel(TINY)
    a = forward_all_exits(model, [5, 1, 2])
    b = forward_all_exits(model, [5, 1, 2])
    for e in a:
        np.testing.assert_array_equal(a[e], b[e])


def test_forward_rejects_bad_context():
    torch.manual_seed(0)
    model = MultiExitModel(TINY)
    with pytest.raises(ValueError):
        forward_all_exits(model, [])
    with pytest.raises(ValueError):
        forward_all_exits(model, [0] * (TINY.context_len + 1))


def test_causality_future_tokens_do_not_affect_past_logits(trained_tiny):
    ctx = [0, 1, 2, 0, 1, 2, 0, 1]
    full = trained_tiny.logits_all_positions(ctx)
    perturbed_ctx = ctx[:5] + [7, 7, 7]
    perturbed = trained_tiny.logits_all_positions(perturbed_ctx)
    for e in full:
        np.testing.assert_allclose(full[e][:5], perturbed[e][:5], atol=1e-5)


# ------------------------------------------------------------------- training


def test_train_base_learns_deterministic_cycle(trained_tiny):
    seq = [0, 1, 2] * 20
    hits = [
        int(np.argmax(forward_all_exits(trained_tiny, seq[:t])[2]) == seq[t])
        for t in range(5, 32)
    ]
    assert np.mean(hits) >= 0.99


def test_train_base_seeded_runs_identical():
    cfg = HeadTrainConfig(learning_rate=1e-2, batch_size=16, epochs=1, seed=7,
                          sequence_len=31)
    m1 = train_base(TINY, cycle_corpus(100), cfg)
    m2 = train_base(TINY, cycle_corpus(100), cfg)
    for (n1, p1), (n2, p2) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert n1 == n2
        assert torch.equal(p1, p2)


def test_train_base_zero_epochs_is_initialization():
    cfg = HeadTrainConfig(epochs=0, seed=3)
    model = train_base(TINY, cycle_corpus(10), cfg)
    torch.manual_seed(3)
    fresh = MultiExitModel(TINY)
    for p1, p2 in zip(model.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(p1, p2)


def test_train_heads_keeps_base_frozen(trained_tiny):
    before = base_parameter_bytes(trained_tiny)
    cfg = HeadTrainConfig(learning_rate=0.5, batch_size=32, epochs=1, seed=1,
                          sequence_len=31)
    model, _ = train_exit_heads(trained_tiny, bigram_corpus(), cfg)
    assert base_parameter_bytes(model) == before


def test_train_heads_loss_decreases_on_bigram_corpus(trained_tiny):
    cfg = HeadTrainConfig(learning_rate=0.5, batch_size=32, epochs=3, seed=1,
                          sequence_len=31)
    _, history = train_exit_heads(trained_tiny, bigram_corpus(), cfg)
    for exit_id, losses in history.items():
        assert losses[-1] < losses[0], f"exit {exit_id} did not improve"


def test_first_step_loss_is_log_vocab_and_sums_decompose():
    torch.manual_seed(2)
    model = MultiExitModel(TINY)
    # near-zero lr: recorded losses are those of the zero-init (uniform) heads
    cfg = HeadTrainConfig(learning_rate=1e-30, batch_size=4096, epochs=1, seed=0,
                          sequence_len=31)
    _, history = train_exit_heads(model, bigram_corpus(n=2000), cfg)
    per_head = [history[e][0] for e in TINY.exit_layers]
    for loss in per_head:
        assert loss == pytest.approx(math.log(TINY.vocab_size), abs=1e-5)
    total = sum(per_head)
    assert total == pytest.approx(len(per_head) * math.log(TINY.vocab_size), abs=1e-6)


def test_train_heads_empty_corpus_rejected(trained_tiny):
    with pytest.raises(ValueError):
        train_exit_heads(trained_tiny, [], HeadTrainConfig())


def test_train_heads_seeded_runs_identical():
    base_cfg = HeadTrainConfig(learning_rate=1e-2, batch_size=16, epochs=1, seed=5,
                               sequence_len=31)
    head_cfg = HeadTrainConfig(learning_rate=0.3, batch_size=16, epochs=1, seed=6,
                               sequence_len=31)
    out = []
    for _ in range(2):
        m = train_base(TINY, cycle_corpus(100), base_cfg)
        m, _ = train_exit_heads(m, bigram_corpus(n=2000), head_cfg)
        out.append(m.state_dict())
    for p1, p2 in zip(out[0].values(), out[1].values()):
        assert torch.equal(p1, p2)


# ----------------------------------------------------------- gradient check


def test_head_gradient_matches_finite_differences():
    torch.manual_seed(4)
    cfg = MultiExitConfig(vocab_size=12, context_len=16, n_layers=2, d_model=8,
                          n_heads=2, exit_layers=(1, 2))
    model = MultiExitModel(cfg).double()
    rng = np.random.default_rng(4)
    context = rng.integers(0, cfg.vocab_size, size=10).tolist()
    hidden = model.exit_hidden_states(context)[1].astype(np.float64)
    inputs, labels = hidden[:-1], np.array(context[1:])
    n = len(labels)

    W = rng.normal(size=(cfg.vocab_size, cfg.d_model)) * 0.3
    b = rng.normal(size=cfg.vocab_size) * 0.1

    def loss_fn(W, b):
        logits = inputs @ W.T + b
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return -logp[np.arange(n), labels].mean()

    # closed form: (softmax - onehot)^T h / n
    logits = inputs @ W.T + b
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grad_W = delta.T @ inputs / n
    grad_b = delta.sum(axis=0) / n

    eps = 1e-6
    for grad, param in ((grad_W, W), (grad_b, b)):
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = param[ix]
            param[ix] = orig + eps
            hi = loss_fn(W, b)
            param[ix] = orig - eps
            lo = loss_fn(W, b)
            param[ix] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(grad[ix]), 1e-8)
            assert abs(fd - grad[ix]) / denom < 1e-4

    # the training path (torch autograd) agrees with the closed form
    tW = torch.tensor(W, requires_grad=True)
    tb = torch.tensor(b, requires_grad=True)
    tlogits = torch.tensor(inputs) @ tW.T + tb
    tloss = torch.nn.functional.cross_entropy(tlogits, torch.tensor(labels))
    tloss.backward()
    np.testing.assert_allclose(tW.grad.numpy(), grad_W, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(tb.grad.numpy(), grad_b, rtol=1e-8, atol=1e-10)


# ------------------------------------------------------------- head binding


def test_expert_head_source_binding(trained_tiny):
    model = trained_tiny
    model.expert_source = ExpertSource.ORIGINAL_HEAD
    model.new_heads_trained = False
    with pytest.raises(ValueError):
        expert_head_source(model, ExpertSource.NEW_HEAD)

    cfg = HeadTrainConfig(learning_rate=0.3, batch_size=32, epochs=1, seed=2,
                          sequence_len=31)
    model, _ = train_exit_heads(model, bigram_corpus(n=2000), cfg)
    orig = forward_all_exits(model, [0, 1, 2])[2].copy()
    assert expert_head_source(model, ExpertSource.NEW_HEAD) == 2
    new = forward_all_exits(model, [0, 1, 2])[2].copy()
    assert not np.array_equal(orig, new)
    expert_head_source(model, ExpertSource.ORIGINAL_HEAD)
    back = forward_all_exits(model, [0, 1, 2])[2]
    np.testing.assert_array_equal(orig, back)


# ----------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip(trained_tiny):
    buf = io.BytesIO()
    n = save_checkpoint(trained_tiny, buf)
    assert n == buf.tell()
    buf.seek(0)
    loaded = load_checkpoint(buf)
    assert loaded.config == trained_tiny.config
    for p1, p2 in zip(
        trained_tiny.state_dict().values(), loaded.state_dict().values()
    ):
        assert torch.equal(p1.float(), p2)
    a = forward_all_exits(trained_tiny, [0, 1, 2])
    b = forward_all_exits(loaded, [0, 1, 2])
    for e in a:
        np.testing.assert_array_equal(a[e], b[e])


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        load_checkpoint(io.BytesIO(b"XXXX" + b"\x00" * 16))
