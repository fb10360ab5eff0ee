import numpy as np
import pytest
import torch

from autocontrast.metrics import (
    CoherenceScore,
    DiversityReport,
    EMBEDDER_CAVEAT,
    coherence,
    make_recall_corpus,
    make_recall_tasks,
    model_embedding_bag,
    ngram_diversity,
    one_hot_bag_embedder,
    perplexity,
    recall_accuracy,
    vector_file_embedder,
)
from autocontrast.model import MultiExitConfig, MultiExitModel
from autocontrast.providers import UniformProvider


# ------------------------------------------------------------------ diversity


def test_diversity_all_distinct():
    report = ngram_diversity(list(range(20)))
    assert all(r == 1.0 for r in report.ratios.values())
    assert report.aggregate == 1.0


def test_diversity_two_cycle():
    tokens = [0, 1] * 10  # "ababab...", length 20
    report = ngram_diversity(tokens)
    assert report.ratios[2] == pytest.approx(2 / 19)
    assert report.ratios[3] == pytest.approx(2 / 18)
    assert report.ratios[4] == pytest.approx(2 / 17)
    assert report.aggregate == pytest.approx((2 / 19) * (2 / 18) * (2 / 17))
    assert report.aggregate == pytest.approx(0.00138, abs=5e-5)


def test_diversity_rejects_short_input():
    with pytest.raises(ValueError):
        ngram_diversity([1, 2, 3])


def test_diversity_never_increases_when_repeating():
    rng = np.random.default_rng(0)
    for _ in range(50):
        seq = rng.integers(0, 6, size=int(rng.integers(4, 30))).tolist()
        once = ngram_diversity(seq).aggregate
        twice = ngram_diversity(seq + seq).aggregate
        assert twice <= once + 1e-12


def test_diversity_report_validates_aggregate():
    with pytest.raises(ValueError):
        DiversityReport(ratios={2: 0.5, 3: 0.5, 4: 0.5}, aggregate=0.9)


# ------------------------------------------------------------------ coherence


def test_coherence_identical_texts():
    emb = one_hot_bag_embedder(8)
    score = coherence([1, 2, 3], [1, 2, 3], emb)
    assert score.value == pytest.approx(1.0)
    assert score.caveat == EMBEDDER_CAVEAT


def test_coherence_disjoint_one_hot_is_zero():
    emb = one_hot_bag_embedder(8)
    assert coherence([0, 1], [2, 3], emb).value == pytest.approx(0.0)


def test_coherence_half_overlap():
    emb = one_hot_bag_embedder(3)
    # prompt {a,b}, continuation {a,c}: cos([1,1,0], [1,0,1]) = 0.5
    assert coherence([0, 1], [0, 2], emb).value == pytest.approx(0.5)


def test_coherence_symmetry():
    emb = one_hot_bag_embedder(16)
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.integers(0, 16, size=10).tolist()
        b = rng.integers(0, 16, size=10).tolist()
        assert coherence(a, b, emb).value == pytest.approx(
            coherence(b, a, emb).value, abs=1e-12
        )


def test_coherence_rejects_zero_vector():
    def zero_embedder(tokens):
        return np.zeros(4)

    with pytest.raises(ValueError):
        coherence([1], [2], zero_embedder)


def test_model_embedding_bag_and_vector_file(tmp_path):
    torch.manual_seed(0)
    cfg = MultiExitConfig(vocab_size=8, context_len=16, n_layers=1, d_model=8,
                          n_heads=2, exit_layers=(1,))
    model = MultiExitModel(cfg)
    emb = model_embedding_bag(model)
    v = emb([1, 2])
    assert v.shape == (8,)
    table = model.tok_emb.weight.detach().numpy()
    np.testing.assert_allclose(v, table[[1, 2]].mean(axis=0), atol=1e-6)

    path = tmp_path / "vectors.npy"
    np.save(path, table)
    emb2 = vector_file_embedder(str(path))
    np.testing.assert_allclose(emb2([1, 2]), v, atol=1e-6)


# ----------------------------------------------------------------- perplexity


def test_perplexity_uniform_provider_equals_vocab():
    report = perplexity(UniformProvider(32), [[0, 1, 2, 3]])
    assert report.token_ppl == pytest.approx(32.0, abs=1e-9)


def test_perplexity_perfect_provider_is_one():
    def perfect(context):
        seq = [0, 1, 2, 3, 0, 1, 2, 3]
        out = np.zeros(4)
        out[seq[len(context)]] = 1.0
        return out

    report = perplexity(perfect, [[0, 1, 2, 3, 0, 1]])
    assert report.token_ppl == pytest.approx(1.0, abs=1e-12)


def test_perplexity_two_token_geometric_mean():
    def provider(context):
        if len(context) == 1:
            return np.array([0.5, 0.5, 0.0, 0.0])
        return np.array([0.125, 0.125, 0.375, 0.375])

    report = perplexity(provider, [[0, 1, 0]])
    # exp(-(ln 0.5 + ln 0.125) / 2) = sqrt(1 / (0.5 * 0.125)) = 4
    assert report.token_ppl == pytest.approx(4.0, abs=1e-9)
    assert report.n_tokens == 2


def test_perplexity_word_level_normalization():
    report = perplexity(UniformProvider(16), [[0, 1, 2, 3, 4]], word_counts=[2])
    assert report.word_ppl == pytest.approx(np.exp(4 * np.log(16) / 2), abs=1e-6)


def test_perplexity_floors_zero_probability_and_flags_it():
    def provider(context):
        return np.array([1.0, 0.0])

    report = perplexity(provider, [[0, 1]])
    assert report.n_floored == 1
    assert np.isfinite(report.token_ppl)


def test_perplexity_order_invariance():
    provider = UniformProvider(8)
    seqs = [[0, 1, 2], [3, 4, 5, 6], [7, 0]]
    a = perplexity(provider, seqs).token_ppl
    b = perplexity(provider, seqs[::-1]).token_ppl
    assert a == pytest.approx(b, abs=1e-9)


# --------------------------------------------------------------------- recall


def test_make_recall_tasks_deterministic_and_valid():
    a = make_recall_tasks(seed=5, n=50, vocab=64, context_len=64)
    b = make_recall_tasks(seed=5, n=50, vocab=64, context_len=64)
    assert a == b
    for task in a:
        task.check()


def test_make_recall_tasks_invariants_large_sample():
    for task in make_recall_tasks(seed=1, n=1000, vocab=32, context_len=96):
        task.check()


def test_make_recall_tasks_edge_cases():
    assert make_recall_tasks(seed=0, n=0, vocab=64, context_len=64) == []
    with pytest.raises(ValueError):
        make_recall_tasks(seed=0, n=1, vocab=8, context_len=64)
    with pytest.raises(ValueError):
        make_recall_tasks(seed=0, n=1, vocab=64, context_len=32)


def test_recall_accuracy_oracle_provider():
    tasks = make_recall_tasks(seed=2, n=20, vocab=64, context_len=64)
    answers = {tuple(t.context): t.target for t in tasks}

    def oracle(context):
        out = np.zeros(64)
        out[answers[tuple(context)]] = 1.0
        return out

    assert recall_accuracy(oracle, tasks) == 1.0


def test_recall_accuracy_chance_level_for_uninformed_provider():
    tasks = make_recall_tasks(seed=3, n=10000, vocab=256, context_len=64)

    def jittered_uniform(context):
        rng = np.random.default_rng([sum(context) % 9973, len(context), context[0]])
        x = np.full(256, 1 / 256) + rng.random(256) * 1e-9
        return x / x.sum()

    acc = recall_accuracy(jittered_uniform, tasks)
    assert abs(acc - 1 / 256) < 0.004


def test_recall_corpus_appends_answer():
    corpus = make_recall_corpus(seed=4, n=10, vocab=64, context_len=64)
    tasks = make_recall_tasks(seed=4, n=10, vocab=64, context_len=64)
    for seq, task in zip(corpus, tasks):
        assert seq[:-1] == list(task.context)
        assert seq[-1] == task.target
