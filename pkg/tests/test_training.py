import math

import numpy as np
import pytest

from mufuru import cells, tasks, training
from mufuru import tensor as T
from mufuru.cells import CellShape
from mufuru.errors import DataError, DimensionError
from mufuru.training import AdamState, TrainConfig, adam_step


# -- ADAM ------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    theta = T.parameter([0.0])
    state = AdamState.for_params([theta], alpha=0.1)
    adam_step(state, [theta], [np.array([1.0])])
    # m_hat = g, v_hat = g^2 after bias correction
    assert theta.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert abs(theta.data[0] + 0.1) <= 1e-9
    assert state.t == 1


def test_adam_zero_gradient_is_noop():
    theta = T.parameter([0.3, -2.0])
    state = AdamState.for_params([theta])
    adam_step(state, [theta], [np.zeros(2)])
    np.testing.assert_array_equal(theta.data, [0.3, -2.0])


@pytest.mark.parametrize("g", [1e-6, 0.5, 3.0, 1e4])
def test_adam_first_step_size_is_alpha(g):
    theta = T.parameter([1.0])
    state = AdamState.for_params([theta], alpha=0.01)
    adam_step(state, [theta], [np.array([g])])
    assert abs(theta.data[0] - 1.0) == pytest.approx(0.01, rel=1e-2)


def test_adam_sign_symmetry():
    a, b = T.parameter([0.0, 1.0]), T.parameter([0.0, 1.0])
    sa, sb = AdamState.for_params([a]), AdamState.for_params([b])
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.normal(size=2)
        adam_step(sa, [a], [g])
        adam_step(sb, [b], [-g])
    np.testing.assert_allclose(a.data - [0, 1], -(b.data - [0, 1]), atol=1e-15)


def test_adam_ignores_poisoned_momentum():
    rng = np.random.default_rng(1)
    clean, dirty = T.parameter(rng.normal(size=3)), T.parameter(np.zeros(3))
    dirty.data[...] = clean.data
    s1, s2 = AdamState.for_params([clean]), AdamState.for_params([dirty])
    for _ in range(10):
        g = rng.normal(size=3)
        s2.m[0][...] = rng.normal(size=3) * 1e6
        adam_step(s1, [clean], [g])
        adam_step(s2, [dirty], [g])
    np.testing.assert_array_equal(clean.data, dirty.data)


def test_adam_shape_mismatch():
    theta = T.parameter(np.zeros(3))
    state = AdamState.for_params([theta])
    with pytest.raises(DimensionError):
        adam_step(state, [theta], [np.zeros(2)])


def test_clip_by_global_norm():
    grads = [np.array([3.0]), None, np.array([4.0])]
    out = training.clip_by_global_norm(grads, 1.0)
    assert out[1] is None
    np.testing.assert_allclose([out[0][0], out[2][0]], [0.6, 0.8])
    assert training.clip_by_global_norm(grads, 10.0) is grads


# -- perplexity ----------------------------------------------------------------------

@pytest.mark.parametrize("nll,count,expected", [
    (100 * math.log(10), 100, 10.0),
    (0.0, 5, 1.0),
    (3 * math.log(10_000), 3, 10_000.0),
])
def test_perplexity_examples(nll, count, expected):
    assert training.perplexity(nll, count) == pytest.approx(expected, rel=1e-12)


def test_perplexity_needs_tokens():
    with pytest.raises(ValueError):
        training.perplexity(1.0, 0)


# -- classifier loops --------------------------------------------------------------

def classifier_setup(kind, vocab=4, hidden=6, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    encoder = training.InputEncoder(vocab)
    params = cells.init_params(kind, CellShape(vocab, hidden), rng=rng)
    head = training.ClassifierHead.init(classes, hidden, rng)
    return params, head, encoder


def parity_like(n, seed):
    """Label is whether token 1 occurs; lengths vary from 2 to 6."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ids = rng.integers(0, 4, size=int(rng.integers(2, 7)))
        out.append((ids, int(1 in ids)))
    return out


@pytest.mark.parametrize("kind", ["vanilla", "gru", "mufuru"])
def test_training_reduces_loss(kind):
    data = parity_like(60, 0)
    for attempt in range(3):
        params, head, encoder = classifier_setup(kind, seed=attempt)
        before, _ = training.evaluate_classifier(params, head, encoder, data)
        cfg = TrainConfig(epochs=15, batch_size=10, learning_rate=1e-2, seed=attempt)
        training.train_classifier(params, head, data, data, cfg, encoder)
        after, _ = training.evaluate_classifier(params, head, encoder, data)
        if after < before:
            return
    pytest.fail(f"{kind}: loss did not decrease in three attempts")


def test_single_example_fits():
    params, head, encoder = classifier_setup("mufuru")
    example = [(np.array([1, 2, 3]), 1)]
    cfg = TrainConfig(epochs=500, batch_size=1, learning_rate=1e-2, max_steps=500)
    result = training.train_classifier(params, head, example, example, cfg, encoder)
    loss, acc = training.evaluate_classifier(params, head, encoder, example)
    assert result.steps <= 500
    assert loss < 1e-2 and acc == 1.0


def test_contradictory_labels_give_half():
    params, head, encoder = classifier_setup("gru")
    data = [(np.array([2, 0, 1]), 0), (np.array([2, 0, 1]), 1)]
    cfg = TrainConfig(epochs=200, batch_size=2, learning_rate=1e-2)
    training.train_classifier(params, head, data, data, cfg, encoder)
    with T.no_grad():
        h = training.final_states(params, encoder, np.array([[2, 0, 1]]), np.array([3])).states[-1]
        logits = head(h).data[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert p[0] == pytest.approx(0.5, abs=0.02)


def test_training_is_deterministic():
    data = parity_like(40, 1)
    logs = []
    for _ in range(2):
        params, head, encoder = classifier_setup("mufuru", seed=3)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=3)
        result = training.train_classifier(params, head, data[:30], data[30:], cfg, encoder)
        logs.append((result.log.to_csv(), [t.data.tobytes() for t in params.tensors()]))
    assert logs[0] == logs[1]


@pytest.mark.parametrize("seed", range(3))
def test_best_dev_invariant(seed):
    data = parity_like(80, seed)
    params, head, encoder = classifier_setup("gru", seed=seed)
    cfg = TrainConfig(epochs=6, batch_size=10, learning_rate=5e-3, seed=seed, eval_every=2)
    result = training.train_classifier(params, head, data[:60], data[60:], cfg, encoder)
    history_best = max(acc for _, _, acc in result.history)
    ties = [s for s, _, acc in result.history if acc == history_best]
    _, restored = training.evaluate_classifier(params, head, encoder, data[60:])
    assert result.best_dev_accuracy == history_best == restored
    assert result.best_step in ties


def test_metrics_csv_layout():
    data = parity_like(20, 2)
    params, head, encoder = classifier_setup("vanilla")
    result = training.train_classifier(params, head, data, data,
                                       TrainConfig(epochs=2, batch_size=10), encoder)
    lines = result.log.to_csv().splitlines()
    assert lines[0] == "step,epoch,split,loss,metric"
    assert [line.split(",")[2] for line in lines[1:]] == ["train", "dev"] * 2


def test_empty_dev_rejected():
    params, head, encoder = classifier_setup("vanilla")
    with pytest.raises(ValueError):
        training.train_classifier(params, head, parity_like(5, 0), [], TrainConfig(), encoder)


def test_make_batches_cover_every_index_once():
    lengths = [3, 5, 3, 2, 5, 5, 7]
    batches = training.make_batches(lengths, 2, np.random.default_rng(0))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(len(lengths)))
    assert all(len(b) <= 2 for b in batches)


# -- logic --------------------------------------------------------------------------

def test_logic_profile_rows_sum_to_one():
    data = tasks.generate_logic_datasets(np.random.default_rng(0), 60, 20)
    rng = np.random.default_rng(0)
    params = cells.init_params("mufuru", CellShape(6, 4), rng=rng)
    head = training.ClassifierHead.init(2, 4, rng)
    result = training.train_logic(params, head, data, TrainConfig(epochs=1, batch_size=20))
    assert result.profile.shape == (6, 7)
    np.testing.assert_allclose(result.profile.sum(axis=1), 1.0, atol=1e-12)
    assert 0.0 <= result.test_accuracy <= 1.0


def test_logic_input_size_checked():
    data = tasks.generate_logic_datasets(np.random.default_rng(0), 20, 5)
    params = cells.init_params("gru", CellShape(5, 4))
    head = training.ClassifierHead.init(2, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        training.train_logic(params, head, data, TrainConfig(epochs=1))


def test_profile_rejects_other_cells():
    with pytest.raises(ValueError):
        training.op_weight_profile(cells.init_params("gru", CellShape(6, 4)), [])


# -- language modelling ------------------------------------------------------------

def make_corpus(train, valid, test, vocab):
    return tasks.TextCorpus(vocab, np.asarray(train), np.asarray(valid), np.asarray(test))


def lm_setup(kind, vocab_size, hidden=8, embed=4, seed=0):
    rng = np.random.default_rng(seed)
    encoder = training.InputEncoder.embedding(vocab_size, embed, rng)
    params = cells.init_params(kind, CellShape(embed, hidden), rng=rng)
    return params, encoder


def test_untrained_perplexity_bounds():
    rng = np.random.default_rng(0)
    V = 7
    ids = rng.integers(0, V, size=500)
    params, encoder = lm_setup("mufuru", V)
    head = training.LMHead.init(V, 8)
    ppl = training.perplexity(*training.evaluate_lm(params, head, encoder, ids))
    assert 1.0 <= ppl <= V * (1 + 1e-12)
    assert ppl == pytest.approx(V, rel=1e-12)       # zero head: uniform predictions


def test_degenerate_corpus_reaches_one():
    corpus = make_corpus(np.ones(2000, int), np.ones(300, int), np.ones(300, int), ["<unk>", "a"])
    params, encoder = lm_setup("gru", 2)
    cfg = TrainConfig(epochs=3, batch_size=10, learning_rate=1e-2, truncation=20)
    result, _ = training.train_lm(params, corpus, cfg, encoder)
    assert result.test_perplexity <= 1.05


def test_perplexity_matches_independent_recomputation():
    rng = np.random.default_rng(2)
    V = 5
    ids = rng.integers(0, V, size=400)
    params, encoder = lm_setup("mufuru", V)
    corpus = make_corpus(ids, ids[:200], ids[200:], [str(i) for i in range(V)])
    _, head = training.train_lm(params, corpus, TrainConfig(epochs=1, batch_size=4), encoder)
    total, count = training.evaluate_lm(params, head, encoder, corpus.test, streams=3, window=7)
    reported = training.perplexity(total, count)

    # one stream at a time, no batching, no windows, explicit log-softmax
    rows = training.batchify(corpus.test, 3)
    nll, n = 0.0, 0
    with T.no_grad():
        for row in rows:
            s = T.constant(np.zeros(8))
            for t in range(len(row) - 1):
                s, h = cells.step(params, T.constant(encoder.table.data[row[t]]), s)
                z = head.W_o.data @ h.data + head.b_o.data
                nll -= z[row[t + 1]] - (z.max() + np.log(np.exp(z - z.max()).sum()))
                n += 1
    assert count == n
    assert reported == pytest.approx(math.exp(nll / n), rel=1e-9)


def test_lm_logs_valid_and_test():
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 3, size=300)
    params, encoder = lm_setup("vanilla", 3)
    corpus = make_corpus(ids, ids[:60], ids[60:120], ["a", "b", "c"])
    result, _ = training.train_lm(params, corpus, TrainConfig(epochs=2, batch_size=3), encoder)
    splits = [row[2] for row in result.log.rows]
    assert splits == ["train", "valid", "train", "valid", "test"]
    assert result.valid_perplexity == min(v for _, _, v in result.history)


def test_lm_rejects_short_or_mismatched():
    params, encoder = lm_setup("gru", 3)
    short = make_corpus(np.zeros(10, int), np.zeros(5, int), np.zeros(5, int), ["a", "b", "c"])
    with pytest.raises(DataError):
        training.train_lm(params, short, TrainConfig(truncation=35), encoder)
    with pytest.raises(DataError):
        training.train_lm(params, short, TrainConfig(truncation=3), training.InputEncoder(4))


def test_batchify():
    rows = training.batchify(np.arange(11), 3)
    assert rows.tolist() == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
