import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from aquadem.errors import DegenerateClusterError, DomainError, InputError, NumericalError, StructuralError
from aquadem.nn import dumps_document, finite_difference_check
from aquadem.quantizer import (
    FixedCandidates,
    MdnModel,
    QuantizerModel,
    TrainConfig,
    aquadem_loss,
    candidates,
    generator_from_dict,
    gmm_nll_identity_check,
    kmeans_candidates,
    mdn_logit_loss_and_grad,
    mdn_loss,
    mdn_sample,
    project_action,
    project_actions,
    random_candidates,
    soft_aggregate,
    soft_min,
    soft_min_loss_and_grad,
    squared_distances,
    train_quantizer,
)

from oracles import mixture_nll_mp, soft_aggregate_mp, soft_min_mp

finite = st.floats(-5, 5, allow_nan=False)
temps = st.sampled_from([1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0])


def small_model(K=3, T=0.01, seed=0, hidden=16, cls=QuantizerModel):
    return cls(2, 2, K, T, None, hidden, hidden, seed=seed)


# -- loss ---------------------------------------------------------------------


def test_loss_examples():
    # a candidate equal to the action dominates at low temperature
    cands = np.array([[0.5, 0.5], [-1.0, 1.0]])
    assert aquadem_loss(cands, np.array([0.5, 0.5]), 1e-3) == pytest.approx(0.0, abs=1e-12)
    # K = 1 is the squared error
    assert aquadem_loss(np.array([[1.0, 2.0]]), np.array([0.0, 0.0]), 0.5) == pytest.approx(5.0, abs=1e-12)


def test_loss_rejects_bad_temperature_and_dims():
    with pytest.raises(DomainError):
        aquadem_loss(np.zeros((2, 2)), np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        soft_aggregate(np.zeros(3), -1.0)
    with pytest.raises(StructuralError):
        aquadem_loss(np.zeros((2, 3)), np.zeros(2), 1.0)
    with pytest.raises(NumericalError):
        soft_min(np.array([np.nan, 1.0]), 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), temps)
def test_soft_min_matches_high_precision_oracle(x, T):
    got = soft_min(np.array(x), T)
    want = soft_min_mp(x, T)
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12 * max(1.0, T))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.sampled_from([1e-4, 1e-2, 1.0, 1e3, 1e6]))
def test_soft_aggregate_matches_oracle_and_bounds(x, T):
    x = np.array(x)
    got = soft_aggregate(x, T)
    assert got == pytest.approx(soft_aggregate_mp(x, T), rel=1e-10, abs=1e-10)
    assert x.min() - 1e-12 <= got <= x.mean() + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=8), temps)
def test_soft_min_bounds(x, T):
    x = np.array(x)
    v = soft_min(x, T)
    # -T log K <= soft_min - min <= 0
    assert x.min() - T * math.log(len(x)) - 1e-9 <= v <= x.min() + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=6), temps, st.randoms(use_true_random=False))
def test_soft_min_permutation_invariant(x, T, rnd):
    y = list(x)
    rnd.shuffle(y)
    assert soft_min(np.array(x), T) == pytest.approx(soft_min(np.array(y), T), rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=6), temps)
def test_soft_min_decreases_when_a_candidate_is_added(x, T):
    assert soft_min(np.array(x + [1.0]), T) <= soft_min(np.array(x), T) + 1e-12


def test_loss_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    for draw in range(20):
        cands = rng.uniform(-1, 1, size=(4, 3, 2))
        acts = rng.uniform(-1, 1, size=(4, 2))
        T = [0.05, 0.5, 2.0][draw % 3]

        def fn():
            loss, grad = soft_min_loss_and_grad(cands, acts, T)
            return loss, [grad]

        report = finite_difference_check(fn, [cands])
        assert report.passed, (draw, report)


def test_model_gradient_against_finite_differences():
    for seed in range(3):
        model = small_model(K=2, T=0.3, seed=seed, hidden=5)
        rng = np.random.default_rng(seed)
        s, a = rng.uniform(0, 1, size=(3, 2)), rng.uniform(-1, 1, size=(3, 2))

        def fn():
            cands, cache = model.forward(s)
            loss, g = soft_min_loss_and_grad(cands, a, model.temperature)
            return loss, [p for grads in model.backward(cache, g) for p in grads]

        params = [p for m in model.modules() for p in m.params()]
        assert finite_difference_check(fn, params).passed


def test_mdn_logit_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(3, 4))
        dist = rng.uniform(0, 1, size=(3, 4))

        def fn():
            loss, g = mdn_logit_loss_and_grad(logits, dist, 0.5)
            return loss, [g]

        assert finite_difference_check(fn, [logits]).passed


def test_mdn_loss_full_model_gradient():
    # psi part through the candidate network, logit part through the logit head only
    for seed in range(20):
        model = small_model(K=3, T=0.5, seed=seed, hidden=4, cls=MdnModel)
        rng = np.random.default_rng(seed)
        s, a = rng.uniform(0, 1, size=(2, 2)), rng.uniform(-1, 1, size=(2, 2))
        feats = model.trunk(s)
        cands = model.candidate_actions(s)

        def fn():
            logits, cache = model.logit_head.forward(feats)
            loss, g = mdn_logit_loss_and_grad(logits, squared_distances(cands, a), model.temperature)
            grads, _ = model.logit_head.backward(cache, g)
            return loss, grads

        assert finite_difference_check(fn, model.logit_head.params()).passed
        psi, logit = mdn_loss(model, s, a)
        assert math.isfinite(psi) and -1.0 <= logit <= 0.0


# -- model --------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 1000), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_candidates_inside_action_box(K, seed, state):
    model = QuantizerModel(2, 2, K, 0.1, (np.array([-0.5, 0.0]), np.array([0.5, 2.0])), 8, 8, seed=seed)
    c = candidates(model, np.array(state))
    assert c.K == K
    assert np.all(c.actions >= [-0.5, 0.0]) and np.all(c.actions <= [0.5, 2.0])


def test_candidates_deterministic_and_batched_consistently():
    model = small_model()
    s = np.array([[0.1, 0.2], [0.7, 0.3]])
    batch = model.candidate_actions(s)
    np.testing.assert_allclose(batch[1], model.actions(s[1]), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(model.actions(s[0]), model.actions(s[0]))


def test_state_dim_mismatch():
    with pytest.raises(StructuralError):
        small_model().actions(np.zeros(3))


def test_projection_nearest_and_tie_breaking():
    table = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert project_action(table, np.array([0.9, 0.1])) == 0
    assert project_action(table, np.array([0.0, 0.8])) == 1
    # equidistant candidates: lowest index
    assert project_action(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2)) == 0
    batch = np.broadcast_to(table, (2, 3, 2))
    np.testing.assert_array_equal(project_actions(batch, np.array([[0.9, 0.1], [0.0, 0.8]])), [0, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_is_argmin(seed):
    rng = np.random.default_rng(seed)
    table = rng.uniform(-1, 1, size=(5, 3))
    a = rng.uniform(-1, 1, size=3)
    k = project_action(table, a)
    d = np.linalg.norm(table - a, axis=1)
    assert d[k] == d.min()
    assert project_action(table, table[k]) == int(np.argmin(np.linalg.norm(table - table[k], axis=1)))


def test_checkpoint_round_trip():
    for model in (small_model(), small_model(cls=MdnModel), FixedCandidates(np.eye(2), "kmeans")):
        import json
        back = generator_from_dict(json.loads(dumps_document(model.to_dict())))
        s = np.array([0.3, 0.4])
        np.testing.assert_array_equal(back.actions(s), model.actions(s))
        assert type(back) is type(model)


def test_checkpoint_validation():
    doc = small_model().to_dict()
    with pytest.raises(StructuralError):
        generator_from_dict({**doc, "version": 2})
    with pytest.raises(StructuralError):
        generator_from_dict({**doc, "trait": "mystery"})
    with pytest.raises(StructuralError):
        generator_from_dict({**doc, "K": 5})


# -- training -----------------------------------------------------------------


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 1, size=(200, 2))
    a = np.where(rng.random((200, 1)) < 0.5, [[1.0, 0.0]], [[0.0, 1.0]])
    cfg = TrainConfig(K=2, temperature=0.01, batch_size=32, gradient_steps=300, trunk_hidden=16,
                      head_hidden=16, learning_rate=3e-3)
    r1 = train_quantizer((s, a), cfg)
    r2 = train_quantizer((s, a), cfg)
    assert r1.loss_trace == r2.loss_trace
    assert np.mean(r1.loss_trace[-30:]) < np.mean(r1.loss_trace[:30])
    assert all(math.isfinite(v) for v in r1.loss_trace)


def test_two_modes_recovered_with_two_heads():
    rng = np.random.default_rng(1)
    s = rng.uniform(0, 1, size=(400, 2))
    a = np.where(rng.random((400, 1)) < 0.5, [[0.8, 0.0]], [[0.0, 0.8]])
    cfg = TrainConfig(K=2, temperature=0.01, batch_size=64, gradient_steps=800, trunk_hidden=32,
                      head_hidden=32, learning_rate=3e-3, input_dropout=0.0, hidden_dropout=0.0)
    model = train_quantizer((s, a), cfg).model
    c = model.actions(np.array([0.5, 0.5]))
    for mode in ([0.8, 0.0], [0.0, 0.8]):
        assert np.min(np.linalg.norm(c - mode, axis=1)) < 0.15


def test_mdn_training_logit_head_only_moves_with_logit_loss():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 1, size=(100, 2))
    a = rng.uniform(-1, 1, size=(100, 2))
    cfg = TrainConfig(K=2, temperature=0.5, batch_size=16, gradient_steps=20, trunk_hidden=8,
                      head_hidden=8, input_dropout=0.0, hidden_dropout=0.0)
    res = train_quantizer((s, a), cfg, mdn=True)
    plain = train_quantizer((s, a), cfg)
    # the candidate network follows the same trajectory with or without the logit head
    np.testing.assert_allclose(res.model.actions(s[0]), plain.model.actions(s[0]), atol=0, rtol=0)
    assert len(res.logit_loss_trace) == 20
    w = res.model.mixture_weights(s[:3])
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_mdn_sample_follows_logits():
    model = small_model(K=2, cls=MdnModel)
    model.logit_head.weights[-1][...] = 0.0
    model.logit_head.biases[-1][...] = [math.log(3.0), 0.0]  # weights 0.75 / 0.25
    rng = np.random.default_rng(0)
    s = np.array([0.5, 0.5])
    cands = model.actions(s)
    draws = [mdn_sample(model, s, rng) for _ in range(4000)]
    first = np.mean([np.array_equal(d, cands[0]) for d in draws])
    assert abs(first - 0.75) < 0.03


def test_divergence_raises_with_step(monkeypatch):
    import aquadem.quantizer as q

    real = q.soft_min_loss_and_grad
    calls = []

    def flaky(cands, acts, T):
        calls.append(1)
        loss, grad = real(cands, acts, T)
        return (float("nan") if len(calls) == 4 else loss), grad

    monkeypatch.setattr(q, "soft_min_loss_and_grad", flaky)
    rng = np.random.default_rng(0)
    s, a = rng.uniform(0, 1, size=(8, 2)), rng.uniform(-1, 1, size=(8, 2))
    cfg = TrainConfig(K=2, temperature=0.1, batch_size=4, gradient_steps=10, trunk_hidden=4, head_hidden=4)
    with pytest.raises(NumericalError) as info:
        train_quantizer((s, a), cfg)
    assert info.value.step == 3


def test_non_finite_demonstrations_are_refused():
    with pytest.raises(InputError):
        train_quantizer((np.zeros((2, 2)), np.array([[np.inf, 0.0], [0.0, 0.0]])), TrainConfig(K=1))


# -- ablation generators --------------------------------------------------------


def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    centres = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    a = np.concatenate([c + 0.01 * rng.normal(size=(50, 2)) for c in centres])
    gen = kmeans_candidates((np.zeros((150, 2)), a), 3, seed=0)
    assert gen.state_independent and gen.K == 3
    for c in centres:
        assert np.min(np.linalg.norm(gen.table - c, axis=1)) < 0.01
    np.testing.assert_array_equal(gen.actions(np.array([0.1, 0.9])), gen.actions(np.array([0.5, 0.5])))


def test_kmeans_degenerate():
    a = np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 5)
    with pytest.raises(DegenerateClusterError):
        kmeans_candidates((np.zeros((10, 2)), a), 3)


def test_kmeans_matches_plain_lloyd_oracle():
    rng = np.random.default_rng(4)
    a = rng.uniform(-1, 1, size=(60, 2))
    gen = kmeans_candidates((np.zeros((60, 2)), a), 4, seed=1)
    # fixed point of Lloyd: every centre is the mean of its assigned points
    assign = np.argmin(((a[:, None] - gen.table[None]) ** 2).sum(-1), axis=1)
    for k in range(4):
        np.testing.assert_allclose(gen.table[k], a[assign == k].mean(axis=0), atol=1e-9)


def test_random_candidates_are_untrained_and_seeded():
    g1 = random_candidates(2, 2, 3, seed=5)
    g2 = random_candidates(2, 2, 3, seed=5)
    s = np.array([0.2, 0.2])
    np.testing.assert_array_equal(g1.actions(s), g2.actions(s))
    assert g1.trait == "random"
    assert not np.array_equal(g1.actions(s), random_candidates(2, 2, 3, seed=6).actions(s))


# -- mixture reading ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.sampled_from([1e-3, 0.05, 1.0, 30.0]), st.integers(0, 10_000))
def test_gmm_identity_against_oracle(K, T, seed):
    rng = np.random.default_rng(seed)
    model = QuantizerModel(2, 2, K, T, None, 6, 6, seed=seed)
    state, action = rng.uniform(0, 1, 2), rng.uniform(-1, 1, 2)
    lhs, rhs, const = gmm_nll_identity_check(model, state, action)
    assert const == pytest.approx(math.log(K), abs=1e-15)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
    oracle = mixture_nll_mp(model.actions(state), action, T)
    assert lhs == pytest.approx(oracle, rel=1e-10, abs=1e-10)
