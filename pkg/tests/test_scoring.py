import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempkg.corpus import build_vocab
from tempkg.kg_store import Interval, Point, Quadruple, load_tkg
from tempkg.scoring import (Model, SentenceScore, TrainHyper, aggregate, aggregation_weights,
                            negative_pools, negative_weights, new_model, probability_from_h,
                            sample_negatives, score_quads, scoring_grad_check,
                            sentence_probability, sigmoid, t2v, train, training_loss,
                            zero_scoring)
from tempkg.encoder import TrainingDiverged
from tempkg.sentences import TemplateTable

from conftest import random_tkg


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# -- t2v and sentence probability ----------------------------------------------------------

def test_t2v_values():
    assert not t2v(3.0, np.zeros(5), np.zeros(5)).any()
    v = t2v(3.0, np.array([2.0, np.pi]), np.array([1.0, 0.0]))
    assert v[0] == pytest.approx(7.0) and abs(v[1]) < 1e-12
    phi = np.array([0.3, 1.1, -2.0])
    assert np.allclose(t2v(0.0, np.array([5.0, 6.0, 7.0]), phi), [0.3, math.sin(1.1), math.sin(-2.0)])
    assert t2v(np.arange(4.0), np.ones(3), np.zeros(3)).shape == (4, 3)


def test_zero_parameters_give_one_half():
    u = np.arange(4.0)
    assert sentence_probability(u, u, u, Point(3), zero_scoring(4)) == 0.5


def test_subject_object_cancellation():
    rng = np.random.default_rng(0)
    p = {k: rng.normal(size=v.shape) for k, v in zero_scoring(4).items()}
    p["w_o"], p["b_o"] = p["w_s"], p["b_s"]
    u_s, u_r = rng.normal(size=4), rng.normal(size=4)
    expect = sig(float(p["w_theta"] @ (p["w_r"] @ u_r + p["b_r"]) + p["b_theta"]))
    for t in (Point(0), Point(9), Interval(2, 30)):
        assert sentence_probability(u_s, u_r, u_s, t, p) == pytest.approx(expect, abs=1e-12)


def test_scalar_probability():
    got = probability_from_h(np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([3.0]),
                             np.array([1.0]), 0.0)
    assert float(got) == pytest.approx(sig(4.0)) and round(float(got), 4) == 0.9820


def test_interval_time_is_endpoint_mean():
    rng = np.random.default_rng(1)
    p = {k: rng.normal(size=v.shape) for k, v in zero_scoring(3).items()}
    u = [rng.normal(size=3) for _ in range(3)]
    h_t = 0.5 * (t2v(2, p["omega"], p["phi"]) + t2v(6, p["omega"], p["phi"]))
    expect = probability_from_h(p["w_s"] @ u[0] + p["b_s"], p["w_r"] @ u[1] + p["b_r"],
                                p["w_o"] @ u[2] + p["b_o"], h_t, p["w_theta"], p["b_theta"])
    assert sentence_probability(*u, Interval(2, 6), p) == pytest.approx(float(expect))


def test_no_t2v_uses_ones():
    rng = np.random.default_rng(2)
    p = {k: rng.normal(size=v.shape) for k, v in zero_scoring(3).items()}
    u = [rng.normal(size=3) for _ in range(3)]
    a = sentence_probability(*u, Point(1), p, no_t2v=True)
    b = sentence_probability(*u, Point(40), p, no_t2v=True)
    assert a == b


# -- aggregation ------------------------------------------------------------------------------

def test_singleton_aggregate():
    f, items = aggregate([(0.37, 4)], Point(9))
    assert f == 0.37 and items[0].weight == 1.0


def test_point_aggregate_worked_value():
    f, items = aggregate([(0.8, 9), (0.4, 7)], Point(10))
    assert [round(s.weight, 4) for s in items] == [0.8808, 0.1192]
    assert round(f, 4) == 0.7523


def test_interval_aggregate_worked_value():
    f, _ = aggregate([(0.6, 4), (0.2, 2)], Interval(5, 7))
    assert round(f, 4) == 0.5523
    for t in (5, 7):
        assert f == pytest.approx(aggregate([(0.6, 4), (0.2, 2)], Point(t))[0], abs=1e-12)


def test_empty_aggregate_is_an_error():
    with pytest.raises(ValueError):
        aggregate([], Point(0))


def test_old_sentences_do_not_underflow():
    w = aggregation_weights([-5000, -5001], Point(10))
    assert np.all(np.isfinite(w)) and w.sum() == pytest.approx(1.0)


bundles = st.lists(st.tuples(st.floats(0.001, 0.999), st.integers(-200, 200)),
                   min_size=1, max_size=12)


@given(bundles, st.integers(0, 50), st.integers(0, 50), st.integers(-1000, 1000))
@settings(max_examples=200, deadline=None)
def test_aggregation_properties(items, lo, width, shift):
    begin = max(t for _, t in items) + lo
    end = begin + width
    f, scored = aggregate(items, Interval(begin, end))
    ws = [s.weight for s in scored]
    assert abs(sum(ws) - 1.0) < 1e-9
    ps = [p for p, _ in items]
    assert min(ps) - 1e-12 <= f <= max(ps) + 1e-12
    assert abs(f - aggregate(items, Point(begin))[0]) < 1e-12
    moved = [(p, t + shift) for p, t in items]
    assert abs(f - aggregate(moved, Interval(begin + shift, end + shift))[0]) < 1e-12


def test_sentence_score_objects_are_accepted():
    f, items = aggregate([SentenceScore(0.5, 1), SentenceScore(0.9, 3)], Point(3))
    assert items[1].weight > items[0].weight and 0.5 < f < 0.9


# -- loss --------------------------------------------------------------------------------------

def test_loss_worked_value():
    got = training_loss(0.9, [0.1], margin=1.0)
    assert got == pytest.approx(-math.log(sig(-0.1)) - math.log(sig(0.9)))
    assert round(got, 4) == 1.0856


@pytest.mark.parametrize("f,margin", [(0.3, 0.5), (0.8, 1.0), (0.0, -2.0)])
def test_conventions_agree_when_scores_are_equal(f, margin):
    a = training_loss(f, [f], margin, "plausibility")
    b = training_loss(f, [f], margin, "paper-literal")
    assert a == pytest.approx(b, abs=1e-14)


def test_uniform_weights_average_single_negative_losses():
    negs = [0.1, 0.4, 0.7, 0.2]
    four = training_loss(0.6, negs, 0.5)
    singles = [training_loss(0.6, [x], 0.5) for x in negs]
    assert four == pytest.approx(np.mean(singles), abs=1e-14)


def test_adversarial_weights_favour_hard_negatives():
    w = negative_weights(np.array([0.1, 0.9]), 2.0)
    assert w.sum() == pytest.approx(1.0) and w[1] > w[0]
    assert np.allclose(negative_weights(np.array([0.1, 0.9]), 0.0), 0.5)


def test_loss_errors():
    with pytest.raises(ValueError):
        training_loss(0.5, [])
    with pytest.raises(ValueError):
        training_loss(0.5, [0.1], convention="distance")


@pytest.mark.parametrize("conv", ["plausibility", "paper-literal"])
@pytest.mark.parametrize("temp", [0.0, 1.5])
def test_loss_gradient_in_f(conv, temp):
    f_pos, f_negs, eps = 0.63, np.array([0.2, 0.55, 0.9]), 1e-6
    _, d_pos, d_neg = training_loss(f_pos, f_negs, 0.5, conv, temp, with_grad=True)
    num = (training_loss(f_pos + eps, f_negs, 0.5, conv, temp)
           - training_loss(f_pos - eps, f_negs, 0.5, conv, temp)) / (2 * eps)
    assert d_pos == pytest.approx(num, rel=1e-6)
    if temp == 0.0:
        for i in range(3):
            up, dn = f_negs.copy(), f_negs.copy()
            up[i] += eps
            dn[i] -= eps
            num = (training_loss(f_pos, up, 0.5, conv) - training_loss(f_pos, dn, 0.5, conv)) / (2 * eps)
            assert d_neg[i] == pytest.approx(num, rel=1e-6)


def test_adversarial_weights_are_constants_for_the_gradient():
    f_negs, eps = np.array([0.2, 0.7]), 1e-6
    _, _, d_neg = training_loss(0.5, f_negs, 0.5, temperature=2.0, with_grad=True)
    w = negative_weights(f_negs, 2.0)
    for i in range(2):
        up, dn = f_negs.copy(), f_negs.copy()
        up[i] += eps
        dn[i] -= eps
        frozen = lambda x: -np.sum(w * np.log(sigmoid(0.5 - x)))
        assert d_neg[i] == pytest.approx((frozen(up) - frozen(dn)) / (2 * eps), rel=1e-6)


def test_plausibility_rewards_high_positive_scores():
    assert training_loss(0.95, [0.05]) < training_loss(0.05, [0.95])
    assert training_loss(0.95, [0.05], convention="paper-literal") > \
        training_loss(0.05, [0.95], convention="paper-literal")


# -- negatives ---------------------------------------------------------------------------------

TRIANGLE = "A\tr\tB\t2014-01-01\nB\tr\tC\t2014-01-02\nC\tr\tA\t2014-01-03\nD\tr\tE\t2014-01-01\n"


def test_triangle_pool_is_the_third_vertex():
    g = load_tkg(TRIANGLE)
    pos = g.edges[0]
    c = g.entity_index["C"]
    assert negative_pools(g, pos)[0] == {c}
    for seed in range(30):
        (neg,) = sample_negatives(g, pos, 1, np.random.default_rng(seed))
        assert c in (neg.subject, neg.object)
        assert g.edge_id(neg) is None


def test_fallback_when_alternatives_are_edges():
    g = load_tkg("A\tr\tB\t2014-01-01\nA\tr\tC\t2014-01-01\nC\tr\tB\t2014-01-01\n")
    pos = g.edges[0]
    for seed in range(20):
        (neg,) = sample_negatives(g, pos, 1, np.random.default_rng(seed))
        assert g.edge_id(neg) is None and neg != pos and neg.time == pos.time


def test_head_tail_balance():
    g = random_tkg(0, num_entities=30, num_edges=80)
    pos = g.edges[0]
    negs = sample_negatives(g, pos, 10_000, np.random.default_rng(7))
    heads = sum(q.subject != pos.subject for q in negs)
    assert abs(heads - 5000) < 3 * math.sqrt(10_000 * 0.25)


@pytest.mark.parametrize("seed", range(10))
def test_negatives_never_collide(seed):
    g = random_tkg(seed, num_edges=60)
    rng = np.random.default_rng(seed)
    for pos in g.edges[:10]:
        negs = sample_negatives(g, pos, 6, rng)
        assert len(negs) == 6
        assert all(g.edge_id(q) is None and q.time == pos.time for q in negs)
        assert all((q.subject == pos.subject) != (q.object == pos.object) for q in negs)


def test_known_graphs_are_filtered():
    g = load_tkg(TRIANGLE)
    pos = g.edges[0]
    c = g.entity_index["C"]
    ex = Quadruple(pos.subject, pos.relation, c, pos.time)
    ex2 = Quadruple(c, pos.relation, pos.object, pos.time)
    known = load_tkg(TRIANGLE + "A\tr\tC\t2014-01-01\nC\tr\tB\t2014-01-01\n")
    for seed in range(20):
        negs = sample_negatives(g, pos, 2, np.random.default_rng(seed), known=[known])
        assert ex not in negs and ex2 not in negs


def test_negative_sampling_is_seeded():
    g = random_tkg(3)
    a = sample_negatives(g, g.edges[1], 5, np.random.default_rng([4, 2]))
    b = sample_negatives(g, g.edges[1], 5, np.random.default_rng([4, 2]))
    assert a == b
    with pytest.raises(ValueError):
        sample_negatives(g, g.edges[1], 0, np.random.default_rng(0))


# -- model, gradients, training ----------------------------------------------------------------

def tiny_model(g, seed=0, d=4, scale=0.5, **cfg):
    t = TemplateTable()
    cfg.setdefault("N", 2)
    cfg.setdefault("walks", 16)
    return new_model(build_vocab(g, t), t, g, d_model=d, init_scale=scale, seed=seed, **cfg)


@pytest.mark.parametrize("seed", range(4))
def test_end_to_end_gradients(seed):
    g = random_tkg(seed, num_entities=8, num_edges=25, span=10)
    flags = [{}, {"no_t2v": True}, {"no_history": True}, {}][seed]
    m = tiny_model(g, seed, **flags)
    rng = np.random.default_rng(seed)
    hyper = TrainHyper(n=2, N=2, loss_convention=("plausibility", "paper-literal")[seed % 2])
    examples = [(q, sample_negatives(g, q, 2, rng)) for q in g.edges[-2:]]
    assert scoring_grad_check(m, g, examples, hyper) < 1e-4


def test_scores_are_probabilities_and_deterministic():
    g = random_tkg(5)
    m = tiny_model(g)
    f = score_quads(m, g, g.edges[:10])
    assert np.all((f > 0) & (f < 1))
    assert np.array_equal(f, score_quads(tiny_model(g), g, g.edges[:10]))


def test_zero_epochs_change_nothing():
    g = random_tkg(6)
    m = tiny_model(g)
    before = {k: v.copy() for k, v in m.tensors().items()}
    assert train(g, m, TrainHyper(epochs=0, N=2)) == []
    assert all(np.array_equal(before[k], v) for k, v in m.tensors().items())


def test_training_lowers_the_loss_and_is_reproducible():
    g = random_tkg(7, num_edges=30)
    hyper = TrainHyper(epochs=6, lr=1e-2, n=2, N=2, seed=3)
    h1 = train(g, tiny_model(g, d=8, scale=0.1), hyper)
    h2 = train(g, tiny_model(g, d=8, scale=0.1), hyper)
    assert h1 == h2 and h1[-1] < h1[0]


def test_frozen_encoder_is_untouched():
    g = random_tkg(8)
    m = tiny_model(g)
    enc = {k: v.copy() for k, v in m.encoder.tensors.items()}
    train(g, m, TrainHyper(epochs=1, N=2, n=2, freeze_encoder=True))
    assert all(np.array_equal(enc[k], m.encoder[k]) for k in enc)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_step():
    g = random_tkg(9)
    m = tiny_model(g)
    m.scoring["w_theta"][:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0, step 0"):
        train(g, m, TrainHyper(epochs=1, N=2))


@pytest.mark.parametrize("flag", ["no_paths", "no_history", "no_t2v"])
def test_ablation_switches_run(flag):
    g = random_tkg(10)
    m = tiny_model(g, **{flag: True})
    hist = train(g, m, TrainHyper(epochs=1, N=2, n=2))
    assert len(hist) == 1 and np.isfinite(hist[0])


def test_model_checkpoint_round_trip(tmp_path):
    g = random_tkg(11)
    m = tiny_model(g, no_t2v=True)
    m.save(tmp_path / "m.ckpt", extra={"note": 1})
    back = Model.load(tmp_path / "m.ckpt")
    assert back.config == m.config and list(back.vocab.tokens) == list(m.vocab.tokens)
    assert all(np.array_equal(v, back.tensors()[k]) for k, v in m.tensors().items())
    assert np.array_equal(score_quads(m, g, g.edges[:5]), score_quads(back, g, g.edges[:5]))


def test_sigmoid_is_stable():
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
