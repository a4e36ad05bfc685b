import math

import numpy as np
import pytest

import gradcheck
from logattn import numerics as nx
from logattn.model import (ConfigError, LineBatch, LSTMParams, ModelConfig, ModelParams, UserContext, bem_forward,
                           em_forward, forward_lines, line_summary, lstm_step, param_shapes, tiered_forward,
                           tiered_step)
from logattn.numerics import Tensor
from logattn.tokenizer import TokenSequence

V = 12


def cfg(**kw) -> ModelConfig:
    base = dict(vocab_size=V, emb_dim=6, hidden=8, attn_dim=4, upper_hidden=8, max_len=11)
    base.update(kw)
    return ModelConfig(**base)


def line(ids, user="u", day=0) -> TokenSequence:
    return TokenSequence([1, *ids, 2], user, day)


def random_lines(n, length=10, user="u", seed=0):
    rng = np.random.default_rng(seed)
    return [line([int(i) for i in rng.integers(0, V, length)], user) for _ in range(n)]


# ------------------------------------------------------------------ LSTM


def test_lstm_zero_params_give_zero_state():
    p = LSTMParams(Tensor(np.zeros((5, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
    h, c = lstm_step(Tensor(np.random.default_rng(0).normal(size=5)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), p)
    assert np.array_equal(h.data, np.zeros(3)) and np.array_equal(c.data, np.zeros(3))


@pytest.mark.parametrize("n_in", [1, 4, 9])
def test_lstm_state_shape_independent_of_input(n_in):
    rng = np.random.default_rng(1)
    p = LSTMParams(Tensor(rng.normal(size=(n_in, 20))), Tensor(rng.normal(size=(5, 20))), Tensor(np.zeros(20)))
    h, c = lstm_step(Tensor(rng.normal(size=n_in)), Tensor(np.zeros(5)), Tensor(np.zeros(5)), p)
    assert h.shape == c.shape == (5,)
    with pytest.raises(nx.DimensionError):
        lstm_step(Tensor(rng.normal(size=n_in + 1)), Tensor(np.zeros(5)), Tensor(np.zeros(5)), p)


def test_lstm_matches_textbook_equations():
    rng = np.random.default_rng(2)
    n = 3
    wx, wh, b = rng.normal(size=(4, 4 * n)), rng.normal(size=(n, 4 * n)), rng.normal(size=4 * n)
    x, h0, c0 = rng.normal(size=4), rng.normal(size=n), rng.normal(size=n)
    z = x @ wx + h0 @ wh + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:n]), sig(z[n:2 * n]), sig(z[2 * n:3 * n]), np.tanh(z[3 * n:])
    c = f * c0 + i * g
    h = o * np.tanh(c)
    hh, cc = lstm_step(Tensor(x), Tensor(h0), Tensor(c0), LSTMParams(Tensor(wx), Tensor(wh), Tensor(b)))
    np.testing.assert_allclose(hh.data, h, atol=1e-14)
    np.testing.assert_allclose(cc.data, c, atol=1e-14)


def test_lstm_gradient_fd():
    rng = np.random.default_rng(3)
    p = LSTMParams(*(Tensor(rng.normal(size=s), requires_grad=True) for s in [(4, 12), (3, 12), (12,)]))
    x, h0, c0 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    w = Tensor(rng.normal(size=3))

    def loss():
        h, c = lstm_step(x, h0, c0, p)
        return nx.reduce_sum(nx.add(nx.mul(h, w), c))

    grads = nx.backward(loss())
    for t in p:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-5
            up = float(loss().data)
            flat[i] = old - 1e-5
            down = float(loss().data)
            flat[i] = old
            assert gradcheck.rel_err(grads[t].reshape(-1)[i], (up - down) / 2e-5) <= 1e-4


# ------------------------------------------------------------- event model


def test_config_rejects_illegal_combinations():
    with pytest.raises(ConfigError):
        cfg(bidirectional=True, attention="fixed")
    with pytest.raises(ConfigError):
        cfg(tiered=True, attention="syntax")
    with pytest.raises(ConfigError):
        cfg(attention="tiered")
    with pytest.raises(ConfigError):
        cfg(hidden=7, attention="semantic2")
    with pytest.raises(ConfigError):
        cfg(attention="bogus")


def test_parameter_shapes():
    s = param_shapes(cfg(attention="semantic2"))
    assert s["att.Wa"] == (4, 4) and s["out.W"] == (8 + 4, V)
    s = param_shapes(cfg(tiered=True, bidirectional=True, attention="tiered"))
    assert s["upper.wx"] == (2 * 16, 32) and s["fwd.wx"] == (6 + 8, 32) and s["tier.Wa"] == (16, 4)
    s = param_shapes(cfg(attention="syntax"))
    assert s["att.Q"] == (11, 4)


def test_initialization_is_seeded_and_sets_forget_bias():
    a, b = ModelParams.initialize(cfg(), 5), ModelParams.initialize(cfg(), 5)
    assert a.digest() == b.digest()
    assert a.digest() != ModelParams.initialize(cfg(), 6).digest()
    bias = a["fwd.b"].data
    assert np.array_equal(bias[8:16], np.ones(8)) and not bias[:8].any() and not a["out.b"].data.any()


def test_zeroed_output_head_gives_exactly_ln_v():
    m = ModelParams.initialize(cfg(), 0)
    m["out.W"].data[:] = 0.0
    probs, loss, _ = em_forward(line(range(3, 13 - 3)), m)
    assert np.all(probs == 1.0 / V)
    assert float(loss.data) == pytest.approx(probs.shape[0] * math.log(V), abs=1e-12)


def test_untrained_loss_near_ln_v():
    m = ModelParams.initialize(cfg(), 0)
    _, loss, _ = em_forward(line(range(3, 12)), m)
    assert abs(float(loss.data) / 10 - math.log(V)) < 0.5


@pytest.mark.parametrize("kw", [{}, {"attention": "fixed"}, {"attention": "syntax"}, {"attention": "semantic1"},
                                {"attention": "semantic2"}])
def test_distributions_and_loss_consistency(kw):
    m = ModelParams.initialize(cfg(**kw), 1)
    seq = random_lines(1, seed=4)[0]
    probs, loss, trace = em_forward(seq, m)
    assert probs.shape == (11, V)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    independent = -sum(math.log(probs[t - 1, seq.ids[t]]) for t in range(1, len(seq.ids)))
    assert float(loss.data) == pytest.approx(independent, abs=1e-12)


def test_padding_does_not_change_line_scores():
    for kw in ({}, {"bidirectional": True}, {"attention": "semantic1"}):
        m = ModelParams.initialize(cfg(**kw), 2)
        seqs = [line([3, 4, 5, 6, 7, 8]), line([9, 10]), line([3, 3, 3, 3, 3, 3, 3, 3])]
        batched = forward_lines(m, LineBatch.from_sequences(seqs)).nll
        alone = [forward_lines(m, LineBatch.from_sequences([s])).nll[0] for s in seqs]
        np.testing.assert_allclose(batched, alone, rtol=0, atol=1e-12)


def test_bem_with_zero_backward_head_equals_em_exactly():
    m = ModelParams.initialize(cfg(bidirectional=True), 3)
    m["out.Wb"].data[:] = 0.0
    seq = random_lines(1, seed=5)[0]
    p_bem, loss_bem = bem_forward(seq, m)
    em = forward_lines(m, LineBatch.from_sequences([seq]), use_backward=False)
    assert np.array_equal(p_bem, em.probabilities()[0])
    assert np.array_equal(loss_bem.data, em.loss.data)
    np.testing.assert_allclose(p_bem.sum(axis=1), 1.0, atol=1e-9)


def test_bem_uses_following_tokens():
    m = ModelParams.initialize(cfg(bidirectional=True), 3)
    a, b = line([3, 4, 5, 6]), line([3, 4, 5, 7])
    pa, _ = bem_forward(a, m)
    pb, _ = bem_forward(b, m)
    assert not np.allclose(pa[1], pb[1])   # prediction of position 2 sees token 4 of the line
    ea, _, _ = em_forward(a, ModelParams.initialize(cfg(), 3))
    eb, _, _ = em_forward(b, ModelParams.initialize(cfg(), 3))
    assert np.array_equal(ea[:3], eb[:3])  # forward-only model cannot


def test_bem_requires_backward_parameters():
    with pytest.raises(ConfigError):
        bem_forward(line([3]), ModelParams.initialize(cfg(), 0))


def test_out_of_range_token_rejected():
    with pytest.raises(IndexError):
        em_forward(line([V]), ModelParams.initialize(cfg(), 0))


# ------------------------------------------------------------------- tiers


def test_line_summary_examples():
    h = Tensor(np.arange(8.0)[None])
    np.testing.assert_array_equal(line_summary(h).data, np.r_[np.arange(8.0), np.arange(8.0)])
    same = Tensor(np.tile(np.arange(3.0), (4, 1)))
    np.testing.assert_array_equal(line_summary(same).data[:3], np.arange(3.0))
    rows = np.random.default_rng(6).normal(size=(5, 4))
    out = line_summary(Tensor(rows)).data
    oracle = [sum(rows[j, k] for j in range(5)) / 5 for k in range(4)]
    np.testing.assert_allclose(out[:4], oracle, atol=1e-12)
    assert np.array_equal(out[4:], rows[-1])


def test_masked_summary_matches_unpadded():
    rng = np.random.default_rng(7)
    rows = rng.normal(size=(2, 5, 4))
    out = line_summary(Tensor(rows), lengths=[5, 3]).data
    np.testing.assert_allclose(out[1], np.r_[rows[1, :3].mean(axis=0), rows[1, 2]], atol=1e-15)


def test_tiered_step_context_and_user_check():
    m = ModelParams.initialize(cfg(tiered=True), 0)
    ctx = UserContext.fresh("a", 8)
    assert not ctx.h.any()
    h, new = tiered_step(Tensor(np.ones(16)), ctx, m.lstm("upper"), "a")
    assert h.shape == (8,) and new.h.shape == (8,) and new.user == "a"
    with pytest.raises(nx.ContractError):
        tiered_step(Tensor(np.ones(16)), ctx, m.lstm("upper"), "b")


def test_first_line_sees_zero_context():
    m = ModelParams.initialize(cfg(tiered=True), 1)
    seq = random_lines(1, user="a")[0]
    out = tiered_forward(m, [[seq]], [UserContext.fresh("a", 8)])
    direct = forward_lines(m, LineBatch.from_sequences([seq]), context=Tensor(np.zeros((1, 8))))
    assert out.nll[0][0] == direct.nll[0]


@pytest.mark.parametrize("kw", [{}, {"attention": "tiered"}, {"bidirectional": True, "attention": "tiered"}])
def test_users_are_isolated(kw):
    m = ModelParams.initialize(cfg(tiered=True, **kw), 2)
    a = random_lines(4, user="a", seed=1)
    b = random_lines(2, user="b", seed=2)
    b[1].ids = b[1].ids[:5] + [2]
    fresh = lambda u: UserContext.fresh(u, 8)  # noqa: E731
    together = tiered_forward(m, [a, b], [fresh("a"), fresh("b")])
    sep_a = tiered_forward(m, [a], [fresh("a")])
    sep_b = tiered_forward(m, [b], [fresh("b")])
    np.testing.assert_allclose(together.nll[0], sep_a.nll[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(together.nll[1], sep_b.nll[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(together.states[1][0], sep_b.states[0][0], atol=1e-12)


def test_context_carries_information_between_lines():
    m = ModelParams.initialize(cfg(tiered=True), 3)
    first_a, first_b, second = line([3, 3, 3]), line([9, 9, 9]), line([4, 5, 6])
    fresh = UserContext.fresh("u", 8)
    x = tiered_forward(m, [[first_a, second]], [fresh]).nll[0][1]
    y = tiered_forward(m, [[first_b, second]], [fresh]).nll[0][1]
    assert x != y


def test_tiered_rejects_foreign_lines():
    m = ModelParams.initialize(cfg(tiered=True), 0)
    with pytest.raises(nx.ContractError):
        tiered_forward(m, [[line([3], user="b")]], [UserContext.fresh("a", 8)])


# -------------------------------------------------------------- gradients


@pytest.mark.parametrize("name", list(gradcheck.VARIANTS))
def test_gradients_match_finite_differences(name):
    m, loss = gradcheck.toy_problem(name)
    report = gradcheck.check(m, loss)
    assert report.ok, report


def test_syntax_gradient_reaches_only_seen_rows():
    m = ModelParams.initialize(cfg(attention="syntax"), 0)
    loss = forward_lines(m, LineBatch.from_sequences([line([3, 4])])).loss
    g = nx.backward(loss)[m["att.Q"]]
    # a 4-token line attends at positions 2 and 3, which use rows 1 and 2
    assert np.abs(g[[1, 2]]).sum() > 0
    assert not g[[0, 3, 4, 5, 6, 7, 8, 9, 10]].any()


def test_fixed_query_receives_gradient():
    m = ModelParams.initialize(cfg(attention="fixed"), 0)
    loss = forward_lines(m, LineBatch.from_sequences(random_lines(2))).loss
    assert np.abs(nx.backward(loss)[m["att.q"]]).sum() > 0
