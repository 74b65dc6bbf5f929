import math

import numpy as np
import pytest

from addrparse import nn
from addrparse.errors import AllMasked, DimensionMismatch, NotScalar
from addrparse.nn import LstmCellParams, Tensor


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def reference_lstm_step(x, h, c, w_ih, w_hh, b):
    """Scalar loops over the textbook gate equations."""
    H = len(h)
    z = [b[r] + sum(w_ih[r][j] * x[j] for j in range(len(x))) + sum(w_hh[r][j] * h[j] for j in range(H))
         for r in range(4 * H)]
    i = [sig(v) for v in z[:H]]
    f = [sig(v) for v in z[H : 2 * H]]
    g = [math.tanh(v) for v in z[2 * H : 3 * H]]
    o = [sig(v) for v in z[3 * H :]]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
    h_new = [o[k] * math.tanh(c_new[k]) for k in range(H)]
    return np.array(h_new), np.array(c_new)


def random_cell(rng, input_dim, hidden, name="cell"):
    p = LstmCellParams.init(rng, input_dim, hidden, name)
    p.b.data[:] = rng.uniform(-0.5, 0.5, p.b.shape)
    return p


# -- lstm_step ------------------------------------------------------------

def test_lstm_zero_params_zero_state():
    p = LstmCellParams.zeros(3, 4)
    h, c = nn.lstm_step(Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)
    assert np.array_equal(h.data, np.zeros(4)) and np.array_equal(c.data, np.zeros(4))


def test_lstm_zero_params_unit_cell():
    p = LstmCellParams.zeros(3, 4)
    c0 = np.array([1.0, -2.0, 0.5, 3.0])
    h, c = nn.lstm_step(Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(c0), p)
    np.testing.assert_allclose(c.data, 0.5 * c0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), rtol=0, atol=1e-15)


def test_lstm_step_matches_reference():
    rng = np.random.default_rng(0)
    p = random_cell(rng, 2, 3)
    x, h0, c0 = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    h, c = nn.lstm_step(Tensor(x), Tensor(h0), Tensor(c0), p)
    h_ref, c_ref = reference_lstm_step(x, h0, c0, p.w_ih.data.tolist(), p.w_hh.data.tolist(), p.b.data.tolist())
    np.testing.assert_allclose(h.data, h_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(c.data, c_ref, rtol=0, atol=1e-10)


def test_lstm_dimension_checks():
    p = LstmCellParams.zeros(3, 4)
    with pytest.raises(DimensionMismatch):
        nn.lstm_step(Tensor(np.ones(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)
    with pytest.raises(DimensionMismatch):
        nn.lstm_step(Tensor(np.ones(3)), Tensor(np.zeros(5)), Tensor(np.zeros(5)), p)
    with pytest.raises(DimensionMismatch):
        LstmCellParams(p.w_hh, p.w_hh, p.b, 3, 4)


@pytest.mark.parametrize("reverse", [False, True])
def test_sequence_matches_stepwise(reverse):
    rng = np.random.default_rng(1)
    T, B, I, H = 6, 5, 3, 4
    p = random_cell(rng, I, H)
    x = rng.normal(size=(T, B, I))
    lengths = np.array([3, 6, 1, 4, 6])
    out = nn.lstm_sequence(Tensor(x), p, lengths, reverse=reverse).data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for b in range(B):
        h, c = Tensor(np.zeros(H)), Tensor(np.zeros(H))
        for t in steps:
            if t < lengths[b]:
                h, c = nn.lstm_step(Tensor(x[t, b]), h, c, p)
            np.testing.assert_allclose(out[t, b, :H], h.data, rtol=0, atol=1e-12)
            np.testing.assert_allclose(out[t, b, H:], c.data, rtol=0, atol=1e-12)


# -- softmax / cross-entropy ------------------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(nn.softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(nn.softmax([7.3] * 8), [0.125] * 8, rtol=0, atol=1e-15)
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(nn.softmax([1.0, 2.0, 3.0]), [v / sum(e) for v in e], rtol=0, atol=1e-12)


def test_softmax_stable_and_normalised():
    rng = np.random.default_rng(2)
    v = rng.normal(scale=300, size=(50, 8))
    p = nn.softmax(v)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(nn.softmax(v + 1000.0), p, rtol=0, atol=1e-12)


def test_cross_entropy_uniform():
    loss = nn.cross_entropy(Tensor(np.zeros((3, 8))), [0, 4, 7])
    assert abs(loss.item() - math.log(8)) < 1e-12
    assert abs(math.log(8) - 2.0794415) < 1e-7


def test_cross_entropy_confident_limit():
    losses = []
    for gap in (1.0, 5.0, 20.0, 50.0):
        logits = np.zeros((1, 8))
        logits[0, 3] = gap
        losses.append(nn.cross_entropy(Tensor(logits), [3]).item())
    assert losses == sorted(losses, reverse=True) and losses[-1] < 1e-20


def test_cross_entropy_random_vs_scalar():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 8))
    targets = [1, 0, 7, 3, 3]
    mask = [True, False, True, True, False]
    expected = 0.0
    for row, t, m in zip(logits, targets, mask):
        if m:
            expected += -(row[t] - math.log(sum(math.exp(v) for v in row)))
    expected /= sum(mask)
    assert abs(nn.cross_entropy(Tensor(logits), targets, mask).item() - expected) < 1e-10


def test_cross_entropy_all_masked():
    with pytest.raises(AllMasked):
        nn.cross_entropy(Tensor(np.zeros((2, 8))), [0, 0], [False, False])


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(4)
    logits = nn.parameter(rng.normal(size=(4, 8)))
    targets = np.array([2, 5, 0, 7])
    nn.backward(nn.cross_entropy(logits, targets))
    expected = nn.softmax(logits.data)
    expected[np.arange(4), targets] -= 1.0
    np.testing.assert_allclose(logits.grad, expected / 4, rtol=0, atol=1e-15)


def test_masked_rows_get_no_gradient():
    logits = nn.parameter(np.arange(16.0).reshape(2, 8))
    nn.backward(nn.cross_entropy(logits, [1, 2], [True, False]))
    assert np.all(logits.grad[1] == 0.0)


# -- backward / sgd ---------------------------------------------------------

def test_square_gradient():
    w = nn.parameter([3.0])
    nn.backward(nn.tensor_sum(w * w))
    assert w.grad[0] == 6.0


def test_backward_needs_scalar():
    w = nn.parameter([1.0, 2.0])
    with pytest.raises(NotScalar):
        nn.backward(w * w)


def test_backward_is_repeatable_and_accumulates():
    w = nn.parameter([2.0])
    loss = nn.tensor_sum(w * w * w)
    nn.backward(loss)
    nn.backward(loss)
    assert w.grad[0] == 24.0
    nn.zero_grad([w])
    nn.backward(loss)
    assert w.grad[0] == 12.0


def test_sgd_examples():
    p = nn.parameter([1.0])
    p.grad = np.array([2.0])
    nn.sgd_step([p], 0.1)
    assert abs(p.data[0] - 0.8) < 1e-15
    q = nn.parameter([1.5, -2.0])
    q.grad = np.zeros(2)
    nn.sgd_step([q], 0.1)
    assert q.data.tolist() == [1.5, -2.0]
    with pytest.raises(ValueError):
        nn.sgd_step([q], 0.0)


def test_sgd_reduces_quadratic():
    w = nn.parameter([3.0])

    def loss():
        d = w + Tensor([-1.0])
        return nn.tensor_sum(d * d)
    before = loss().item()
    nn.backward(loss())
    nn.sgd_step([w], 0.1)
    assert loss().item() < before


def test_no_grad_records_nothing():
    w = nn.parameter([1.0])
    with nn.no_grad():
        out = w * w
    assert not out.requires_grad and out.is_leaf


# -- gradient checks --------------------------------------------------------

def _check(loss_fn, params, rng, samples=15):
    records = nn.gradient_check(loss_fn, params, samples, rng)
    worst = max(r["rel_error"] for r in records)
    assert worst < 1e-6, max(records, key=lambda r: r["rel_error"])


def test_gradcheck_linear():
    rng = np.random.default_rng(5)
    x = nn.parameter(rng.normal(size=(4, 3)), "x")
    w = nn.parameter(rng.normal(size=(2, 3)), "w")
    b = nn.parameter(rng.normal(size=2), "b")
    target = Tensor(rng.normal(size=(4, 2)))
    _check(lambda: nn.tensor_sum(nn.tanh(nn.linear(x, w, b)) * target), [x, w, b], rng)


def test_gradcheck_take_rows():
    rng = np.random.default_rng(6)
    table = nn.parameter(rng.normal(size=(6, 3)), "table")
    ids = np.array([[0, 2], [2, 5], [1, 0]])
    weights = Tensor(rng.normal(size=(3, 2, 3)))
    _check(lambda: nn.tensor_sum(nn.sigmoid(nn.take_rows(table, ids)) * weights), [table], rng)


def test_gradcheck_lstm_step():
    rng = np.random.default_rng(7)
    p = random_cell(rng, 3, 4)
    x = nn.parameter(rng.normal(size=(2, 3)), "x")
    h = nn.parameter(rng.normal(size=(2, 4)), "h")
    c = nn.parameter(rng.normal(size=(2, 4)), "c")
    wh, wc = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))

    def loss():
        h2, c2 = nn.lstm_step(x, h, c, p)
        return nn.tensor_sum(h2 * wh) + nn.tensor_sum(c2 * wc)
    _check(loss, [x, h, c, *p.parameters()], rng)


def test_gradcheck_bilstm_sequence():
    rng = np.random.default_rng(8)
    fwd, bwd = random_cell(rng, 3, 4, "f"), random_cell(rng, 3, 4, "b")
    x = nn.parameter(rng.normal(size=(5, 3, 3)), "x")
    lengths = np.array([5, 2, 4])
    wf, wb = Tensor(rng.normal(size=(5, 3, 8))), Tensor(rng.normal(size=(5, 3, 8)))

    def loss():
        a = nn.lstm_sequence(x, fwd, lengths)
        b = nn.lstm_sequence(x, bwd, lengths, reverse=True)
        return nn.tensor_sum(a * wf) + nn.tensor_sum(b * wb)
    _check(loss, [x, *fwd.parameters(), *bwd.parameters()], rng)


def test_final_state_matches_sequence_in_both_directions():
    rng = np.random.default_rng(11)
    fwd, bwd = random_cell(rng, 3, 4, "f"), random_cell(rng, 3, 4, "b")
    x = rng.normal(size=(5, 3, 3))
    lengths = np.array([2, 5, 4])
    rev = np.zeros_like(x)
    for i, n in enumerate(lengths):
        rev[:n, i] = x[:n, i][::-1]
    final = nn.lstm_final(Tensor(np.stack([x, rev])), [fwd, bwd], lengths).data
    seq_f = nn.lstm_sequence(Tensor(x), fwd, lengths).data
    seq_b = nn.lstm_sequence(Tensor(x), bwd, lengths, reverse=True).data
    np.testing.assert_allclose(final[0], seq_f[-1], rtol=0, atol=1e-14)
    np.testing.assert_allclose(final[1], seq_b[0], rtol=0, atol=1e-14)
    with pytest.raises(DimensionMismatch):
        nn.lstm_final(Tensor(np.stack([x, rev])), [fwd], lengths)


def test_gradcheck_final_state():
    rng = np.random.default_rng(12)
    cells = [random_cell(rng, 3, 4, "f"), random_cell(rng, 3, 4, "b")]
    x = nn.parameter(rng.normal(size=(2, 5, 3, 3)), "x")
    weights = Tensor(rng.normal(size=(2, 3, 8)))

    def loss():
        return nn.tensor_sum(nn.lstm_final(x, cells, [3, 5, 1]) * weights)
    _check(loss, [x, *cells[0].parameters(), *cells[1].parameters()], rng)


def test_padding_rows_do_not_leak_into_sequence_gradients():
    rng = np.random.default_rng(9)
    p = random_cell(rng, 2, 3)
    x = nn.parameter(rng.normal(size=(4, 2, 2)))
    out = nn.lstm_sequence(x, p, [2, 4])
    nn.backward(nn.tensor_sum(out * Tensor(rng.normal(size=out.shape))))
    assert np.all(x.grad[2:, 0] == 0.0)


def test_relative_error_floor():
    assert nn.relative_error(1.0, 1.0) == 0.0
    assert nn.relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert nn.relative_error(2.0, 1.0) == 0.5


def test_determinism():
    def run():
        rng = np.random.default_rng(10)
        p = random_cell(rng, 3, 4)
        x = Tensor(rng.normal(size=(5, 2, 3)))
        for _ in range(3):
            nn.zero_grad(p.parameters())
            nn.backward(nn.tensor_sum(nn.lstm_sequence(x, p)))
            nn.sgd_step(p.parameters(), 0.1)
        return [q.data.copy() for q in p.parameters()]
    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
