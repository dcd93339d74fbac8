import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convkr import diffcore as dc
from convkr.errors import CheckError, ConfigurationError, DimensionError, EvaluationError, TrainingError


def loop_conv_valid(signal, kernel, bias):
    T, L = len(signal), len(kernel)
    out = []
    for i in range(T - L + 1):
        s = bias
        for l in range(L):
            s += kernel[l] * signal[i + l]
        out.append(s)
    return np.array(out)


def loop_conv_same(signal, kernel):
    M = len(kernel) // 2
    T = len(signal)
    out = np.zeros(T)
    for t in range(T):
        s = 0.0
        for tau in range(-M, M + 1):
            if 0 <= t + tau < T:
                s += kernel[tau + M] * signal[t + tau]
        out[t] = s
    return out


# ---------------------------------------------------------------- convolution

def test_conv1d_valid_examples():
    np.testing.assert_array_equal(dc.conv1d_valid([5, 7, 9], [1]), [5, 7, 9])
    np.testing.assert_array_equal(dc.conv1d_valid([1] * 5, [1, 1, 1]), [3, 3, 3])


def test_conv1d_valid_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = rng.integers(3, 50)
        L = rng.integers(1, min(T, 6) + 1)
        x, k, b = rng.normal(size=T), rng.normal(size=L), rng.normal()
        np.testing.assert_allclose(dc.conv1d_valid(x, k, b), loop_conv_valid(x, k, b), rtol=0, atol=1e-12)


def test_conv1d_valid_rejects_long_kernel():
    with pytest.raises(DimensionError, match="3.*2"):
        dc.conv1d_valid([1.0, 2.0], [1.0, 1.0, 1.0])


def test_conv1d_same_examples():
    np.testing.assert_array_equal(dc.conv1d_same_centered([0, 1, 0], [1, 1, 1]), [1, 1, 1])
    np.testing.assert_array_equal(dc.conv1d_same_centered([2, 0, 0], [0, 1, 0]), [2, 0, 0])
    with pytest.raises(ConfigurationError):
        dc.conv1d_same_centered([1, 2, 3], [1, 1])


def test_conv1d_same_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = rng.integers(1, 50)
        M = rng.integers(0, 8)
        x, k = rng.normal(size=T), rng.normal(size=2 * M + 1)
        np.testing.assert_allclose(dc.conv1d_same_centered(x, k), loop_conv_same(x, k), rtol=0, atol=1e-12)


def test_conv1d_channels_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 11))
    w = rng.normal(size=(5, 4, 3))
    b = rng.normal(size=5)
    out = dc.conv1d_channels(x, w, b)
    ref = np.zeros((3, 5, 9))
    for n in range(3):
        for o in range(5):
            ref[n, o] = b[o] + sum(loop_conv_valid(x[n, c], w[o, c], 0.0) for c in range(4))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- pooling

def test_maxpool_examples():
    out, _ = dc.maxpool([1, 3, 2, 5, 4, 6], 3)
    np.testing.assert_array_equal(out, [3, 6])
    out, _ = dc.maxpool(np.full(9, 2.5), 3)
    np.testing.assert_array_equal(out, [2.5] * 3)
    out, _ = dc.maxpool(np.arange(34.0), 3)
    assert len(out) == 11
    with pytest.raises(DimensionError):
        dc.maxpool([1.0, 2.0], 3)


def test_maxpool_ties_route_to_first_index():
    out, idx = dc.maxpool([4.0, 4.0, 1.0], 3)
    g = dc.maxpool_backward([1.0], idx, 3)
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


def test_maxpool_length_law_exhaustive():
    for T in range(1, 101):
        for p in range(1, T + 1):
            out, _ = dc.maxpool(np.zeros(T), p)
            assert len(out) == T // p


def test_maxpool_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=47)
    out, _ = dc.maxpool(x, 4)
    ref = [max(x[4 * i:4 * i + 4]) for i in range(47 // 4)]
    np.testing.assert_array_equal(out, ref)


# ---------------------------------------------------------------- activations

def test_activation_examples():
    np.testing.assert_array_equal(dc.activation("relu", [-1, 0, 2]), [0, 0, 2])
    assert dc.activation("sigmoid", 0.0) == 0.5
    for a in (-300.0, 0.0, 7.5, 1e3):
        np.testing.assert_allclose(np.exp(dc.activation("log_softmax2", [a, a])), [0.5, 0.5], rtol=0, atol=1e-15)


def test_activations_match_loops():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 2)) * 5
    np.testing.assert_allclose(dc.relu(x), [[max(0.0, v) for v in row] for row in x], atol=1e-12)
    np.testing.assert_allclose(dc.sigmoid(x), [[1 / (1 + math.exp(-v)) for v in row] for row in x], atol=1e-12)
    ref = [[v - math.log(math.exp(row[0]) + math.exp(row[1])) for v in row] for row in x]
    np.testing.assert_allclose(dc.log_softmax2(x), ref, atol=1e-12)


# ---------------------------------------------------------------- batch norm

def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(5)
    bn = dc.BatchNorm(4, "bn")
    out = bn.forward(rng.normal(3, 2, size=(64, 4)))
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-4 + 1e-6)  # epsilon shrinks variance slightly


def test_batchnorm_eval_identity():
    bn = dc.BatchNorm(3, "bn")
    bn.train = False
    x = np.random.default_rng(6).normal(size=(5, 3))
    np.testing.assert_allclose(bn.forward(x), x / math.sqrt(1 + bn.epsilon), rtol=1e-15)


def test_batchnorm_needs_batch_of_two():
    with pytest.raises(TrainingError):
        dc.BatchNorm(2, "bn").forward(np.ones((1, 2)))


def test_batchnorm_matches_loop():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 3, 5))
    bn = dc.BatchNorm(3, "bn")
    bn.gamma.value[:] = rng.normal(size=3)
    bn.beta.value[:] = rng.normal(size=3)
    out = bn.forward(x)
    for f in range(3):
        vals = x[:, f, :].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        ref = (x[:, f, :] - mu) / math.sqrt(var + 1e-5) * bn.gamma.value[f] + bn.beta.value[f]
        np.testing.assert_allclose(out[:, f, :], ref, atol=1e-12)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradcheck(train):
    rng = np.random.default_rng(8)
    x = dc.Param("x", rng.normal(size=(5, 3)))
    bn = dc.BatchNorm(3, "bn")
    bn.gamma.value[:] = rng.normal(size=3)
    bn.beta.value[:] = rng.normal(size=3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, size=3)
    bn.train = train
    target = rng.normal(size=(5, 3))
    frozen = (bn.running_mean.copy(), bn.running_var.copy())

    def closure():
        bn.running_mean, bn.running_var = frozen[0].copy(), frozen[1].copy()
        out = bn.forward(x.value)
        x.accumulate(bn.backward(out - target))
        return 0.5 * float(np.sum((out - target) ** 2))

    rep = dc.grad_check(closure, [x, bn.gamma, bn.beta])
    assert rep.passed, rep


# ---------------------------------------------------------------- dropout

def test_dropout_eval_and_zero_rate_identity():
    x = np.random.default_rng(9).normal(size=100)
    rng = np.random.default_rng(0)
    out, mask = dc.dropout(x, 0.5, train=False, rng=rng)
    assert out is x or np.array_equal(out, x)
    out, _ = dc.dropout(x, 0.0, train=True, rng=rng)
    np.testing.assert_array_equal(out, x)


def test_dropout_unbiased():
    rng = np.random.default_rng(10)
    out, mask = dc.dropout(np.ones(100_000), 0.5, train=True, rng=rng)
    se = out.std() / math.sqrt(out.size)
    assert abs(out.mean() - 1.0) < 3 * se
    assert set(np.unique(out)) <= {0.0, 2.0}


# ---------------------------------------------------------------- dense

def test_dense_examples():
    x = np.random.default_rng(11).normal(size=(4, 3))
    np.testing.assert_array_equal(dc.dense(x, np.eye(3), np.zeros(3)), x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(dc.dense(x, np.zeros((3, 2)), b), np.tile(b, (4, 1)))
    with pytest.raises(DimensionError):
        dc.dense(x, np.zeros((2, 2)), b)


def test_dense_gradcheck():
    rng = np.random.default_rng(12)
    x = dc.Param("x", rng.normal(size=(4, 3)))
    w = dc.Param("w", rng.normal(size=(3, 2)))
    b = dc.Param("b", rng.normal(size=2))

    def closure():
        out = dc.dense(x.value, w.value, b.value)
        dx, dw, db = dc.dense_backward(np.cos(out), x.value, w.value)
        x.accumulate(dx)
        w.accumulate(dw)
        b.accumulate(db)
        return float(np.sum(np.sin(out)))

    assert dc.grad_check(closure, [x, w, b]).passed


# ---------------------------------------------------------------- losses

def test_weighted_nll_examples():
    lp = np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]]))
    assert dc.weighted_nll(lp, [0, 1], 3.0) == 0.0
    rng = np.random.default_rng(13)
    lp = dc.log_softmax2(rng.normal(size=(6, 2)))
    y = np.array([0, 1, 0, 1, 0, 1])
    unweighted = -np.mean(lp[np.arange(6), y])
    assert dc.weighted_nll(lp, y, 1.0) == unweighted


def test_weighted_nll_balances_classes():
    y = np.array([1] + [0] * 9)
    lp = np.full((10, 2), math.log(0.5))
    w = 9 / 1
    total = dc.weighted_nll(lp, y, w) * 10
    pos = w * math.log(2)
    neg = 9 * math.log(2)
    assert pos == pytest.approx(neg)
    assert total == pytest.approx(pos + neg)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1)), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_weighted_nll_unit_weight_is_plain_nll(rows):
    logits = np.array([[a, b] for a, b, _ in rows])
    y = np.array([c for _, _, c in rows])
    lp = dc.log_softmax2(logits)
    assert dc.weighted_nll(lp, y, 1.0) == float(np.mean(-lp[np.arange(len(y)), y]))


def test_weighted_nll_gradcheck():
    rng = np.random.default_rng(14)
    z = dc.Param("z", rng.normal(size=(7, 2)))
    y = rng.integers(0, 2, size=7)

    def closure():
        lp = dc.log_softmax2(z.value)
        g = dc.weighted_nll_backward(lp, y, 2.5)
        z.accumulate(dc.log_softmax2_backward(g, lp))
        return dc.weighted_nll(lp, y, 2.5)

    assert dc.grad_check(closure, [z]).passed


def test_mse_examples_and_loop():
    assert dc.mse([1, 2], [1, 2]) == 0.0
    assert dc.mse([1], [3]) == 4.0
    with pytest.raises(EvaluationError):
        dc.mse([], [])
    rng = np.random.default_rng(15)
    a, b = rng.normal(size=40), rng.normal(size=40)
    ref = 0.0
    for u, v in zip(a, b):
        ref += (u - v) ** 2
    assert abs(dc.mse(a, b) - ref / 40) < 1e-12


def test_mse_gradcheck():
    rng = np.random.default_rng(16)
    p = dc.Param("p", rng.normal(size=9))
    t = rng.normal(size=9)

    def closure():
        p.accumulate(dc.mse_backward(p.value, t))
        return dc.mse(p.value, t)

    assert dc.grad_check(closure, [p]).passed


# ---------------------------------------------------------------- conv / pool / activation grads

def test_conv_pool_activation_gradcheck():
    rng = np.random.default_rng(17)
    x = dc.Param("x", rng.normal(size=(2, 3, 13)))
    w = dc.Param("w", rng.normal(size=(4, 3, 3)))
    b = dc.Param("b", rng.normal(size=4))
    k = dc.Param("k", rng.normal(size=5))
    k2 = dc.Param("k2", rng.normal(size=2))

    def closure():
        c = dc.conv1d_channels(x.value, w.value, b.value)          # 2,4,11
        s = dc.conv1d_same_centered(c, k.value)                   # 2,4,11
        v = dc.conv1d_valid(s, k2.value, 0.3)                     # 2,4,10
        r = dc.relu(v)
        pooled, idx = dc.maxpool(r, 3)                            # 2,4,3
        sg = dc.sigmoid(pooled)
        loss = float(np.sum(sg * np.arange(sg.size).reshape(sg.shape)))
        g = np.arange(sg.size, dtype=float).reshape(sg.shape)
        g = dc.sigmoid_backward(g, sg)
        g = dc.maxpool_backward(g, idx, r.shape[-1])
        g = dc.relu_backward(g, v)
        gs, gk2, _ = dc.conv1d_valid_backward(g, s, k2.value)
        k2.accumulate(gk2)
        gc, gk = dc.conv1d_same_centered_backward(gs, c, k.value)
        k.accumulate(gk)
        gx, gw, gb = dc.conv1d_channels_backward(gc, x.value, w.value)
        x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(gb)
        return loss

    rep = dc.grad_check(closure, [x, w, b, k, k2], max_entries=200)
    assert rep.passed, rep


# ---------------------------------------------------------------- sgd

def test_sgd_step_examples():
    cfg = dc.SgdConfig(learning_rate=0.01, decay_per_epoch=0.95)
    p = dc.Param("p", np.array([1.0]))
    p.grad = np.array([1.0])
    dc.sgd_step([p], 0, cfg)
    assert p.value[0] == 0.99
    assert p.grad is None
    assert cfg.rate_at(2) == pytest.approx(0.009025, rel=1e-15)


def test_sgd_zero_grad_is_identity():
    rng = np.random.default_rng(18)
    v = rng.normal(size=10)
    p = dc.Param("p", v.copy())
    p.zero_grad()
    dc.sgd_step([p], 3, dc.SgdConfig())
    np.testing.assert_array_equal(p.value, v)


def test_sgd_missing_grad_names_param():
    with pytest.raises(TrainingError, match="lonely"):
        dc.sgd_step([dc.Param("lonely", np.zeros(2))], 0, dc.SgdConfig())


# ---------------------------------------------------------------- grad check

def test_grad_check_quadratic():
    p = dc.Param("p", np.array([0.7]))

    def closure():
        p.accumulate(2 * (p.value - 3.0))
        return float((p.value[0] - 3.0) ** 2)

    rep = dc.grad_check(closure, [p], rel_tol=1e-8)
    assert rep.passed and rep.max_rel_error < 1e-8


def test_grad_check_detects_wrong_gradient():
    p = dc.Param("p", np.array([1.0, 2.0]))

    def closure():
        p.accumulate(p.value)  # true gradient is 2 * p
        return float(np.sum(p.value ** 2))

    assert not dc.grad_check(closure, [p]).passed


def test_grad_check_rejects_nondeterministic_closure():
    p = dc.Param("p", np.array([1.0]))
    rng = np.random.default_rng(0)

    def closure():
        p.accumulate(np.zeros(1))
        return float(rng.normal())

    with pytest.raises(CheckError):
        dc.grad_check(closure, [p])
