import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affex import metrics as M
from affex import nn
from affex.errors import ContractError, RangeError, ValidationError


def brute_ccc(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    sx = sum((a - mx) ** 2 for a in x) / n
    sy = sum((b - my) ** 2 for b in y) / n
    return 2 * sxy / (sx + sy + (mx - my) ** 2)


# -- cross-entropy


def test_cross_entropy_examples():
    assert M.cross_entropy(M.one_hot(2), M.one_hot(2)) == 0.0
    assert M.cross_entropy(M.one_hot(0), np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-12)
    p = np.full(7, (1 - 1e-15) / 6)
    p[3] = 1e-15
    loss = M.cross_entropy(M.one_hot(3), p)
    assert np.isfinite(loss) and loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_batch_and_errors():
    y = M.one_hot([0, 1])
    np.testing.assert_allclose(M.cross_entropy(y, np.full((2, 7), 1 / 7)), [math.log(7)] * 2)
    with pytest.raises(ContractError):
        M.cross_entropy(np.full(7, 1 / 7), np.full(7, 1 / 7))
    with pytest.raises(ContractError):
        M.cross_entropy(M.one_hot(0), np.full(6, 1 / 6))


def test_cross_entropy_logit_gradient(rng):
    p = {"z": rng.standard_normal(7)}
    y = M.one_hot(4)

    def frag():
        probs = nn.softmax(p["z"])
        return float(M.cross_entropy(y, probs)), {"z": probs - y}

    assert nn.grad_check(frag, p) < 1e-6


# -- CCC


def test_ccc_examples():
    assert M.ccc([1, 2, 3], [1, 2, 3]) == 1.0
    assert M.ccc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert M.ccc([1, 2, 3], [2, 2, 2]) == 0.0
    assert M.ccc([2, 2], [2, 2]) == 1.0


def test_ccc_errors():
    with pytest.raises(ContractError):
        M.ccc([1.0], [1.0])
    with pytest.raises(ContractError):
        M.ccc([1, 2, 3], [1, 2])


def test_ccc_brute_force_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        x = rng.standard_normal(n) * rng.uniform(0.1, 3)
        y = 0.5 * x + rng.standard_normal(n) + rng.uniform(-1, 1)
        assert abs(M.ccc(x, y) - brute_ccc(list(x), list(y))) < 1e-12


@settings(max_examples=200)
@given(
    seed=st.integers(0, 2**31),
    a=st.floats(0.01, 100),
    b=st.floats(-100, 100),
)
def test_ccc_affine_invariance_and_symmetry(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(20), rng.standard_normal(20)
    c = M.ccc(x, y)
    assert abs(M.ccc(a * x + b, a * y + b) - c) < 1e-9
    assert M.ccc(y, x) == pytest.approx(c, abs=1e-15)
    assert abs(c) <= 1.0
    assert M.ccc(x, x) == pytest.approx(1.0, abs=1e-15)


def test_ccc_loss_examples(rng):
    t = rng.standard_normal(8)
    loss, grad = M.ccc_loss(t, t)
    assert loss == pytest.approx(0.0, abs=1e-15)
    loss, _ = M.ccc_loss(np.full(8, 0.3), t)
    assert loss == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        M.ccc_loss([0.1], [0.2])


def test_ccc_loss_gradient(rng):
    for _ in range(50):
        t = rng.uniform(-1, 1, 8)
        p = {"x": rng.uniform(-1, 1, 8)}

        def frag():
            loss, g = M.ccc_loss(p["x"], t)
            return loss, {"x": g}

        assert nn.grad_check(frag, p) < 1e-6


# -- MSE


def test_mse_examples(rng):
    t = rng.uniform(-1, 1, 5)
    assert M.mse_loss(t, t)[0] == 0.0
    loss, grad = M.mse_loss(t + 0.1, t)
    assert loss == pytest.approx(0.05, abs=1e-15)
    np.testing.assert_allclose(grad, 0.2)
    with pytest.raises(ContractError):
        M.mse_loss(np.zeros(4), np.zeros(4))


def test_mse_batch_gradient(rng):
    t = rng.uniform(-1, 1, (6, 5))
    p = {"x": rng.uniform(-1, 1, (6, 5))}

    def frag():
        loss, g = M.mse_loss(p["x"], t)
        return loss, {"x": g}

    assert nn.grad_check(frag, p) < 1e-6
    per_row = [M.mse_loss(p["x"][i], t[i])[0] for i in range(6)]
    assert M.mse_loss(p["x"], t)[0] == pytest.approx(np.mean(per_row), abs=1e-15)


def test_derive_mse_target():
    np.testing.assert_array_equal(M.derive_mse_target(0.5, -0.5), [0.5, -0.5, 0.0, 0.5, -0.5])
    np.testing.assert_array_equal(M.derive_mse_target(1.0, 1.0), [1.0, 1.0, 1.0, 0.0, 0.0])
    with pytest.raises(RangeError):
        M.derive_mse_target(1.2, 0.0)


@settings(max_examples=200)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_derive_mse_target_range(a, v):
    t = M.derive_mse_target(a, v)
    assert np.all(np.abs(t) <= 1.0)
    assert t[0] == a and t[1] == v


# -- weighted total


def test_total_loss():
    assert M.total_loss(1, 0.5, 0.5, 0.25) == pytest.approx(1.45, abs=1e-15)
    assert M.total_loss(0, 0, 0, 0) == 0.0
    w = M.LossWeights(1.0, 0.0, 0.0, 0.0)
    assert M.total_loss(0.7, 3, 4, 5, weights=w) == 0.7
    assert M.total_loss(0.7, 3, 4, 5, multitask=False) == 0.7


def test_total_loss_linear(rng):
    w = M.LossWeights(*rng.uniform(0.1, 2, 4))
    base = rng.uniform(0, 2, 4)
    f0 = M.total_loss(*base, weights=w)
    for i, wi in enumerate((w.w1, w.w2, w.w3, w.w4)):
        bumped = base.copy()
        bumped[i] += 1.0
        assert M.total_loss(*bumped, weights=w) - f0 == pytest.approx(wi, abs=1e-12)


def test_loss_weights_parse():
    assert M.LossWeights.parse("1,0.4,0.4,0.2") == M.LossWeights()
    assert M.LossWeights.parse(str(M.LossWeights(2, 0, 1, 0))) == M.LossWeights(2, 0, 1, 0)
    with pytest.raises(ValidationError):
        M.LossWeights.parse("1,2")
    with pytest.raises(ContractError):
        M.LossWeights(0, 0, 0, 0)
    with pytest.raises(ContractError):
        M.LossWeights(-1, 0, 0, 1)


# -- challenge metrics


def test_classification_examples():
    acc, f1, _ = M.classification_metrics([0, 0, 3, 3], [0, 0, 3, 3])
    assert acc == 1.0 and f1 == pytest.approx(2 / 7, abs=1e-15)
    acc, _, conf = M.classification_metrics([0] * 4, [0, 0, 4, 4])
    assert acc == 0.5 and conf[4, 0] == 2
    with pytest.raises(ContractError):
        M.classification_metrics([7], [0])
    with pytest.raises(ContractError):
        M.classification_metrics([], [])


def test_classification_oracle(rng):
    for _ in range(20):
        pred = rng.integers(0, 7, 200)
        true = rng.integers(0, 7, 200)
        conf = [[0] * 7 for _ in range(7)]
        for p, t in zip(pred, true):
            conf[t][p] += 1
        f1s = []
        for c in range(7):
            tp = conf[c][c]
            fp = sum(conf[r][c] for r in range(7)) - tp
            fn = sum(conf[c]) - tp
            f1s.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        acc, f1, got = M.classification_metrics(pred, true)
        assert got.tolist() == conf
        assert acc == pytest.approx(sum(conf[c][c] for c in range(7)) / 200, abs=1e-15)
        assert f1 == pytest.approx(sum(f1s) / 7, abs=1e-15)


def test_score_formulas():
    assert M.expression_score(1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert M.expression_score(0.493, 0.512) == pytest.approx(0.5057, abs=1e-4)
    assert M.expression_score(1.0, 0.0) == pytest.approx(0.33, abs=1e-15)
    assert M.va_score(0.564, 0.504) == 0.534
    assert M.va_score(0.14, 0.24) == 0.19
    assert M.va_score(1.0, -1.0) == 0.0


def test_report_consistency_and_text(rng):
    true = rng.integers(0, 7, 50)
    pred = np.where(rng.random(50) < 0.6, true, rng.integers(0, 7, 50))
    tva = rng.uniform(-1, 1, (50, 2))
    pva = np.clip(tva + 0.2 * rng.standard_normal((50, 2)), -1, 1)
    rep = M.MetricsReport.build(pred, true, pva, tva)
    assert rep.num_frames == 50 and rep.has_expression and rep.has_va
    assert abs(rep.expression_score - (0.67 * rep.macro_f1 + 0.33 * rep.accuracy)) < 1e-12
    assert abs(rep.va_score - (rep.ccc_arousal + rep.ccc_valence) / 2) < 1e-12
    back = M.MetricsReport.from_text(rep.to_text())
    assert back.expression_score == rep.expression_score and back.va_score == rep.va_score
    np.testing.assert_array_equal(back.confusion, rep.confusion)


def test_report_expression_only(rng):
    rep = M.MetricsReport.build([1, 2], [1, 1])
    assert not rep.has_va and rep.ccc_arousal is None
    back = M.MetricsReport.from_text(rep.to_text())
    assert back.va_score is None and back.accuracy == 0.5
