import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aupipe.core import INVALID, N_AUS, au_index
from aupipe.errors import ConfigError, ShapeError
from aupipe.losses import (
    AU_LOSS_WEIGHTS,
    Components,
    LossConfig,
    Reduction,
    bce_loss,
    multi_label_loss,
    sigmoid,
    smooth_labels,
    total_loss,
)

# reference values evaluated with mpmath at 50 digits
SIGMOID_2 = 0.880797077977882
LN2 = 0.693147180559945
TWELVE_LN2 = 8.31776616671934
SIX_SOFTPLUS_NEG2 = 0.761568066257835  # 6 * log(1 + e^-2)

UNIT = LossConfig(weights=(1.0,) * N_AUS)
LOSSES = (bce_loss, multi_label_loss, total_loss)


def one_hot_row(k, x, y):
    xs = np.zeros((1, N_AUS))
    ys = np.zeros((1, N_AUS))
    m = np.zeros((1, N_AUS), dtype=bool)
    xs[0, k], ys[0, k], m[0, k] = x, y, True
    return xs, ys, m


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-800.0) == 0.0
    assert sigmoid(800.0) == 1.0
    assert sigmoid(2.0) == pytest.approx(SIGMOID_2, abs=1e-12)
    xs = np.linspace(-1000, 1000, 2001)
    assert np.all(np.diff(sigmoid(xs)) >= 0)


def test_bce_scalar_examples():
    x, y, m = one_hot_row(0, 0.0, 1.0)
    out = bce_loss(x, y, m, UNIT)
    assert out.value == pytest.approx(LN2, abs=1e-12)
    assert out.grad_x[0, 0] == -0.5
    k = au_index("AU15")
    assert AU_LOSS_WEIGHTS[k] == 6.0
    x, y, m = one_hot_row(k, 2.0, 1.0)
    out = bce_loss(x, y, m, LossConfig())
    assert out.value == pytest.approx(SIX_SOFTPLUS_NEG2, abs=1e-12)


def test_mll_examples():
    x = np.zeros((1, N_AUS))
    y = np.ones((1, N_AUS))
    assert multi_label_loss(x, y, None, LossConfig()).value == pytest.approx(TWELVE_LN2, abs=1e-12)
    mask = np.zeros((1, N_AUS), dtype=bool)
    mask[0, :6] = True
    assert multi_label_loss(x, y, mask, LossConfig()).value == pytest.approx(6 * LN2, abs=1e-12)


def test_mll_weight_scales_value():
    x = np.zeros((2, N_AUS))
    y = np.ones((2, N_AUS))
    a = multi_label_loss(x, y, None, LossConfig()).value
    b = multi_label_loss(x, y, None, LossConfig(mll_weight=3.0)).value
    assert b == pytest.approx(3 * a, rel=1e-15)


def test_reduction_sum_vs_mean(rng):
    x = rng.normal(size=(7, N_AUS))
    y = rng.integers(0, 2, size=(7, N_AUS)).astype(float)
    mean = bce_loss(x, y, None, LossConfig())
    total = bce_loss(x, y, None, LossConfig(batch_reduction=Reduction.SUM))
    assert total.value == pytest.approx(7 * mean.value, rel=1e-14)
    np.testing.assert_allclose(total.grad_x, 7 * mean.grad_x, rtol=1e-14)


def test_total_selectors_and_additivity(rng):
    x = rng.normal(size=(5, N_AUS)) * 3
    y = rng.integers(0, 2, size=(5, N_AUS)).astype(float)
    mask = rng.random((5, N_AUS)) > 0.2
    cfg = LossConfig()
    b, m = bce_loss(x, y, mask, cfg), multi_label_loss(x, y, mask, cfg)
    t = total_loss(x, y, mask, cfg)
    assert t.value == pytest.approx(b.value + m.value, abs=1e-12)
    np.testing.assert_allclose(t.grad_x, b.grad_x + m.grad_x, atol=1e-12, rtol=0)
    only = total_loss(x, y, mask, LossConfig(components=Components.BCE_ONLY))
    assert only.value == b.value
    np.testing.assert_array_equal(only.grad_x, b.grad_x)
    only = total_loss(x, y, mask, LossConfig(components=Components.MLL_ONLY))
    assert only.value == m.value


def test_errors():
    with pytest.raises(ShapeError):
        bce_loss(np.zeros((2, N_AUS)), np.zeros((3, N_AUS)), None, LossConfig())
    with pytest.raises(ValueError):
        bce_loss(np.zeros((1, N_AUS)), np.full((1, N_AUS), 1.5), None, LossConfig())
    with pytest.raises(ValueError):
        LossConfig(weights=(1.0,) * 11)
    with pytest.raises(ValueError):
        LossConfig(weights=(0.0,) + (1.0,) * 11)


def test_invalid_targets_allowed_under_mask():
    y = np.zeros((1, N_AUS))
    y[0, 3] = INVALID
    mask = y != INVALID
    out = bce_loss(np.zeros((1, N_AUS)), y, mask, LossConfig())
    assert out.grad_x[0, 3] == 0.0 and out.per_element[0, 3] == 0.0


def test_smooth_labels():
    y = np.array([[1.0, 0.0, INVALID]])
    once = smooth_labels(y, 0.1)
    np.testing.assert_allclose(once, [[0.95, 0.05, INVALID]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(smooth_labels(y, 0.0), y)
    with pytest.raises(ValueError, match="already_smoothed"):
        smooth_labels(once, 0.1)
    twice = smooth_labels(once, 0.1, already_smoothed=True)
    np.testing.assert_allclose(twice, [[0.905, 0.095, INVALID]], rtol=0, atol=1e-15)
    for eps in (-0.1, 0.5, 0.7):
        with pytest.raises(ConfigError):
            smooth_labels(y, eps)


def test_effective_eps():
    assert LossConfig().effective_eps == 0.0
    assert LossConfig(label_smoothing=True).effective_eps == 0.1


# -- gradient oracle -------------------------------------------------------------


def random_case(rng, batch):
    x = rng.uniform(-10, 10, size=(batch, N_AUS))
    y = rng.integers(0, 2, size=(batch, N_AUS)).astype(float)
    if rng.random() < 0.5:
        y = smooth_labels(y, rng.choice([0.05, 0.1, 0.2]))
    mask = rng.random((batch, N_AUS)) > 0.25
    return x, y, mask


def fd_max_rel_error(loss, x, y, mask, cfg, h=1e-6):
    """Central differences on each element's own loss term.

    Every logit affects exactly one term of the sum, so differencing that term
    avoids the cancellation noise of differencing the whole batch total.
    The error is relative for gradients above 1 and absolute below: near a
    stationary point the difference quotient carries ~1e-11 of rounding
    noise, which no relative bound can absorb.
    """
    out = loss(x, y, mask, cfg)
    factor = 1.0 / x.shape[0] if Reduction(cfg.batch_reduction) is Reduction.MEAN else 1.0
    xp, xm = x + h, x - h
    # perturbing every entry at once is fine: terms are elementwise
    num = (loss(xp, y, mask, cfg).per_element - loss(xm, y, mask, cfg).per_element) * factor / (2 * h)
    ana = out.grad_x
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
    return float((np.abs(ana - num) / denom).max())


def gradient_oracle_max_error(n_cases=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, y, mask = random_case(rng, int(rng.integers(1, 9)))
        cfg = LossConfig(batch_reduction=(Reduction.MEAN, Reduction.SUM)[rng.integers(2)])
        for loss in LOSSES:
            worst = max(worst, fd_max_rel_error(loss, x, y, mask, cfg))
    return worst


def test_gradient_oracle():
    assert gradient_oracle_max_error() < 1e-6


def test_value_is_reduced_sum_of_elements(rng):
    x, y, mask = random_case(rng, 6)
    for loss in LOSSES:
        out = loss(x, y, mask, LossConfig())
        assert out.value == pytest.approx(out.per_element.sum() / 6, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=N_AUS, max_size=N_AUS), st.lists(st.sampled_from([0.0, 0.05, 0.95, 1.0]), min_size=N_AUS, max_size=N_AUS))
def test_stability(xs, ys):
    x, y = np.array([xs]), np.array([ys])
    for loss in LOSSES:
        out = loss(x, y, None, LossConfig())
        assert np.isfinite(out.value) and out.value >= 0
        assert np.all(np.isfinite(out.grad_x))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, N_AUS - 1))
def test_masking_removes_one_element(seed, k):
    rng = np.random.default_rng(seed)
    x, y, _ = random_case(rng, 3)
    mask = np.ones_like(x, dtype=bool)
    off = mask.copy()
    off[1, k] = False
    for loss in LOSSES:
        full, cut = loss(x, y, mask, LossConfig()), loss(x, y, off, LossConfig())
        assert cut.grad_x[1, k] == 0.0 and cut.per_element[1, k] == 0.0
        keep = off.copy()
        np.testing.assert_array_equal(cut.grad_x[keep], full.grad_x[keep])
        assert cut.value == pytest.approx(full.value - full.per_element[1, k] / 3, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_weight_linearity(seed, c):
    # powers of two keep the scaling exact in binary floating point
    rng = np.random.default_rng(seed)
    x, y, mask = random_case(rng, 4)
    base = bce_loss(x, y, mask, LossConfig())
    scaled = bce_loss(x, y, mask, LossConfig(weights=tuple(c * w for w in AU_LOSS_WEIGHTS)))
    assert scaled.value == c * base.value
    np.testing.assert_array_equal(scaled.grad_x, c * base.grad_x)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unit_weight_coincidence(seed):
    rng = np.random.default_rng(seed)
    x, y, mask = random_case(rng, int(rng.integers(1, 9)))
    b, m = bce_loss(x, y, mask, UNIT), multi_label_loss(x, y, mask, UNIT)
    assert b.value == m.value
    np.testing.assert_array_equal(b.grad_x, m.grad_x)
    assert total_loss(x, y, mask, UNIT).value == pytest.approx(2 * b.value, abs=1e-12)
