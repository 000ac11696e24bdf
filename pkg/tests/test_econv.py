import numpy as np
import pytest

from evcnn.activations import PiecewiseLinear
from evcnn.econv import ConvKernel, EventConv2D, LayerDelta, dense_conv
from evcnn.errors import CoordinateOutOfBounds, DimensionMismatch, StaleState
from reference import apply_activation, naive_conv2d

IDENT = PiecewiseLinear("identity")
RELU = PiecewiseLinear("relu")


def blank(shape):
    return np.zeros(shape, dtype=np.float64)


def delta_for(values, rates, changed=None, leak=0.0):
    h, w, _ = values.shape
    mask = np.zeros((h, w), dtype=bool)
    if changed:
        for y, x in changed:
            mask[y, x] = True
    return LayerDelta(changed_mask=mask, delta_leak=leak, values=values, rates=rates)


def single_kernel(w, bias=0.0, stride=1, padding="same_zero"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        w = w[None, None]
    return ConvKernel(w, np.array([bias]), stride=stride, padding=padding)


# --- init ----------------------------------------------------------------

def test_init_blank_positive_bias():
    layer = EventConv2D(single_kernel(np.ones((3, 3)), bias=0.5), RELU, (6, 6, 1))
    layer.init_state(blank((6, 6, 1)), blank((6, 6, 1)))
    assert np.all(layer.preact == 0.5)
    assert np.all(layer.slopes == 1.0)
    assert np.all(layer.values() == 0.5)


def test_init_blank_negative_bias():
    layer = EventConv2D(single_kernel(np.ones((3, 3)), bias=-0.5), RELU, (6, 6, 1))
    layer.init_state(blank((6, 6, 1)), blank((6, 6, 1)))
    assert np.all(layer.preact == -0.5)
    assert np.all(layer.slopes == 0.0)
    assert np.all(layer.values() == 0.0)


def test_init_blank_rates_zero():
    layer = EventConv2D(single_kernel(np.ones((3, 3)), bias=1.0), RELU, (6, 6, 1))
    layer.init_state(blank((6, 6, 1)), blank((6, 6, 1)))
    assert np.all(layer.preact_rate == 0.0)


def test_init_shape_checked():
    layer = EventConv2D(single_kernel(np.ones((3, 3))), RELU, (6, 6, 1))
    with pytest.raises(DimensionMismatch):
        layer.init_state(blank((5, 6, 1)), blank((5, 6, 1)))


# --- dense_conv against the loop-nest oracle ------------------------------

@pytest.mark.parametrize("padding", ["same_zero", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_dense_conv_matches_naive(padding, stride, k):
    rng = np.random.default_rng(k * 10 + stride)
    values = rng.normal(size=(9, 11, 3))
    weights = rng.normal(size=(4, 3, k, k))
    bias = rng.normal(size=4)
    got = dense_conv(values, ConvKernel(weights, bias, stride, padding))
    want = naive_conv2d(values, weights, bias, stride, padding)
    np.testing.assert_allclose(got, want, atol=1e-12)


# --- refresh of the decay-rate map ----------------------------------------

def test_refresh_rates_all_zero():
    layer = EventConv2D(single_kernel(np.ones((3, 3))), IDENT, (5, 5, 1))
    layer.init_state(blank((5, 5, 1)), blank((5, 5, 1)))
    layer.refresh_rates([(2, 2)], blank((5, 5, 1)))
    assert layer.preact_rate[2, 2, 0] == 0.0


def test_refresh_rates_interior_sum():
    layer = EventConv2D(single_kernel(np.ones((3, 3))), IDENT, (5, 5, 1))
    layer.init_state(blank((5, 5, 1)), blank((5, 5, 1)))
    layer.refresh_rates([(2, 2)], np.ones((5, 5, 1)))
    assert layer.preact_rate[2, 2, 0] == 9.0


def test_refresh_rates_corner_padded():
    layer = EventConv2D(single_kernel(np.ones((3, 3))), IDENT, (5, 5, 1))
    layer.init_state(blank((5, 5, 1)), blank((5, 5, 1)))
    layer.refresh_rates([(0, 0)], np.ones((5, 5, 1)))
    assert layer.preact_rate[0, 0, 0] == 4.0  # padded positions contribute 0


def test_refresh_rates_out_of_bounds():
    layer = EventConv2D(single_kernel(np.ones((3, 3))), IDENT, (5, 5, 1))
    layer.init_state(blank((5, 5, 1)), blank((5, 5, 1)))
    with pytest.raises(CoordinateOutOfBounds):
        layer.refresh_rates([(5, 0)], np.ones((5, 5, 1)))


# --- incremental step hand cases ------------------------------------------

def test_leak_scales_through_kernel():
    # 1x1 kernel of weight 2, identity: a decay of 0.5 upstream at rate 1
    # moves the output down by 0.5 * (1 * 2) = 1.0
    layer = EventConv2D(single_kernel([[2.0]]), IDENT, (3, 3, 1))
    values = np.full((3, 3, 1), 1.0)
    rates = np.zeros((3, 3, 1))
    rates[1, 1, 0] = 1.0
    layer.init_state(values, rates)
    before = layer.values()[1, 1, 0]
    out = layer.apply(delta_for(values - 0.0, rates, leak=0.5))
    assert before - layer.values()[1, 1, 0] == pytest.approx(1.0)
    assert out.delta_leak == 0.5


def test_segment_flip_under_pure_leak_is_reported():
    layer = EventConv2D(single_kernel([[1.0]], bias=0.0), RELU, (2, 2, 1))
    values = np.full((2, 2, 1), 0.3)
    rates = np.full((2, 2, 1), 1.0)
    layer.init_state(values, rates)
    assert layer.preact[0, 0, 0] == pytest.approx(0.3)
    out = layer.apply(delta_for(values, rates, leak=0.5))
    assert layer.preact[0, 0, 0] == pytest.approx(-0.2)
    assert layer.slopes[0, 0, 0] == 0.0
    assert layer.values()[0, 0, 0] == 0.0
    assert (0, 0) in {(y, x) for x, y in out.changed_coords} or out.changed_mask[0, 0]


def test_noop_step_changes_nothing():
    rng = np.random.default_rng(0)
    layer = EventConv2D(
        ConvKernel(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)), RELU, (4, 4, 1)
    )
    values = rng.uniform(0, 1, size=(4, 4, 1))
    rates = rng.uniform(-1, 1, size=(4, 4, 1))
    layer.init_state(values, rates)
    pre, sl, ra = layer.preact.copy(), layer.slopes.copy(), layer.preact_rate.copy()
    out = layer.apply(delta_for(values, rates, leak=0.0))
    assert not out.changed_mask.any()
    assert np.array_equal(layer.preact, pre)
    assert np.array_equal(layer.slopes, sl)
    assert np.array_equal(layer.preact_rate, ra)


def test_leak_linearity_dyadic_exact():
    # dyadic values: two steps of 0.25 and 0.5 equal one step of 0.75 bit-for-bit
    layer_a = EventConv2D(single_kernel([[2.0]], bias=0.25), IDENT, (2, 2, 1))
    layer_b = EventConv2D(single_kernel([[2.0]], bias=0.25), IDENT, (2, 2, 1))
    values = np.full((2, 2, 1), 4.0)
    rates = np.full((2, 2, 1), 1.0)
    for layer in (layer_a, layer_b):
        layer.init_state(values, rates)
    layer_a.apply(delta_for(values, rates, leak=0.25))
    layer_a.apply(delta_for(values, rates, leak=0.5))
    layer_b.apply(delta_for(values, rates, leak=0.75))
    assert np.array_equal(layer_a.preact, layer_b.preact)
    assert np.array_equal(layer_a.slopes, layer_b.slopes)


def test_leak_split_detects_intermediate_flip():
    # value crosses the breakpoint during the first of two sub-steps
    layer = EventConv2D(single_kernel([[1.0]]), RELU, (1, 1, 1))
    values = np.full((1, 1, 1), 0.3)
    rates = np.full((1, 1, 1), 1.0)
    layer.init_state(values, rates)
    out1 = layer.apply(delta_for(values, rates, leak=0.5))
    assert out1.changed_mask[0, 0]  # flip reported on the step that crossed
    out2 = layer.apply(delta_for(values, rates, leak=0.25))
    assert not out2.changed_mask[0, 0]  # already on the flat segment, no new flip


def test_bias_cancels_from_increment():
    # perturbing the bias shifts re-initialized state but leak steps move
    # both variants identically
    rng = np.random.default_rng(1)
    values = rng.uniform(0, 1, size=(5, 5, 1))
    rates = rng.uniform(-0.5, 0.5, size=(5, 5, 1))
    kernel_weights = rng.normal(size=(3, 3))
    deltas = []
    for bias in (0.0, 0.37):
        layer = EventConv2D(single_kernel(kernel_weights, bias=bias), IDENT, (5, 5, 1))
        layer.init_state(values, rates)
        start = layer.preact.copy()
        layer.apply(delta_for(values, rates, leak=0.125))
        deltas.append(layer.preact - start)
    np.testing.assert_allclose(deltas[0], deltas[1], atol=1e-14)


def test_stale_delta_rejected():
    layer = EventConv2D(single_kernel([[1.0]]), IDENT, (3, 3, 1))
    layer.init_state(blank((3, 3, 1)), blank((3, 3, 1)))
    with pytest.raises(StaleState):
        layer.apply(delta_for(blank((4, 4, 1)), blank((4, 4, 1))))


# --- single-layer oracle equivalence --------------------------------------

@pytest.mark.parametrize("kind", ["identity", "relu", "leaky_relu"])
@pytest.mark.parametrize("k,stride,padding", [(3, 1, "same_zero"), (1, 1, "valid"), (5, 2, "same_zero"), (3, 2, "valid")])
def test_incremental_tracks_dense_through_random_steps(kind, k, stride, padding):
    """Feed a layer a random sequence of upstream leak/recompute steps and
    compare against a dense recompute of the current upstream map."""
    rng = np.random.default_rng(hash((kind, k, stride)) % 2**32)
    act = PiecewiseLinear(kind, 0.1)
    h = w = 8
    weights = rng.normal(size=(3, 2, k, k)) * 0.4
    bias = rng.normal(size=3) * 0.2
    kernel = ConvKernel(weights, bias, stride, padding)
    layer = EventConv2D(kernel, act, (h, w, 2))

    # upstream simulation: values decay at per-unit rates, occasionally
    # a pixel is "hit" (value jumps) and reported as changed
    up_values = rng.uniform(0, 1, size=(h, w, 2))
    up_rates = rng.uniform(-0.5, 0.5, size=(h, w, 2))
    layer.init_state(up_values, up_rates)
    for step in range(25):
        leak = float(rng.uniform(0, 0.1))
        changed = np.zeros((h, w), dtype=bool)
        up_values = up_values - leak * up_rates
        n_hits = int(rng.integers(0, 4))
        for _ in range(n_hits):
            y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
            up_values[y, x] = rng.uniform(-1, 1, size=2)
            up_rates[y, x] = rng.uniform(-0.5, 0.5, size=2)
            changed[y, x] = True
        layer.apply(LayerDelta(changed, leak, up_values, up_rates))
        want = apply_activation(kind, naive_conv2d(up_values, weights, bias, stride, padding))
        np.testing.assert_allclose(layer.values(), want, atol=1e-9)
