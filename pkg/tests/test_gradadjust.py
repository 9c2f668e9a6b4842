import numpy as np
import pytest

from conftest import EXACT
from lorapro.errors import DescentViolationError, ShapeError
from lorapro.gradadjust import (
    DampingPolicy,
    GradBundle,
    adjust,
    choose_x,
    equivalent_gradient,
    lora_raw_grads,
    loss_decrease_certificate,
    validate_bundle,
)
from lorapro.linalg import frob_norm, numerical_rank
from lorapro.lora import LoraLayer


def test_raw_grads_hand_values(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    assert np.allclose(bundle.g_a_lora, [[1.0, 2.0]])
    assert np.allclose(bundle.g_b_lora, [[1.0], [3.0]])
    validate_bundle(layer, bundle)


def test_raw_grads_zero_gradient(unit_instance):
    layer, _ = unit_instance
    bundle = lora_raw_grads(layer, np.zeros((2, 2)))
    assert not bundle.g_a_lora.any() and not bundle.g_b_lora.any()


def test_raw_grads_zero_b_annihilates_left_factor(unit_instance):
    layer, g = unit_instance
    zeroed = LoraLayer(w0=layer.w0, b=np.zeros_like(layer.b), a=layer.a,
                       alpha=layer.alpha, rank=layer.rank, scaling_mode=layer.scaling_mode)
    bundle = lora_raw_grads(zeroed, g)
    assert not bundle.g_a_lora.any()
    assert bundle.g_b_lora.any()


def test_equivalent_gradient_hand_value(unit_instance):
    layer, _ = unit_instance
    g_tilde = equivalent_gradient(layer, np.array([[1.0, 2.0]]), np.array([[0.0], [3.0]]))
    assert np.allclose(g_tilde, [[1.0, 2.0], [3.0, 0.0]])
    assert np.array_equal(
        equivalent_gradient(layer, np.zeros((1, 2)), np.zeros((2, 1))), np.zeros((2, 2))
    )


def test_equivalent_gradient_full_rank_limit_recovers_g():
    rng = np.random.default_rng(20)
    for _ in range(10):
        m, n, r = 4, 6, 4  # square invertible left factor
        layer = LoraLayer(
            w0=np.zeros((m, n)),
            b=rng.normal(size=(m, r)) + np.eye(m),
            a=rng.normal(size=(r, n)),
            alpha=float(r),
            rank=r,
            scaling_mode="lora",
        )
        g = rng.normal(size=(m, n))
        adj = adjust(layer, lora_raw_grads(layer, g), strategy="zero", policy=EXACT)
        g_tilde = equivalent_gradient(layer, adj.g_a, adj.g_b)
        assert frob_norm(g_tilde - g) <= 1e-9 * max(1.0, frob_norm(g))


def test_choose_x_hand_values(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    assert np.array_equal(choose_x(layer, bundle, "zero", EXACT), [[0.0]])
    assert np.allclose(choose_x(layer, bundle, "sylvester", EXACT), [[-0.5]], atol=1e-12)
    assert np.allclose(choose_x(layer, bundle, "symmetry", EXACT), [[-0.5]], atol=1e-12)


def test_choose_x_zero_gradient_all_strategies(unit_instance):
    layer, _ = unit_instance
    bundle = lora_raw_grads(layer, np.zeros((2, 2)))
    for strategy in ("zero", "symmetry", "sylvester"):
        assert np.allclose(choose_x(layer, bundle, strategy, EXACT), 0.0, atol=1e-14)


def test_adjust_hand_values(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    at_zero = adjust(layer, bundle, strategy="zero", policy=EXACT)
    assert np.allclose(at_zero.g_a, [[1.0, 2.0]])
    assert np.allclose(at_zero.g_b, [[0.0], [3.0]])
    sylv = adjust(layer, bundle, strategy="sylvester", policy=EXACT)
    assert np.allclose(sylv.g_a, [[0.5, 2.0]], atol=1e-12)
    assert np.allclose(sylv.g_b, [[0.5], [3.0]], atol=1e-12)
    for adj in (at_zero, sylv):
        g_tilde = equivalent_gradient(layer, adj.g_a, adj.g_b)
        assert np.allclose(g_tilde, [[1.0, 2.0], [3.0, 0.0]], atol=1e-12)


def test_adjust_zero_gradient(unit_instance):
    layer, _ = unit_instance
    adj = adjust(layer, lora_raw_grads(layer, np.zeros((2, 2))), policy=EXACT)
    assert not adj.g_a.any() and not adj.g_b.any()


def test_adjust_x_override_keeps_equivalent_gradient(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    base = adjust(layer, bundle, strategy="zero", policy=EXACT)
    shifted = adjust(layer, bundle, policy=EXACT, x_override=np.array([[3.7]]))
    t0 = equivalent_gradient(layer, base.g_a, base.g_b)
    t1 = equivalent_gradient(layer, shifted.g_a, shifted.g_b)
    assert frob_norm(t0 - t1) <= 1e-12
    assert shifted.x_strategy == "override"


def test_scaling_enters_adjustment():
    # same factors, two scalings; the equivalent gradient must stay the
    # projection of g (which does not depend on s)
    rng = np.random.default_rng(21)
    b = rng.normal(size=(5, 2))
    a = rng.normal(size=(2, 4))
    g = rng.normal(size=(5, 4))
    tildes = []
    for alpha in (1.0, 6.0):
        layer = LoraLayer(w0=np.zeros((5, 4)), b=b, a=a, alpha=alpha, rank=2,
                          scaling_mode="lora")
        adj = adjust(layer, lora_raw_grads(layer, g), strategy="zero", policy=EXACT)
        tildes.append(equivalent_gradient(layer, adj.g_a, adj.g_b))
    assert frob_norm(tildes[0] - tildes[1]) <= 1e-9 * max(1.0, frob_norm(tildes[0]))


def test_certificate_hand_value(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    adjusted = adjust(layer, bundle, strategy="sylvester", policy=EXACT)
    dl = loss_decrease_certificate(layer, bundle, adjusted, lr=1.0, policy=EXACT)
    assert dl == pytest.approx(-14.0, abs=1e-12)
    # cross-check: equals -<g_tilde, g> on chain-rule-consistent bundles
    g_tilde = equivalent_gradient(layer, adjusted.g_a, adjusted.g_b)
    assert dl == pytest.approx(-float(np.sum(g_tilde * g)), abs=1e-9)


def test_certificate_trivial_cases(unit_instance):
    layer, g = unit_instance
    zero_bundle = lora_raw_grads(layer, np.zeros((2, 2)))
    adj = adjust(layer, zero_bundle, policy=EXACT)
    assert loss_decrease_certificate(layer, zero_bundle, adj, lr=1.0, policy=EXACT) == 0.0
    bundle = lora_raw_grads(layer, g)
    adj = adjust(layer, bundle, policy=EXACT)
    assert loss_decrease_certificate(layer, bundle, adj, lr=0.0, policy=EXACT) == 0.0


def test_certificate_rejects_tampered_gradients(unit_instance):
    layer, g = unit_instance
    bundle = lora_raw_grads(layer, g)
    adjusted = adjust(layer, bundle, strategy="sylvester", policy=EXACT)
    tampered = type(adjusted)(
        g_a=-adjusted.g_a, g_b=-adjusted.g_b, x=adjusted.x, x_strategy=adjusted.x_strategy
    )
    with pytest.raises(DescentViolationError):
        loss_decrease_certificate(layer, bundle, tampered, lr=1.0, policy=EXACT)


def test_damped_adjustment_handles_zero_b(unit_instance):
    layer, g = unit_instance
    zeroed = LoraLayer(w0=layer.w0, b=np.zeros_like(layer.b), a=layer.a,
                       alpha=layer.alpha, rank=layer.rank, scaling_mode=layer.scaling_mode)
    bundle = lora_raw_grads(zeroed, g)
    adj = adjust(zeroed, bundle, strategy="sylvester", policy=DampingPolicy())
    assert not adj.g_a.any()          # nothing to move while b is zero
    assert np.allclose(adj.x, 0.0)    # zero right-hand side forces a zero X
    assert np.all(np.isfinite(adj.g_b)) and adj.g_b.any()


def test_passthrough_returns_raw_gradients(unit_instance):
    layer, g = unit_instance
    zeroed = LoraLayer(w0=layer.w0, b=np.zeros_like(layer.b), a=layer.a,
                       alpha=layer.alpha, rank=layer.rank, scaling_mode=layer.scaling_mode)
    bundle = lora_raw_grads(zeroed, g)
    adj = adjust(zeroed, bundle, policy=DampingPolicy(fallback="passthrough"))
    assert np.array_equal(adj.g_a, bundle.g_a_lora)
    assert np.array_equal(adj.g_b, bundle.g_b_lora)
    assert adj.x_strategy == "passthrough"
    # once b has rank again, passthrough behaves like the damped path
    full = adjust(layer, lora_raw_grads(layer, g),
                  policy=DampingPolicy(fallback="passthrough"))
    assert full.x_strategy == "sylvester"


def test_validate_bundle_rejects_inconsistency(unit_instance):
    layer, g = unit_instance
    bad = GradBundle(g_a_lora=np.ones((1, 2)) * 5.0, g_b_lora=np.ones((2, 1)), g_full=g)
    with pytest.raises(ShapeError):
        validate_bundle(layer, bad)


def test_adjust_shape_mismatch(unit_instance):
    layer, _ = unit_instance
    with pytest.raises(ShapeError):
        adjust(layer, GradBundle(g_a_lora=np.zeros((2, 2)), g_b_lora=np.zeros((2, 1))))


def test_rank_bound_on_random_instances():
    rng = np.random.default_rng(22)
    for _ in range(50):
        m, n = int(rng.integers(5, 9)), int(rng.integers(5, 9))
        r = int(rng.integers(1, 3))
        layer = LoraLayer(
            w0=np.zeros((m, n)),
            b=rng.normal(size=(m, r)),
            a=rng.normal(size=(r, n)),
            alpha=float(r),
            rank=r,
            scaling_mode="lora",
        )
        g = rng.normal(size=(m, n))
        adj = adjust(layer, lora_raw_grads(layer, g), strategy="zero", policy=EXACT)
        g_tilde = equivalent_gradient(layer, adj.g_a, adj.g_b)
        assert numerical_rank(g_tilde) <= 2 * r
