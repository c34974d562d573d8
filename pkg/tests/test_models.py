import numpy as np
import pytest

from fedmac.models import (
    Batch,
    ModelKind,
    ModelSpec,
    ParamVector,
    evaluate,
    forward,
    init_params,
    loss_and_grad,
)

SPECS = [ModelSpec(ModelKind.MLR, 7, 4), ModelSpec(ModelKind.MLP2, 6, 3, hidden_dim=5)]


def _batch(rng, spec, n=9):
    return Batch(rng.standard_normal((n, spec.input_dim)), rng.integers(0, spec.num_classes, n))


def test_param_counts():
    assert ModelSpec("MLR", 784, 10).param_count == 7850
    assert ModelSpec("MLP2", 784, 10, 100).param_count == 79510
    assert ModelSpec("MLP2", 60, 10, 20).param_count == 60 * 20 + 20 + 20 * 10 + 10


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("MLR", 5, 3, hidden_dim=4)
    with pytest.raises(ValueError):
        ModelSpec("MLP2", 5, 3)
    with pytest.raises(ValueError):
        ModelSpec("MLR", 5, 1)
    with pytest.raises(ValueError):
        ParamVector(np.zeros(3), SPECS[0])


def test_unflatten_views_write_through():
    spec = SPECS[1]
    v = np.zeros(spec.param_count)
    (w1, b1), (w2, b2) = spec.unflatten(v)
    assert w1.shape == (6, 5) and b1.shape == (5,) and w2.shape == (5, 3) and b2.shape == (3,)
    b2[:] = 1.0
    assert v[-3:].tolist() == [1.0, 1.0, 1.0]


def test_init_bounds_and_zero_bias(rng):
    spec = SPECS[1]
    p = init_params(spec, rng)
    for w, b in spec.unflatten(p.values):
        assert np.all(np.abs(w) <= 1 / np.sqrt(w.shape[0]))
        assert np.all(b == 0)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind.value)
def test_gradient_finite_difference(rng, spec):
    p = init_params(spec, rng)
    p.values[:] += 0.1 * rng.standard_normal(p.values.shape)
    batch = _batch(rng, spec)
    _, g = loss_and_grad(p, batch)
    h = 1e-6
    fd = np.empty_like(p.values)
    for k in range(p.values.size):
        up, dn = p.copy(), p.copy()
        up.values[k] += h
        dn.values[k] -= h
        fd[k] = (loss_and_grad(up, batch)[0] - loss_and_grad(dn, batch)[0]) / (2 * h)
    np.testing.assert_allclose(g.values, fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind.value)
def test_duplicated_batch_same_loss_and_grad(rng, spec):
    p = init_params(spec, rng)
    b = _batch(rng, spec)
    dup = Batch(np.vstack([b.inputs, b.inputs]), np.concatenate([b.labels, b.labels]))
    l1, g1 = loss_and_grad(p, b)
    l2, g2 = loss_and_grad(p, dup)
    assert l1 == pytest.approx(l2, rel=1e-13)
    np.testing.assert_allclose(g1.values, g2.values, rtol=1e-12, atol=1e-15)


def test_zero_model_loss_is_log_c(rng):
    spec = SPECS[0]
    loss, _ = loss_and_grad(ParamVector(np.zeros(spec.param_count), spec), _batch(rng, spec))
    assert loss == pytest.approx(np.log(spec.num_classes), rel=1e-14)


def test_dimension_mismatch(rng):
    spec = SPECS[0]
    p = init_params(spec, rng)
    with pytest.raises(ValueError, match="input dimension"):
        loss_and_grad(p, Batch(np.zeros((2, 3)), np.zeros(2, dtype=int)))
    with pytest.raises(ValueError, match="out of range"):
        evaluate(p, Batch(np.zeros((2, 7)), np.array([0, 9])))
    with pytest.raises(ValueError, match="row count"):
        Batch(np.zeros((2, 7)), np.zeros(3, dtype=int))


def test_evaluate_ties_go_to_lowest_class():
    spec = SPECS[0]
    p = ParamVector(np.zeros(spec.param_count), spec)
    acc, loss = evaluate(p, Batch(np.ones((4, 7)), np.array([0, 0, 1, 2])))
    assert acc == 0.5
    assert loss == pytest.approx(np.log(4))


def test_forward_shapes(rng):
    for spec in SPECS:
        p = init_params(spec, rng)
        assert forward(spec, p.values, np.zeros((5, spec.input_dim))).shape == (5, spec.num_classes)
