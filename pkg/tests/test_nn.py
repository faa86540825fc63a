"""Adam update identities and MLP contracts."""

import numpy as np
import pytest

from deepxva import nn


def test_adam_zero_gradient_no_move():
    p = [np.array([1.0, -2.0])]
    st = nn.AdamState(p, lr=0.01)
    nn.adam_step(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], [1.0, -2.0])
    assert st.t == 1


def test_adam_first_step_identity():
    p = [np.array(0.0)]
    st = nn.AdamState(p, lr=0.001, eps=1e-8)
    nn.adam_step(p, [np.array(1.0)], st)
    # after bias correction the first step is -lr * g / (sqrt(g^2) + eps)
    assert p[0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_constant_gradient_monotone():
    p = [np.array(0.5)]
    st = nn.AdamState(p, lr=0.01)
    vals = [float(p[0])]
    for _ in range(5):
        nn.adam_step(p, [np.array(2.0)], st)
        vals.append(float(p[0]))
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    st = nn.AdamState(p)
    with pytest.raises(ValueError):
        nn.adam_step(p, [np.zeros(2)], st)


def test_mlp_zero_params_zero_output():
    spec = nn.MlpSpec(3, (4,), 2)
    params = nn.MlpParams(spec, [(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    out = nn.mlp_forward(params, np.ones((5, 3)))
    assert np.array_equal(out, np.zeros((5, 2)))


def test_mlp_identity_single_layer():
    spec = nn.MlpSpec(3, (), 3)
    params = nn.MlpParams(spec, [(np.eye(3), np.zeros(3))])
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(nn.mlp_forward(params, x), x)


def test_mlp_batch_row_independence():
    # perturbing input row j changes output row j only
    spec = nn.MlpSpec(2, (5, 5), 1)
    params = nn.init_mlp(spec, 11, "rows")
    x = np.random.default_rng(0).normal(size=(6, 2))
    base = nn.mlp_forward(params, x)
    for j in range(6):
        xp = x.copy()
        xp[j] += 0.5
        out = nn.mlp_forward(params, xp)
        changed = np.any(out != base, axis=1)
        assert not np.any(changed[np.arange(6) != j])


def test_mlp_dimension_error():
    spec = nn.MlpSpec(3, (4,), 1)
    params = nn.init_mlp(spec, 1, "dim")
    with pytest.raises(ValueError):
        nn.mlp_forward(params, np.ones((2, 4)))


def test_he_init_scale_and_determinism():
    spec = nn.MlpSpec(100, (100,), 100)
    a = nn.init_mlp(spec, 7, "scale")
    b = nn.init_mlp(spec, 7, "scale")
    c = nn.init_mlp(spec, 8, "scale")
    assert all(np.array_equal(x, y) for (x, _), (y, _) in zip(a.layers, b.layers))
    assert not np.array_equal(a.layers[0][0], c.layers[0][0])
    w = a.layers[0][0]
    assert w.std() == pytest.approx(np.sqrt(2.0 / 100), rel=0.1)
    assert all(np.array_equal(bi, 0 * bi) for _, bi in a.layers)


def test_piecewise_lr_schedule():
    assert nn.piecewise_lr(1.0, 0, 100) == 1.0
    assert nn.piecewise_lr(1.0, 60, 100) == pytest.approx(0.1)
    assert nn.piecewise_lr(1.0, 90, 100) == pytest.approx(0.01)
