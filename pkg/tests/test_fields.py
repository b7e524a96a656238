import numpy as np
import pytest

from codef.fields import (
    FieldConfig,
    FieldModel,
    GroupedFieldModel,
    assign_layers,
    canonical_color,
    deform,
    evaluate,
    frame_time,
    from_pixels,
    pixel_points,
    to_pixels,
)

from helpers import check_gradients, random_model, tiny_field_config


def test_identity_start():
    m = FieldModel.create(tiny_field_config(), 0)
    p = np.random.default_rng(0).uniform(size=(50, 3)).astype(np.float32)
    np.testing.assert_array_equal(deform(m, p), p[:, :2])


def test_constant_displacement():
    m = FieldModel.create(tiny_field_config(), 0, np.float64)
    m.deform_mlp.biases[-1][...] = [0.1, 0.0]
    p = np.random.default_rng(1).uniform(size=(20, 3))
    xc = deform(m, p)
    np.testing.assert_allclose(xc[:, 0], p[:, 0] + 0.1, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(xc[:, 1], p[:, 1])


def test_untrained_canonical_is_mid_gray():
    m = FieldModel.create(tiny_field_config(), 0, np.float64)
    m.canonical_grid.tables[...] = 0
    for w in m.canonical_mlp.weights:
        w[...] = 0
    rgb = canonical_color(m, np.random.default_rng(2).uniform(-0.2, 1.2, size=(10, 2)))
    np.testing.assert_array_equal(rgb, 0.5)


def test_canonical_color_pure():
    m = random_model(np.random.default_rng(3))
    q = np.array([[0.3, 0.7], [0.3, 0.7], [0.1, 0.2]])
    rgb = canonical_color(m, q)
    np.testing.assert_array_equal(rgb[0], rgb[1])
    assert np.all((rgb > 0) & (rgb < 1))


def test_identity_deformation_evaluates_canonical():
    m = random_model(np.random.default_rng(4))
    m.deform_mlp.weights[-1][...] = 0
    m.deform_mlp.biases[-1][...] = 0
    p = np.random.default_rng(5).uniform(size=(30, 3))
    np.testing.assert_array_equal(evaluate(m, p), canonical_color(m, p[:, :2]))


def test_evaluate_repeatable_bitwise():
    m = FieldModel.create(FieldConfig(), 7)
    p = np.random.default_rng(6).uniform(size=(1000, 3)).astype(np.float32)
    np.testing.assert_array_equal(evaluate(m, p), evaluate(m, p))


def test_canonical_queries_clamped_to_padding():
    m = random_model(np.random.default_rng(7))
    s = m.padding
    far = np.array([[5.0, -3.0]])
    edge = np.array([[1 + s, -s]])
    np.testing.assert_allclose(canonical_color(m, far), canonical_color(m, edge), rtol=0, atol=1e-15)
    rgb, cache = m.color_forward(far)
    g = m.color_backward(cache, np.ones_like(rgb))
    assert np.all(g == 0)


def test_default_head_widths():
    m = FieldModel.create(FieldConfig(), 0)
    assert m.canonical_mlp.widths == (34, 64, 64, 3)
    assert m.deform_mlp.widths == (35, 64, 64, 2)
    assert m.canonical_mlp.output_activation == "sigmoid"
    assert m.deform_mlp.output_activation == "identity"
    tbl = m.canonical_grid.tables
    assert tbl.dtype == np.float32 and np.abs(tbl).max() <= 1e-4


def test_field_config_round_trip_and_validation():
    cfg = tiny_field_config()
    assert FieldConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FieldConfig(padding=-0.1)
    with pytest.raises(ValueError):
        FieldConfig(canonical=cfg.deformation)


def test_composed_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(5):
        m = random_model(rng)
        p = rng.uniform(0.05, 0.95, size=(3, 3))
        up = rng.normal(size=(3, 3))

        def loss(accumulate):
            rgb, cache = m.forward(p)
            if accumulate:
                m.backward(cache, up)
            return float(np.sum(rgb * up))

        worst = max(worst, check_gradients(m, loss, rng))
    assert worst < 1e-4


def test_displacement_jacobian_matches_finite_differences():
    rng = np.random.default_rng(9)
    m = random_model(rng)
    p = rng.uniform(0.1, 0.9, size=(4, 3))
    jac = m.displacement_jacobian(p)
    h = 1e-6
    for k in range(2):
        e = np.zeros(3)
        e[k] = h
        num = (m.displacement(p + e) - m.displacement(p - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], num, rtol=1e-4, atol=1e-7)
    assert all(np.all(g == 0) for g in m.deform_mlp.gradients())


def test_grouped_routing():
    rng = np.random.default_rng(10)
    g = GroupedFieldModel([random_model(rng), random_model(rng)])
    p = rng.uniform(size=(40, 3))
    a = rng.integers(0, 2, size=40)
    out = g.evaluate(p, a)
    for k in range(2):
        np.testing.assert_array_equal(out[a == k], evaluate(g.layers[k], p[a == k]))
    with pytest.raises(ValueError):
        GroupedFieldModel([])


def test_assign_layers():
    single = np.ones((1, 4, 5), dtype=bool)
    assert np.all(assign_layers(single) == 0)
    m0 = np.zeros((4, 5), dtype=bool)
    m0[:2] = True
    disjoint = np.stack([m0, ~m0])
    np.testing.assert_array_equal(assign_layers(disjoint), (~m0).astype(int))
    overlap = np.stack([np.ones((4, 5), bool), m0])
    np.testing.assert_array_equal(assign_layers(overlap)[:2], 1)
    uncovered = np.zeros((3, 4, 5), dtype=bool)
    assert np.all(assign_layers(uncovered) == 0)
    with pytest.raises(ValueError):
        assign_layers(disjoint, shape=(5, 4))


def test_frame_coordinates():
    assert frame_time(0, 1) == 0.0
    assert frame_time(9, 10) == 1.0
    p = pixel_points(3, 4, frame=2, n_frames=5)
    assert p.shape == (12, 3)
    np.testing.assert_allclose(p[:4, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(p[::4, 1], [1 / 6, 0.5, 5 / 6])
    assert np.all(p[:, 2] == 0.5)
    px = to_pixels(p[:, :2], 3, 4)
    np.testing.assert_allclose(px[:4, 0], [0, 1, 2, 3], atol=1e-6)
    np.testing.assert_allclose(from_pixels(px, 3, 4), p[:, :2], atol=1e-6)
    assert pixel_points(3, 4, scale=2).shape == (48, 3)
