import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codef import synth
from codef.flow import flow_masks, load_flows
from codef.images import load_frames, load_layer_masks


def test_zero_amplitude_is_static():
    v = synth.generate(synth.sinusoidal_spec(amplitude=0.0))
    assert np.all(v.frames == v.frames[0])
    assert np.all(v.fwd == 0) and np.all(v.bwd == 0)


def test_translation_flow_constant():
    v = synth.generate(synth.translation_spec())
    assert v.frames.shape == (10, 64, 64, 3)
    np.testing.assert_allclose(v.fwd[..., 0], 2.0, atol=1e-6)
    np.testing.assert_allclose(v.fwd[..., 1], 0.0, atol=1e-6)
    np.testing.assert_allclose(v.bwd[..., 0], -2.0, atol=1e-6)


def test_mask_true_off_occlusion():
    for preset in (synth.translation_spec, synth.sinusoidal_spec, synth.moving_object_spec):
        v = synth.generate(preset())
        m = flow_masks(v.frames, v.fwd, v.bwd, 0.02)
        assert m[~v.occlusion].all()
        assert (m == ~v.occlusion).mean() >= 0.95


def test_warp_oracle_identity_and_translation():
    v = synth.generate(synth.translation_spec())
    p = np.array([[10.0, 20.0], [3.5, 7.25]])
    np.testing.assert_array_equal(v.warp_oracle(p, 4, 4), p)
    np.testing.assert_allclose(v.warp_oracle(p, 1, 6), p + [10.0, 0.0])


def test_sinusoidal_round_trip():
    v = synth.generate(synth.sinusoidal_spec())
    p = np.random.default_rng(0).uniform(0, 63, size=(500, 2))
    for t0, t1 in [(0, 3), (2, 7), (9, 1)]:
        back = v.warp_oracle(v.warp_oracle(p, t0, t1), t1, t0)
        assert np.abs(back - p).max() < 1e-9


def test_sinusoidal_first_frame_undeformed():
    v = synth.generate(synth.sinusoidal_spec())
    p = np.random.default_rng(1).uniform(0, 63, size=(100, 2))
    np.testing.assert_allclose(v.motion.forward(p, 0), p, atol=1e-12)


def test_affine_round_trip():
    v = synth.generate(synth.SynthSpec(warp="affine", rotation=0.02, scale_rate=0.01))
    p = np.random.default_rng(2).uniform(0, 63, size=(100, 2))
    np.testing.assert_allclose(v.warp_oracle(v.warp_oracle(p, 0, 9), 9, 0), p, atol=1e-9)


def test_flows_match_oracle():
    v = synth.generate(synth.sinusoidal_spec())
    ys, xs = np.mgrid[0:64, 0:64].astype(float)
    g = np.stack([xs, ys], -1)
    np.testing.assert_allclose(v.fwd[4], v.warp_oracle(g, 4, 5) - g, atol=1e-4)


def test_texture_band_limited():
    for seed in range(5):
        for tex in synth.TEXTURES:
            assert synth.texture_resampling_error(synth.SynthSpec(seed=seed, texture=tex)) < 1e-2


def test_moving_object_masks():
    v = synth.generate(synth.moving_object_spec())
    assert v.masks.any(axis=(1, 2)).all()
    lm = v.layer_masks()
    assert lm.shape == (10, 2, 64, 64)
    np.testing.assert_array_equal(lm[:, 0], ~lm[:, 1])
    ys, xs = np.mgrid[0:64, 0:64]
    c = v.object_center(3)
    np.testing.assert_array_equal(v.masks[3], np.hypot(xs - c[0], ys - c[1]) <= 10)


@pytest.mark.parametrize("bad", [
    dict(texture="plaid"),
    dict(warp="swirl"),
    dict(warp="translation", velocity=(20.0, 0.0)),
    dict(warp="sinusoidal", amplitude=10.0, period=32),
    dict(warp="affine", scale_rate=0.5),
    dict(width=1),
])
def test_out_of_bound_parameters(bad):
    with pytest.raises(ValueError):
        synth.generate(synth.SynthSpec(**bad))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_generation_deterministic(seed):
    spec = synth.SynthSpec(width=16, height=12, frames=3, seed=seed)
    a, b = synth.generate(spec), synth.generate(spec)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.fwd.tobytes() == b.fwd.tobytes()


def test_save_layout(tmp_path):
    v = synth.generate(synth.moving_object_spec(width=24, height=20, frames=4, object_radius=4,
                                                object_start=(8.0, 10.0), object_velocity=(1.0, 0.0)))
    v.save(tmp_path)
    frames = load_frames(tmp_path / "frames")
    assert frames.shape == (4, 20, 24, 3)
    assert np.abs(frames - v.frames).max() <= 0.5 / 255 + 1e-6
    fwd, bwd = load_flows(tmp_path / "flow", 4)
    np.testing.assert_array_equal(fwd, v.fwd)
    masks = load_layer_masks(tmp_path / "masks", 4, (20, 24))
    np.testing.assert_array_equal(masks, v.layer_masks())
    spec = json.loads((tmp_path / "synth.json").read_text())
    assert synth.SynthSpec.from_dict(spec) == v.spec
