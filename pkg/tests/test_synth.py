import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktl import synth
from ktl.synth import GeometricTransform, IDENTITY


def test_corpus_zero_deformation_shares_landmarks():
    c = synth.generate_corpus(4, template_pool=1, image_size=64, deform_strength=0.0, seed=7, shape_jitter=0.0)
    for s in c[1:]:
        np.testing.assert_array_equal(s.gt_landmarks, c[0].gt_landmarks)


def test_corpus_is_deterministic():
    a = synth.generate_corpus(100, template_pool=3, image_size=64, deform_strength=0.5, seed=1)
    b = synth.generate_corpus(100, template_pool=3, image_size=64, deform_strength=0.5, seed=1)
    assert synth.manifest_hash(a) == synth.manifest_hash(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.raster, y.raster)
        assert np.array_equal(x.gt_landmarks, y.gt_landmarks)


def test_seed_changes_landmarks():
    a = synth.generate_corpus(100, seed=1)
    b = synth.generate_corpus(100, seed=2)
    differ = sum(not np.allclose(x.gt_landmarks, y.gt_landmarks) for x, y in zip(a, b))
    assert differ >= 95


def test_sample_invariants():
    for s in synth.generate_corpus(50, seed=3, deform_strength=1.0):
        assert s.raster.dtype == np.float32
        assert s.raster.min() >= 0 and s.raster.max() <= 1
        h, w = s.raster.shape
        vis = s.gt_landmarks[s.visible]
        assert np.all((vis >= -0.5) & (vis <= np.array([w, h]) - 0.5))


def test_template_validation():
    tpl = synth.make_templates(1, 0)[0]
    with pytest.raises(ValueError):
        synth.ObjectTemplate(0, tpl.canonical_landmarks, (1, 0) + tuple(range(2, 14)) + (13,), 0)
    pts = tpl.canonical_landmarks.copy()
    pts[1] = pts[0] + 0.001
    with pytest.raises(ValueError):
        synth.ObjectTemplate(0, pts, tpl.symmetry_map, 0)


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth.generate_corpus(2, image_size=16)
    with pytest.raises(ValueError):
        GeometricTransform(scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        GeometricTransform(rotation=float("nan"))


def test_identity_transform_exact():
    s = synth.generate_corpus(1, seed=4)[0]
    out = synth.apply_transform(s, IDENTITY)
    assert np.array_equal(out.raster, s.raster)
    assert np.array_equal(out.gt_landmarks, s.gt_landmarks)


def test_flip_mirrors_symmetric_partner():
    s = synth.generate_corpus(1, seed=5, deform_strength=0.0, shape_jitter=0.0)[0]
    w = s.raster.shape[1]
    out = synth.flip_sample(s)
    sym = np.asarray(s.symmetry_map)
    # independent: mirror the template landmarks analytically
    tpl = synth.make_templates(3, 5)[s.template_id]
    px = synth.to_pixels(tpl.canonical_landmarks, s.raster.shape)
    mirrored = px.copy()
    mirrored[:, 0] = (w - 1) - px[:, 0]
    np.testing.assert_allclose(out.gt_landmarks, mirrored[sym], atol=1e-6)
    np.testing.assert_array_equal(out.raster, s.raster[:, ::-1])


def test_double_flip_is_exact():
    s = synth.generate_corpus(1, seed=6)[0]
    twice = synth.flip_sample(synth.flip_sample(s))
    assert np.array_equal(twice.gt_landmarks, s.gt_landmarks)
    assert np.array_equal(twice.raster, s.raster)


def test_rotation_round_trip():
    s = synth.generate_corpus(1, seed=8, deform_strength=0.0)[0]
    a = synth.apply_transform(s, GeometricTransform(rotation=np.pi))
    b = synth.apply_transform(a, GeometricTransform(rotation=-np.pi))
    np.testing.assert_allclose(b.gt_landmarks, s.gt_landmarks, atol=1e-6)


def test_transform_points_identity_and_translation():
    pts = np.random.default_rng(0).uniform(0, 1, (20, 2))
    np.testing.assert_array_equal(synth.transform_points(pts, IDENTITY), pts)
    g = GeometricTransform(translation=(0.125, -0.25))
    np.testing.assert_array_equal(synth.transform_points(pts, g), pts + np.array([0.125, -0.25]))


transforms = st.builds(
    lambda r, s, tx, ty, sh, f: GeometricTransform(rotation=r, scale=(s, s * 1.1), translation=(tx, ty),
                                                   shear=sh, flip=f),
    st.floats(-3.1, 3.1), st.floats(0.5, 2.0), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
    st.floats(-0.3, 0.3), st.booleans())


@settings(max_examples=60, deadline=None)
@given(transforms, transforms)
def test_composition_matches_sequential(g1, g2):
    pts = np.random.default_rng(1).uniform(0, 1, (10, 2))
    seq = synth.transform_points(synth.transform_points(pts, g1), g2)
    m = g2.matrix() @ g1.matrix()  # independent: compose homogeneous matrices directly
    ref = (np.c_[pts, np.ones(len(pts))] @ m.T)[:, :2]
    np.testing.assert_allclose(seq, ref, atol=1e-9)
    np.testing.assert_allclose(synth.transform_points(pts, synth.compose(g2, g1)), ref, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(transforms)
def test_forward_inverse_round_trip(g):
    pts = np.random.default_rng(2).uniform(0, 1, (10, 2))
    np.testing.assert_allclose(g.inverse(g.forward(pts)), pts, atol=1e-6)


def test_piecewise_inverse():
    rng = np.random.default_rng(3)
    g = synth.random_transform(rng, 1.0, kind="piecewise")
    pts = rng.uniform(0, 1, (50, 2))
    np.testing.assert_allclose(g.inverse(g.forward(pts)), pts, atol=1e-6)


def test_transform_dict_round_trip():
    g = synth.random_transform(np.random.default_rng(4), 0.7, flip_prob=1.0, kind="piecewise")
    assert GeometricTransform.from_dict(g.to_dict()) == g


def test_corpus_io_round_trip(tmp_path):
    c = synth.generate_corpus(5, seed=9)
    synth.save_corpus(c, tmp_path / "c")
    back = synth.load_corpus(tmp_path / "c")
    assert synth.manifest_hash(back) == synth.manifest_hash(c)


def test_raster_format(tmp_path):
    r = np.random.default_rng(0).random((7, 5)).astype(np.float32)
    synth.write_raster(tmp_path / "r.ldr", r)
    data = (tmp_path / "r.ldr").read_bytes()
    assert data[:4] == b"LDR1" and len(data) == 12 + 4 * 35
    assert np.array_equal(synth.read_raster(tmp_path / "r.ldr"), r)
