import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfnet.codec import OBJECT_IDS, GridSpec, decode_arrays, encode_targets
from ccfnet.synth import (
    AugmentError,
    AugmentPolicy,
    SynthConfig,
    SynthConfigError,
    affine_matrix,
    augment,
    generate_dataset,
    generate_sample,
    kfold_split,
)

CFG = SynthConfig()


@pytest.fixture(scope="module")
def thousand():
    return generate_dataset(CFG, 1000)


def test_same_index_is_bit_identical():
    a, b = generate_sample(CFG, 17), generate_sample(CFG, 17)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.annotation.xy, b.annotation.xy)
    np.testing.assert_array_equal(a.annotation.labels, b.annotation.labels)
    c = generate_sample(SynthConfig(global_seed=1), 17)
    assert c.image.tobytes() != a.image.tobytes()


def test_image_contract():
    s = generate_sample(CFG, 0)
    assert s.image.shape == (1, 128, 128) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert s.annotation.spacing_mm == 0.5


def test_annotations_ordered_and_in_bounds(thousand):
    for s in thousand:
        assert [o.id for o in s.annotation.objects] == list(OBJECT_IDS)
        xy = s.annotation.xy
        assert xy.min() >= 0 and xy.max() <= 127
        assert np.all(np.diff(xy[:, 1]) > 0)  # top to bottom


def test_disease_fraction(thousand):
    labels = np.stack([s.annotation.labels for s in thousand])
    frac = labels.mean(axis=0)
    assert np.all(np.abs(frac - 0.3) <= 0.05), frac


def test_disease_rate_extremes():
    assert not any(generate_sample(SynthConfig(disease_rate=0.0), i).annotation.labels.any() for i in range(5))
    assert all(generate_sample(SynthConfig(disease_rate=1.0), i).annotation.labels.all() for i in range(5))


def test_diseased_objects_look_different():
    # mean intensity in a small window at each object, split by label
    sick, well = {0: [], 1: []}, {0: [], 1: []}
    for i in range(60):
        s = generate_sample(CFG, i)
        for k, (x, y) in enumerate(s.annotation.xy.round().astype(int)):
            v = s.image[0, y - 1 : y + 2, x - 1 : x + 2].mean()
            (sick if s.annotation.labels[k] else well)[k % 2].append(v)
    for cls in (0, 1):
        assert np.mean(sick[cls]) < np.mean(well[cls]) - 0.1


@pytest.mark.parametrize(
    "kwargs", [dict(image_size=120), dict(image_size=48), dict(disease_rate=1.5), dict(spacing_mm=0.0)]
)
def test_config_errors(kwargs):
    with pytest.raises(SynthConfigError):
        generate_sample(SynthConfig(**kwargs), 0)


def test_larger_images_scale():
    s = generate_sample(SynthConfig(image_size=256), 3)
    assert s.image.shape == (1, 256, 256)
    assert s.annotation.xy.max() <= 255


class TestAugment:
    def test_identity(self):
        s = generate_sample(CFG, 4)
        t = augment(s, AugmentPolicy.identity(), np.random.default_rng(0))
        np.testing.assert_allclose(t.image, s.image, atol=1e-6)
        np.testing.assert_array_equal(t.annotation.xy, s.annotation.xy)

    def test_flip_maps_x(self):
        A = affine_matrix(128, 128, 0.0, (0.0, 0.0), 1.0, True)
        assert (A @ [40.0, 10.0, 1.0])[:2].tolist() == [87.0, 10.0]

    def test_flip_moves_pixels(self):
        s = generate_sample(CFG, 5)
        policy = AugmentPolicy(0.0, 0.0, (1.0, 1.0), 1.0, 0.0)
        t = augment(s, policy, np.random.default_rng(0))
        np.testing.assert_allclose(t.image[0], s.image[0, :, ::-1], atol=1e-6)

    def test_labels_survive(self):
        s = generate_sample(CFG, 6)
        t = augment(s, AugmentPolicy(), np.random.default_rng(1))
        np.testing.assert_array_equal(t.annotation.labels, s.annotation.labels)

    def test_rotation_bound_enforced(self):
        with pytest.raises(SynthConfigError):
            augment(generate_sample(CFG, 0), AugmentPolicy(rotation_deg=30.0), np.random.default_rng(0))

    def test_exhausted_retries(self):
        policy = AugmentPolicy(translation_frac=5.0, max_retries=3)
        with pytest.raises(AugmentError):
            augment(generate_sample(CFG, 0), policy, np.random.default_rng(0))

    def test_same_rng_state_same_result(self):
        s = generate_sample(CFG, 7)
        a = augment(s, AugmentPolicy(), np.random.default_rng(9))
        b = augment(s, AugmentPolicy(), np.random.default_rng(9))
        assert a.image.tobytes() == b.image.tobytes()

    def test_output_size_rescales_spacing(self):
        s = generate_sample(CFG, 8)
        t = augment(s, AugmentPolicy(output_size=64), np.random.default_rng(2))
        assert t.image.shape == (1, 64, 64)
        assert t.annotation.spacing_mm == pytest.approx(1.0)

    def test_image_follows_coordinates(self):
        # a bright dot placed at an object lands where the transformed coordinate says
        s = generate_sample(CFG, 9)
        x, y = s.annotation.xy[5].round().astype(int)
        s.image[...] = 0.0
        s.image[0, y - 1 : y + 2, x - 1 : x + 2] = 1.0
        s.annotation = type(s.annotation).from_arrays(np.tile([x, y], (11, 1)).astype(float), s.annotation.labels)
        policy = AugmentPolicy(noise_sigma=0.0)
        t = augment(s, policy, np.random.default_rng(3))
        img = t.image[0]
        yy, xx = np.mgrid[0:128, 0:128]
        centroid = np.array([(img * xx).sum(), (img * yy).sum()]) / img.sum()
        np.testing.assert_allclose(centroid, t.annotation.xy[5], atol=0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), index=st.integers(0, 50))
def test_augment_then_codec_round_trip(seed, index):
    t = augment(generate_sample(CFG, index), AugmentPolicy(), np.random.default_rng(seed))
    maps = encode_targets(t.annotation, GridSpec())
    xy, prob = decode_arrays(maps.heatmap, maps.fine_x, maps.fine_y, maps.category, GridSpec())
    np.testing.assert_allclose(xy, t.annotation.xy, atol=1e-3)
    np.testing.assert_array_equal(prob.astype(bool), t.annotation.labels)


class TestKFold:
    def test_sizes(self):
        splits = kfold_split(250, 4, seed=0)
        assert [len(v) for _, v in splits] == [63, 63, 62, 62]

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 300), folds=st.integers(2, 10), seed=st.integers(0, 1000))
    def test_partition(self, n, folds, seed):
        if n < folds:
            with pytest.raises(ValueError):
                kfold_split(n, folds, seed)
            return
        splits = kfold_split(n, folds, seed)
        vals = np.concatenate([v for _, v in splits])
        np.testing.assert_array_equal(np.sort(vals), np.arange(n))
        for train, val in splits:
            assert len(np.intersect1d(train, val)) == 0
            assert len(train) + len(val) == n
        sizes = [len(v) for _, v in splits]
        assert max(sizes) - min(sizes) <= 1

    def test_seeded(self):
        a = kfold_split(50, 5, seed=3)
        b = kfold_split(50, 5, seed=3)
        c = kfold_split(50, 5, seed=4)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
        assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))
