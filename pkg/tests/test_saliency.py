import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from diffuse.errors import DataError, FormatError, ParameterError
from diffuse.grid import write_rfi
from diffuse.phantom import PhantomParams, diseased_only, generate_split, healthy_only, stack_images
from diffuse.saliency import (LesionScorer, SaliencyConfig, load_mask, make_mask, occlusion_saliency, pooled_features,
                              train_lesion_scorer, write_mask)

# high-contrast lesions on nearly flat tissue: the scorer should separate these almost perfectly
SEPARABLE = PhantomParams(texture_amplitude=0.02, lesion_contrast=(0.45, 0.5), lesion_radius=(4.0, 5.0), seed=3)


@pytest.fixture(scope="module")
def separable():
    split = generate_split(SEPARABLE, 400, 1, 60)
    scorer = train_lesion_scorer(stack_images(healthy_only(split.train)), stack_images(diseased_only(split.train)))
    return split, scorer


def test_pooled_features_shape_and_values():
    x = np.arange(2 * 8 * 8 * 1, dtype=float).reshape(2, 8, 8, 1)
    f = pooled_features(x)
    assert f.shape == (2, 4)
    assert f[0, 0] == x[0, :4, :4, 0].mean()


def test_pooled_features_pads_ragged_sides():
    assert pooled_features(np.ones((1, 10, 9, 2))).shape == (1, 3 * 3 * 2)


def test_scorer_separates_clean_phantoms(separable):
    split, scorer = separable
    assert scorer.accuracy >= 0.95
    test = split.test
    pred = scorer.score(stack_images(test)) > 0.5
    assert np.mean(pred == np.array([s.diseased for s in test])) >= 0.95


def test_saliency_peak_lies_on_the_lesion(separable):
    split, scorer = separable
    diseased = diseased_only(split.test)
    hits = 0
    for s in diseased:
        sal = occlusion_saliency(s.image, scorer)
        ys, xs = np.nonzero(sal == sal.max())
        centre = int(round(ys.mean())), int(round(xs.mean()))
        hits += bool(ndimage.binary_dilation(s.gt_mask, iterations=2)[centre])
    assert hits / len(diseased) >= 0.9


def test_saliency_is_nonnegative_and_zero_on_empty_images(separable):
    _, scorer = separable
    assert np.array_equal(occlusion_saliency(np.zeros((32, 32, 1)), scorer), np.zeros((32, 32)))
    sal = occlusion_saliency(diseased_only(separable[0].test)[0].image, scorer)
    assert np.all(sal >= 0)


def test_saliency_constant_scorer_gives_zero():
    flat = LesionScorer(np.zeros(4), 2.0, np.zeros(4), np.ones(4))
    sal = occlusion_saliency(np.random.default_rng(0).random((8, 8, 1)), flat, SaliencyConfig(patch=4, stride=2))
    assert np.array_equal(sal, np.zeros((8, 8)))


def test_occlusion_covers_every_pixel():
    # a scorer that only looks at the bottom-right pooled cell still reaches the last window
    w = np.zeros(16)
    w[-1] = 5.0
    scorer = LesionScorer(w, 0.0, np.zeros(16), np.ones(16))
    x = np.zeros((16, 16, 1))
    x[12:, 12:] = 1.0
    sal = occlusion_saliency(x, scorer, SaliencyConfig(patch=5, stride=4))
    assert sal[15, 15] > 0 and sal[0, 0] == 0


def test_patch_larger_than_image_rejected(separable):
    with pytest.raises(ParameterError):
        occlusion_saliency(np.zeros((6, 6, 1)), separable[1])


def test_scorer_save_load(tmp_path, separable):
    _, scorer = separable
    scorer.save(tmp_path / "s.json")
    back = LesionScorer.load(tmp_path / "s.json")
    x = separable[0].test[0].image
    assert back.score(x) == pytest.approx(scorer.score(x), rel=1e-12)
    assert back.accuracy == scorer.accuracy


def test_scorer_needs_both_classes():
    with pytest.raises(DataError):
        train_lesion_scorer(np.zeros((0, 8, 8, 1)), np.ones((3, 8, 8, 1)))


def test_scorer_is_reproducible():
    g = np.random.default_rng(0)
    a, b = g.random((20, 8, 8, 1)), g.random((20, 8, 8, 1)) + 0.3
    s1, s2 = train_lesion_scorer(a, b, seed=2), train_lesion_scorer(a, b, seed=2)
    assert np.array_equal(s1.weights, s2.weights) and s1.accuracy == s2.accuracy


# -- masks ------------------------------------------------------------------------------


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), st.sampled_from([50.0, 80.0, 90.0, 95.0]))
def test_mask_is_binary_and_bounded(sal, p):
    m = make_mask(sal, SaliencyConfig(percentile=p))
    assert set(np.unique(m)) <= {0, 1}
    assert m.sum() <= sal.size - int(np.ceil(p / 100 * sal.size))


def test_mask_of_constant_map_is_empty():
    assert make_mask(np.full((10, 10), 0.4)).sum() == 0


def test_mask_picks_the_hot_region():
    sal = np.zeros((20, 20))
    sal[5:9, 11:15] = 1.0
    m = make_mask(sal, SaliencyConfig(percentile=95))
    ys, xs = np.nonzero(m)
    assert 0 < m.sum() <= 20
    assert 5 <= ys.mean() <= 9 and 11 <= xs.mean() <= 15


def test_mask_file_round_trip(tmp_path):
    m = (np.random.default_rng(1).random((7, 5)) > 0.5).astype(np.uint8)
    write_mask(tmp_path / "m.rfi", m)
    assert np.array_equal(load_mask(tmp_path / "m.rfi"), m)


def test_non_binary_mask_rejected(tmp_path):
    write_rfi(tmp_path / "half.rfi", np.full((4, 4, 1), 0.5, dtype=np.float32))
    with pytest.raises(FormatError):
        load_mask(tmp_path / "half.rfi")
    write_rfi(tmp_path / "two.rfi", np.zeros((4, 4, 2), dtype=np.float32))
    with pytest.raises(FormatError):
        load_mask(tmp_path / "two.rfi")


def test_config_validation():
    with pytest.raises(ParameterError):
        SaliencyConfig(patch=0)
    with pytest.raises(ParameterError):
        SaliencyConfig(percentile=120)
