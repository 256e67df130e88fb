import math

import numpy as np
import pytest
from scipy import stats

from sarad.core import Domain, SarImage, log_transform, make_rng
from sarad.speckle import (
    SceneSpec,
    Scatterer,
    Segment,
    apply_speckle_log,
    exp1_goodness,
    exponential,
    format_scene_spec,
    ks_exp1,
    parse_scene_spec,
    ratio_image,
    render_clean,
    sample_slc,
)

N_MC = 10**6


def const(value, shape=(1000, 1000, 1)):
    return SarImage(np.full(shape, value), Domain.LINEAR)


def test_single_segment_constant():
    spec = SceneSpec(8, 8, 1, (1.0,), (Segment(0, 0, 8, 8, (1.0,)),))
    assert np.all(render_clean(spec).data == 1.0)


def test_scatterer_placement():
    spec = SceneSpec(10, 10, 1, (1.0,), scatterers=(Scatterer(5, 5, 100.0),))
    r = render_clean(spec).data[..., 0]
    assert r[5, 5] == 100.0
    assert np.count_nonzero(r != 1.0) == 1


def test_texture_is_seeded():
    spec = SceneSpec(16, 16, 1, (1.0,), texture_shape=4.0, seed=3)
    a, b = render_clean(spec), render_clean(spec)
    assert np.array_equal(a.data, b.data)
    assert a.data.std() > 0


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(4, 4, 2, (1.0,))
    with pytest.raises(ValueError):
        SceneSpec(4, 4, 1, (0.0,))


def test_scene_spec_text_round_trip():
    spec = SceneSpec(12, 9, 2, (1.0, 0.5), (Segment(1, 2, 5, 6, (2.0, 0.25)),),
                     (Scatterer(3, 3, (40.0, 20.0)),), 8.0, 5)
    assert parse_scene_spec(format_scene_spec(spec)) == spec


def test_scene_spec_parse_errors():
    with pytest.raises(ValueError, match="line 2"):
        parse_scene_spec("height=4\nbogus=1\nwidth=4")
    with pytest.raises(ValueError, match="width"):
        parse_scene_spec("height=4")


def test_exponential_never_zero():
    assert exponential(make_rng(0), 10**5).min() > 0


def test_slc_intensity_moments_monte_carlo():
    i = sample_slc(const(1.0), make_rng(1)).intensity().data
    assert abs(i.mean() - 1.0) < 0.01
    assert abs(i.var() - 1.0) < 0.03


def test_slc_moments_within_three_standard_errors():
    r = 2.5
    i = sample_slc(const(r), make_rng(2)).intensity().data.ravel()
    # sample-variance standard error: sqrt((mu4 - sigma^4) / N), mu4 = 9 R^4 for Exp
    assert abs(i.mean() - r) < 3 * r / math.sqrt(N_MC)
    assert abs(i.var() - r * r) < 3 * math.sqrt(8.0) * r * r / math.sqrt(N_MC)


def test_slc_tiny_reflectivity():
    i = sample_slc(const(1e-12, (10, 10, 1)), make_rng(0)).intensity().data
    assert i.max() < 1e-9


def test_slc_rejects_nonpositive_and_wrong_domain():
    with pytest.raises(ValueError):
        sample_slc(const(0.0, (2, 2, 1)), make_rng(0))
    with pytest.raises(ValueError):
        sample_slc(SarImage(np.ones((2, 2)), Domain.LOG), make_rng(0))


def test_log_speckle_mean_of_exp():
    y = apply_speckle_log(SarImage(np.zeros((1000, 1000)), Domain.LOG), make_rng(3))
    assert abs(np.exp(y.data).mean() - 1.0) < 0.01


def test_log_speckle_is_additive_and_seeded():
    rng_field = lambda: apply_speckle_log(SarImage(np.zeros((50, 50)), Domain.LOG), make_rng(4)).data  # noqa: E731
    x = np.random.default_rng(0).normal(size=(50, 50, 1))
    y = apply_speckle_log(SarImage(x, Domain.LOG), make_rng(4)).data
    assert np.allclose(y - x, rng_field(), atol=1e-12)
    assert np.array_equal(rng_field(), rng_field())


def test_log_speckle_moments_match_digamma():
    y = apply_speckle_log(SarImage(np.zeros((1000, 1000)), Domain.LOG), make_rng(5)).data
    # log of Exp(1): mean -gamma, variance pi^2 / 6
    assert abs(y.mean() + np.euler_gamma) < 3 * math.sqrt(math.pi**2 / 6 / N_MC)
    assert abs(y.var() - math.pi**2 / 6) < 0.01


def test_slc_and_log_speckle_agree_in_distribution():
    a = sample_slc(const(1.0, (100, 1000, 1)), make_rng(6)).intensity().data.ravel()
    b = np.exp(apply_speckle_log(SarImage(np.zeros((100, 1000)), Domain.LOG), make_rng(7)).data.ravel())
    d = stats.ks_2samp(a, b).statistic
    n = a.size
    assert d < 1.628 * math.sqrt(2.0 / n)


def test_ratio_image_basic():
    x = const(2.0, (3, 3, 1))
    assert np.all(ratio_image(x, x).data == 1.0)
    assert np.all(ratio_image(const(4.0, (3, 3, 1)), x).data == 2.0)


def test_ratio_image_errors():
    with pytest.raises(ValueError):
        ratio_image(const(1.0, (2, 2, 1)), const(0.0, (2, 2, 1)))
    with pytest.raises(ValueError):
        ratio_image(const(1.0, (2, 2, 1)), const(1.0, (3, 2, 1)))


def test_ks_statistic_matches_scipy():
    x = exponential(make_rng(8), 5000)
    assert ks_exp1(x) == pytest.approx(stats.kstest(x, "expon").statistic, abs=1e-12)


def test_exp1_goodness_pass_and_fail():
    assert exp1_goodness(exponential(make_rng(9), 10**5))[1]
    assert not exp1_goodness(2.0 * exponential(make_rng(10), 10**5))[1]


def test_exp1_goodness_errors():
    with pytest.raises(ValueError):
        exp1_goodness(np.ones(99))
    with pytest.raises(ValueError):
        exp1_goodness(-np.ones(200))


def test_ratio_against_true_and_wrong_reflectivity():
    rng = make_rng(11)
    clean = SarImage(np.exp(rng.normal(size=(256, 256, 1))), Domain.LINEAR)
    noisy = sample_slc(clean, make_rng(12)).intensity()
    assert exp1_goodness(ratio_image(noisy, clean).data)[1]
    wrong = SarImage(2.0 * clean.data, Domain.LINEAR)
    assert not exp1_goodness(ratio_image(noisy, wrong).data)[1]


def test_perfect_despeckling_gives_exp1_ratio():
    spec = SceneSpec(128, 128, 4, (1.0, 0.25, 0.25, 0.8), (Segment(10, 10, 90, 70, (5.0, 1.0, 1.0, 4.0)),))
    clean = render_clean(spec)
    noisy = sample_slc(clean, make_rng(13)).intensity()
    d, ok = exp1_goodness(ratio_image(noisy, clean).data)
    assert ok, d
    assert log_transform(noisy).domain is Domain.LOG
