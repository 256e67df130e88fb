import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from sarad.aae import (
    PROB_CLAMP,
    AaeConfig,
    build_aae,
    discriminate,
    encode,
    load_aae,
    loss_adversarial,
    loss_rec,
    reconstruct_image,
    save_aae,
    train_aae,
    train_step,
    write_epoch_log,
)
from sarad.core import Domain, SarImage, extract_patches, make_rng
from sarad.detect import prepare_input
from sarad.eval import pattern_footprint
from sarad.nn import backward, forward

TOY = AaeConfig(patch=16, stride=8, channels=3, latent=4, widths=(4, 8), batch=8, epochs=2, seed=0)

unit = st.floats(0, 1)


def toy_patches(n=24, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((1, 16, 16, 3)) * 0.5 + 0.25
    return np.clip(base + 0.05 * rng.normal(size=(n, 16, 16, 3)), 0, 1)


# --- losses -----------------------------------------------------------------


def test_loss_rec_examples():
    x = np.random.default_rng(0).random((2, 4, 4, 3))
    assert loss_rec(x, x)[0] == 0.0
    assert loss_rec(x, x + 1)[0] == pytest.approx(1.0)
    y = x.copy()
    y[1, 2, 3, 0] += 0.3
    assert loss_rec(x, y)[0] == pytest.approx(0.3 / x.size)


def test_loss_rec_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rec(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(np.float64, (2, 3, 3), elements=unit), arrays(np.float64, (2, 3, 3), elements=unit))
def test_loss_rec_symmetric_nonnegative(a, b):
    assert loss_rec(a, b)[0] == loss_rec(b, a)[0] >= 0
    assert (loss_rec(a, b)[0] == 0) == np.array_equal(a, b)


def test_loss_rec_gradient_finite_differences():
    rng = np.random.default_rng(1)
    x, xh = rng.random((2, 3, 3, 2)), rng.random((2, 3, 3, 2))
    _, g = loss_rec(x, xh)
    h = 1e-7
    for idx in np.ndindex(xh.shape):
        p, m = xh.copy(), xh.copy()
        p[idx] += h
        m[idx] -= h
        numeric = (loss_rec(x, p)[0] - loss_rec(x, m)[0]) / (2 * h)
        assert abs(g[idx] - numeric) <= 1e-4 * max(abs(numeric), 1e-12)


def test_adversarial_examples():
    half = np.full(4, 0.5)
    disc, gen = loss_adversarial(half, half)
    assert -disc == 2 * math.log(0.5)
    assert -disc == pytest.approx(-1.38629, abs=1e-5)
    assert gen == pytest.approx(0.69315, abs=1e-5)
    perfect_disc, _ = loss_adversarial(np.full(4, 1 - 1e-9), np.full(4, 1e-9))
    assert perfect_disc == pytest.approx(0.0, abs=1e-6)


@given(arrays(np.float64, 5, elements=unit), arrays(np.float64, 5, elements=unit))
def test_adversarial_losses_finite_under_clamping(real, fake):
    d, g = loss_adversarial(real, fake)
    assert math.isfinite(d) and math.isfinite(g)
    assert g <= -math.log(PROB_CLAMP) + 1e-9


def test_adversarial_empty_batch():
    with pytest.raises(ValueError):
        loss_adversarial(np.array([]), np.array([0.5]))


# --- architecture and training --------------------------------------------------


def test_default_architecture_shapes():
    b = build_aae()
    assert b.encoder.output_shape() == (64,)
    assert b.decoder.output_shape() == (64, 64, 3)
    assert b.discriminator.output_shape() == (1,)
    kinds = [layer.kind for layer in b.encoder.layers]
    assert kinds == ["Conv2d", "LeakyRelu"] * 3 + ["Flatten", "Dense"]
    assert b.decoder.layers[-1].kind == "Sigmoid"


def test_bad_patch_size():
    with pytest.raises(ValueError):
        build_aae(AaeConfig(patch=20))


def test_discriminator_gradient_through_logit():
    # the step uses d/dlogit of the adversarial loss; compare with differences on the loss itself
    b = build_aae(TOY)
    z = np.random.default_rng(2).normal(size=(6, 4))
    logits, cache = forward(b.discriminator, z)
    p = expit(logits)
    grads, _ = backward(b.discriminator, cache, -(1 - p) / len(z))

    def loss():
        return loss_adversarial(discriminate(b, z), np.full(1, 0.5))[0] - math.log(2)

    name = "4.weight"
    w = b.discriminator.params[name]
    h = 1e-6
    for j in range(w.size):
        orig = w.flat[j]
        w.flat[j] = orig + h
        lp = loss()
        w.flat[j] = orig - h
        lm = loss()
        w.flat[j] = orig
        assert abs(grads[name].flat[j] - (lp - lm) / (2 * h)) < 1e-6


def test_train_step_with_zero_lr_changes_nothing():
    b = build_aae(TOY)
    before = {n: {k: v.copy() for k, v in getattr(b, n).params.items()} for n in ("encoder", "decoder", "discriminator")}
    _, losses = train_step(b, toy_patches(8), make_rng(0), 0.0)
    assert all(math.isfinite(v) for v in (losses.rec, losses.disc, losses.gen))
    for n, params in before.items():
        for k, v in params.items():
            assert np.array_equal(getattr(b, n).params[k], v)


def test_train_step_reproducible():
    runs = []
    for _ in range(2):
        b = build_aae(TOY)
        rng = make_rng(5)
        runs.append([train_step(b, toy_patches(8, i), rng, 1e-3)[1] for i in range(3)])
    assert runs[0] == runs[1]


def test_train_aae_logs_and_determinism(tmp_path):
    logs = [[], []]
    bundles = [train_aae(toy_patches(), AaeConfig(**{**TOY.__dict__}), logs[i]) for i in range(2)]
    assert len(logs[0]) == TOY.epochs and logs[0] == logs[1]
    for k, v in bundles[0].encoder.params.items():
        assert np.array_equal(v, bundles[1].encoder.params[k])
    write_epoch_log(tmp_path / "l.csv", logs[0])
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "epoch,rec_loss,disc_loss,gen_loss,lr"


def test_train_aae_rejects_empty():
    with pytest.raises(ValueError):
        train_aae(np.zeros((0, 16, 16, 3)), TOY)


def test_checkpoint_round_trip_resumes_identically(tmp_path):
    b = train_aae(toy_patches(), AaeConfig(**{**TOY.__dict__, "epochs": 1}))
    b.norm_lo, b.norm_hi = -3.0, 4.0
    save_aae(b, tmp_path / "aae")
    c = load_aae(tmp_path / "aae")
    assert (c.norm_lo, c.norm_hi, c.latent, c.patch_shape) == (-3.0, 4.0, 4, (16, 16, 3))
    la = train_step(b, toy_patches(8, 9), make_rng(1), 1e-3)[1]
    lc = train_step(c, toy_patches(8, 9), make_rng(1), 1e-3)[1]
    assert la == lc
    for k, v in b.encoder.params.items():
        assert np.array_equal(v, c.encoder.params[k])


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="aae.json"):
        load_aae(tmp_path)


def test_reconstruct_image_contract():
    b = build_aae(TOY)
    img = SarImage(np.random.default_rng(3).random((40, 37, 3)), Domain.NORMLOG)
    out = reconstruct_image(b, img)
    assert out.shape == img.shape and out.domain is Domain.NORMLOG
    assert np.array_equal(out.data, reconstruct_image(b, img).data)
    with pytest.raises(ValueError):
        reconstruct_image(b, SarImage(np.zeros((40, 40, 3)), Domain.LOG))
    with pytest.raises(ValueError):
        reconstruct_image(b, SarImage(np.zeros((8, 8, 3)), Domain.NORMLOG))


# --- behaviour after desk-scale training ------------------------------------------


@pytest.fixture(scope="module")
def scene_images(trained):
    m = trained["models"]
    scene = trained["scenes"][0]
    x = prepare_input(scene.noisy.intensity(), m.despeckler, m.aae.norm_lo, m.aae.norm_hi)
    return scene, x, reconstruct_image(m.aae, x)


def test_trained_rec_loss_halves(trained):
    log = trained["models"].aae_log
    assert len(log) >= 10
    assert log[-1].rec_loss < 0.5 * log[0].rec_loss


def test_trained_latent_equilibrium(trained, scene_images):
    m = trained["models"]
    _, x, _ = scene_images
    z = encode(m.aae, np.stack([p.data for p in extract_patches(x, 64, 16)]))
    assert 0.3 <= discriminate(m.aae, z).mean() <= 0.7
    assert np.abs(z.mean(axis=0)).max() < 0.3


def test_trained_background_reconstruction(scene_images):
    scene, x, xh = scene_images
    err = np.abs(x.data - xh.data).mean(axis=2)
    assert err[~scene.labels].mean() < 0.1


def test_trained_anomalies_reconstructed_poorly(scene_images):
    scene, x, xh = scene_images
    assert scene.labels.mean() < 0.01
    err = np.abs(x.data - xh.data).mean(axis=2)
    assert err[scene.labels].mean() > 3 * err[~scene.labels].mean()


def test_trained_bright_patterns_suppressed(scene_images):
    scene, x, xh = scene_images
    # patterns are stored row by row; the first row carries the brightest contrast
    for p in scene.patterns[:3]:
        fp = np.zeros_like(scene.labels)
        fp[p.row : p.row + p.size, p.col : p.col + p.size] = pattern_footprint(p.shape, p.size)
        assert xh.data[fp].max() < x.data[fp].max()
