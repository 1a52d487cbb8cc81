import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cuenav.augment import (BRIGHTNESS_TARGET, AugmentConfig, BackgroundPool, GroundTexture, adjust_brightness,
                            augment_sample, blur_foreground, blur_image, composite, gaussian_kernel,
                            jitter_foreground, make_ood_proxy, normalize_brightness, rotate_hue, sample_triplet)
from cuenav.worldgen import CameraModel, generate_world, render

RES = 16


def random_image(rng, res=RES):
    return rng.uniform(0, 1, (res, res, 3)).astype(np.float32)


def random_mask(rng, res=RES, p=0.3):
    return (rng.uniform(size=(res, res)) < p).astype(np.uint8)


@pytest.fixture(scope="module")
def pool():
    return BackgroundPool("texture+scene", resolution=RES, size=12, seed=1)


@pytest.fixture(scope="module")
def cue_samples():
    cam = CameraModel(resolution=RES)
    imgs, masks = [], []
    for seed in range(4):
        w = generate_world(seed)
        p = w.point_at(0.7)[0]
        img, m = render(w, cam.at((p[0], p[1], 1.0, 0.2 * seed)))
        imgs.append(img)
        masks.append(m)
    return np.stack(imgs), np.stack(masks)


class TestComposite:
    def test_all_ones_gives_foreground(self):
        rng = np.random.default_rng(0)
        c, a = random_image(rng), random_image(rng)
        assert np.array_equal(composite(np.ones((RES, RES)), c, a), c)

    def test_all_zeros_gives_background(self):
        rng = np.random.default_rng(1)
        c, a = random_image(rng), random_image(rng)
        assert np.array_equal(composite(np.zeros((RES, RES)), c, a), a)

    def test_checkerboard_selects_per_pixel(self):
        rng = np.random.default_rng(2)
        c, a = random_image(rng), random_image(rng)
        m = np.indices((RES, RES)).sum(axis=0) % 2
        out = composite(m, c, a)
        for i in range(RES):
            for j in range(RES):
                assert np.array_equal(out[i, j], c[i, j] if m[i, j] else a[i, j])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_recomposite_is_stable(self, seed):
        rng = np.random.default_rng(seed)
        m, c, a = random_mask(rng), random_image(rng), random_image(rng)
        once = composite(m, c, a)
        assert np.array_equal(composite(m, once, a), once)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            composite(np.ones((RES, RES)), np.zeros((RES, RES, 3)), np.zeros((RES, RES + 1, 3)))
        with pytest.raises(ValueError):
            composite(np.ones((RES, 3)), np.zeros((RES, RES, 3)), np.zeros((RES, RES, 3)))


class TestJitter:
    def test_zero_factors_identity(self):
        rng = np.random.default_rng(0)
        img, m = random_image(rng), random_mask(rng)
        assert np.array_equal(jitter_foreground(img, m, 0.0, 0.0, seed=3), img)

    def test_unit_brightness_identity(self):
        rng = np.random.default_rng(1)
        img, m = random_image(rng), random_mask(rng)
        assert np.array_equal(adjust_brightness(img, m, 1.0), img)

    def test_full_turn_hue_identity(self):
        rng = np.random.default_rng(2)
        img, m = random_image(rng), np.ones((RES, RES), np.uint8)
        np.testing.assert_allclose(rotate_hue(img, m, 2 * math.pi), img, atol=1e-5)

    def test_hue_matches_colorsys(self):
        rgb = np.array([[[0.8, 0.3, 0.1]]], dtype=np.float64)
        out = rotate_hue(rgb, np.ones((1, 1)), math.pi / 3)[0, 0]
        h, s, v = colorsys.rgb_to_hsv(*rgb[0, 0])
        np.testing.assert_allclose(out, colorsys.hsv_to_rgb((h + 1 / 6) % 1.0, s, v), atol=1e-9)

    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_background_untouched_and_range(self, seed, fb, fh):
        rng = np.random.default_rng(seed)
        img, m = random_image(rng), random_mask(rng)
        out = jitter_foreground(img, m, fb, fh, seed=seed)
        assert np.array_equal(out[m == 0], img[m == 0])
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_brightness_draw_range(self):
        img = np.full((RES, RES, 3), 0.4, np.float32)
        m = np.ones((RES, RES), np.uint8)
        scales = [jitter_foreground(img, m, 0.5, 0.0, seed=s)[0, 0, 0] / 0.4 for s in range(200)]
        assert min(scales) >= 0.5 - 1e-6 and max(scales) <= 1.5 + 1e-6
        assert max(scales) - min(scales) > 0.8

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            jitter_foreground(np.zeros((2, 2, 3)), np.ones((2, 2)), 1.5, 0.0)

    def test_seeded(self):
        rng = np.random.default_rng(4)
        img, m = random_image(rng), random_mask(rng)
        assert np.array_equal(jitter_foreground(img, m, seed=9), jitter_foreground(img, m, seed=9))


class TestBlur:
    def test_constant_unchanged(self):
        img = np.full((RES, RES, 3), 0.3)
        np.testing.assert_allclose(blur_foreground(img, seed=1), img, atol=1e-12)

    def test_small_sigma_preserves_energy(self):
        img = np.zeros((RES, RES, 3))
        img[8, 8] = 1.0
        out = blur_image(img, 0.1)
        assert out.sum() / 3 == pytest.approx(1.0, abs=1e-4)

    def test_sigma_two_matches_sampled_gaussian(self):
        img = np.zeros((21, 21, 1))
        img[10, 10, 0] = 1.0
        out = blur_image(img, 2.0, 9)[..., 0]
        ys, xs = np.mgrid[-4:5, -4:5]
        g = np.exp(-(xs ** 2 + ys ** 2) / (2 * 2.0 ** 2))
        g /= g.sum()
        expected = np.zeros((21, 21))
        expected[6:15, 6:15] = g
        np.testing.assert_allclose(out, expected, atol=1e-6, rtol=0)

    def test_kernel_normalized(self):
        for sigma in (0.1, 0.7, 2.0):
            assert gaussian_kernel(sigma).sum() == pytest.approx(1.0, abs=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            blur_foreground(np.zeros((4, 4, 3)), kernel=8)

    def test_seeded(self):
        img = random_image(np.random.default_rng(0))
        assert np.array_equal(blur_foreground(img, seed=5), blur_foreground(img, seed=5))


class TestBackgroundPool:
    def test_same_seed_same_items(self):
        a = BackgroundPool("scene", resolution=RES, size=4, seed=3)
        b = BackgroundPool("scene", resolution=RES, size=4, seed=3)
        for i in range(4):
            assert np.array_equal(a.get(i, 5), b.get(i, 5))

    def test_families_differ(self):
        t = BackgroundPool("texture", resolution=RES, size=2, seed=0).get(0)
        s = BackgroundPool("scene", resolution=RES, size=2, seed=0).get(0)
        assert not np.array_equal(t, s)

    def test_range_and_shape(self, pool):
        assert len(pool) == 12
        for i in range(len(pool)):
            bg = pool.get(i)
            assert bg.shape == (RES, RES, 3) and bg.min() >= 0 and bg.max() <= 1

    def test_directory_source(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(3):
            Image.fromarray((rng.uniform(size=(40, 60, 3)) * 255).astype(np.uint8)).save(tmp_path / f"{i}.png")
        p = BackgroundPool(str(tmp_path), resolution=RES)
        assert len(p) == 3 and p.get(0).shape == (RES, RES, 3)

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            BackgroundPool("nowhere-at-all", resolution=RES)


class TestTriplets:
    def test_invariants_over_1000_seeds(self, cue_samples, pool):
        imgs, masks = cue_samples
        cfg = AugmentConfig(brightness=0.5, hue=0.5, blur=True)
        for seed in range(1000):
            t = sample_triplet(imgs, masks, pool, seed, cfg)
            fg = t.mask == 1
            assert np.array_equal(t.anchor[fg], t.positive[fg])
            bg = (t.mask == 0) & (t.negative_mask == 0)
            assert np.array_equal(t.anchor[bg], t.negative[bg])
            assert t.indices[0] != t.indices[1] and t.backgrounds[0] != t.backgrounds[1]

    def test_deterministic(self, cue_samples, pool):
        imgs, masks = cue_samples
        for seed in range(100):
            a, b = sample_triplet(imgs, masks, pool, seed), sample_triplet(imgs, masks, pool, seed)
            assert a.anchor.tobytes() == b.anchor.tobytes()
            assert a.positive.tobytes() == b.positive.tobytes()
            assert a.negative.tobytes() == b.negative.tobytes()

    def test_ideal_segmenter_agrees(self, cue_samples, pool):
        imgs, masks = cue_samples
        t = sample_triplet(imgs, masks, pool, 0)
        # an ideal segmenter outputs the source mask; anchor and positive share it
        assert t.mask is not None and np.array_equal(t.mask, masks[t.indices[0]])

    def test_pool_too_small(self, cue_samples):
        imgs, masks = cue_samples
        tiny = BackgroundPool("scene", resolution=RES, size=1)
        with pytest.raises(ValueError):
            sample_triplet(imgs, masks, tiny, 0)
        with pytest.raises(ValueError):
            sample_triplet(imgs[:1], masks[:1], BackgroundPool("scene", resolution=RES, size=2), 0)


class TestPipeline:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_shape_and_range(self, seed):
        rng = np.random.default_rng(seed)
        img, m = random_image(rng), random_mask(rng)
        p = BackgroundPool("texture", resolution=RES, size=3, seed=0)
        out = augment_sample(img, m, AugmentConfig("texture", 0.5, 0.5, True), p, rng)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_disabled_is_identity(self):
        img, m = random_image(np.random.default_rng(0)), random_mask(np.random.default_rng(0))
        assert not AugmentConfig().enabled
        assert np.array_equal(augment_sample(img, m, AugmentConfig(), None, np.random.default_rng(0)), img)


class TestNormalizeBrightness:
    def test_already_at_target(self):
        img = np.full((RES, RES, 3), BRIGHTNESS_TARGET, np.float64)
        out, flagged = normalize_brightness(img)
        np.testing.assert_allclose(out, img, atol=1e-6)
        assert not flagged

    def test_constant_gray(self):
        out, _ = normalize_brightness(np.full((4, 4, 3), 0.25))
        np.testing.assert_allclose(out, 0.549, atol=1e-3)
        np.testing.assert_allclose(out, 140 / 255, atol=1e-9)

    def test_black_flagged(self):
        img = np.zeros((4, 4, 3))
        out, flagged = normalize_brightness(img)
        assert flagged and np.array_equal(out, img)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_hits_target_despite_clipping(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 1, (RES, RES, 3)) ** rng.uniform(0.3, 3)
        out, _ = normalize_brightness(img)
        assert abs(out.mean() - BRIGHTNESS_TARGET) < 1e-3
        assert out.min() >= 0 and out.max() <= 1


class TestOODAndGround:
    def test_ood_proxy_shapes(self):
        imgs, masks = make_ood_proxy(n=3, seed=1, resolution=RES * 2)
        assert imgs.shape == (3, 32, 32, 3) and masks.shape == (3, 32, 32)
        assert masks.any(axis=(1, 2)).all()

    def test_ood_proxy_deterministic(self):
        a, _ = make_ood_proxy(n=2, seed=2, resolution=32)
        b, _ = make_ood_proxy(n=2, seed=2, resolution=32)
        assert a.tobytes() == b.tobytes()

    def test_ground_view_moves_with_camera(self):
        g = GroundTexture.generate("scene", seed=0, size=64)
        cam = CameraModel(resolution=32)
        here = g.view(cam.at((0.0, 0.0, 1.0, 0.0)))
        there = g.view(cam.at((0.3, 0.0, 1.0, 0.0)))
        again = g.view(cam.at((g.extent, 0.0, 1.0, 0.0)))
        assert not np.allclose(here, there)
        np.testing.assert_allclose(here, again, atol=1e-5)

    def test_ground_rejects_unknown_family(self):
        with pytest.raises(ValueError):
            GroundTexture.generate("ocean")
