import itertools

import numpy as np
import pytest

from gsbridge.core import Camera, GaussianSet
from gsbridge.gradcheck import numerical_grad, relative_error
from gsbridge.render import (
    SSIM_C1,
    gaussian_window,
    l1,
    psnr,
    rasterize,
    rasterize_backward,
    ssim,
    ssim_grad,
)


def front_camera(size=16, fov=50.0):
    return Camera.look_at((0.0, 0.0, -3.0), width=size, height=size, fov_deg=fov)


def random_scene(rng, n=2, spread=0.3):
    return GaussianSet(
        rng.uniform(-spread, spread, size=(n, 3)),
        rng.uniform(0.1, 0.9, size=(n, 3)),
        np.log(rng.uniform(0.08, 0.2, size=(n, 3))),
        rng.normal(size=(n, 4)),
        rng.uniform(-1.0, 2.0, size=n),
    )


class TestForward:
    def test_centered_opaque_gaussian(self):
        cam = Camera(20.0, 20.0, 8.0, 8.0, np.eye(3), [0, 0, 3.0], 17, 17)
        g = GaussianSet([[0.0, 0.0, 0.0]], [[0.2, 0.5, 0.7]], np.log([[0.1] * 3]), [[1, 0, 0, 0]], [12.0])
        out = rasterize(g, cam)
        np.testing.assert_allclose(out.image[8, 8], [0.2, 0.5, 0.7], atol=1e-3)
        assert out.alpha[8, 8] == out.alpha.max()

    def test_behind_camera_is_culled(self):
        cam = front_camera()
        g = GaussianSet([[0.0, 0.0, -5.0]], [[0, 0, 0]], np.log([[0.1] * 3]), [[1, 0, 0, 0]], [5.0])
        out = rasterize(g, cam, background=(0.25, 0.5, 1.0))
        assert out.all_culled
        np.testing.assert_array_equal(out.image, np.broadcast_to([0.25, 0.5, 1.0], out.image.shape))

    def test_two_term_compositing(self):
        cam = Camera(20.0, 20.0, 4.0, 4.0, np.eye(3), [0, 0, 3.0], 9, 9)
        front_col, back_col = np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.1, 0.9])
        g = GaussianSet([[0, 0, 0.5], [0, 0, -0.5]], [back_col, front_col], np.log([[0.1] * 3] * 2),
                        [[1, 0, 0, 0]] * 2, [0.3, -0.4])
        out = rasterize(g, cam, background=(0.0, 0.0, 0.0), cutoff=None)
        # At the center pixel the exponent is 0, so each alpha is the opacity.
        a_front, a_back = 1 / (1 + np.exp(0.4)), 1 / (1 + np.exp(-0.3))
        expected = front_col * a_front + back_col * a_back * (1 - a_front)
        np.testing.assert_allclose(out.image[4, 4], expected, atol=1e-12)

    def test_permutation_invariance_bit_exact(self):
        rng = np.random.default_rng(3)
        g = random_scene(rng, n=30)
        perm = rng.permutation(30)
        a = rasterize(g, front_camera(24))
        b = rasterize(g.subset(perm), front_camera(24))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.depth, b.depth)

    def test_weights_bounded(self):
        g = random_scene(np.random.default_rng(4), n=40)
        out = rasterize(g, front_camera(24), background=(0, 0, 0))
        assert np.all(out.alpha <= 1.0 + 1e-12) and np.all(out.alpha >= 0)

    def test_resolution_doubling_center_color(self):
        g = GaussianSet([[0.0, 0.0, 0.0]], [[0.3, 0.6, 0.2]], np.log([[0.2] * 3]), [[1, 0, 0, 0]], [3.0])
        lo = Camera(20.0, 20.0, 8.0, 8.0, np.eye(3), [0, 0, 3.0], 17, 17)
        hi = Camera(40.0, 40.0, 16.0, 16.0, np.eye(3), [0, 0, 3.0], 33, 33)
        np.testing.assert_allclose(rasterize(g, lo).image[8, 8], rasterize(g, hi).image[16, 16], atol=1e-3)

    def test_depth_of_opaque_surface(self):
        cam = Camera(20.0, 20.0, 8.0, 8.0, np.eye(3), [0, 0, 3.0], 17, 17)
        g = GaussianSet([[0.0, 0.0, 0.25]], [[0.5] * 3], np.log([[0.3] * 3]), [[1, 0, 0, 0]], [12.0])
        out = rasterize(g, cam)
        assert out.depth[8, 8] == pytest.approx(3.25, abs=1e-9)


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        g = random_scene(rng)
        cam = front_camera(16)
        target = rng.uniform(size=(16, 16, 3))

        def loss():
            img = rasterize(g, cam, cutoff=None, keep_cache=False).image
            return 0.5 * float(np.sum((img - target) ** 2))

        out = rasterize(g, cam, cutoff=None)
        grads = rasterize_backward(out, out.image - target)
        for name in ("positions", "colors", "log_scales", "rotations", "opacity_logits"):
            num = numerical_grad(loss, getattr(g, name), eps=1e-6)
            assert relative_error(getattr(grads, name), num) < 1e-4, name

    def test_color_gradient_sign(self):
        cam = Camera(20.0, 20.0, 4.0, 4.0, np.eye(3), [0, 0, 3.0], 9, 9)
        g = GaussianSet([[0, 0, 0]], [[0.8, 0.2, 0.5]], np.log([[0.1] * 3]), [[1, 0, 0, 0]], [2.0])
        target = np.full((9, 9, 3), 0.5)
        out = rasterize(g, cam, background=(0.5, 0.5, 0.5))
        grads = rasterize_backward(out, np.sign(out.image - target))
        assert grads.colors[0, 0] > 0 and grads.colors[0, 1] < 0

    def test_zero_image_gradient(self):
        g = random_scene(np.random.default_rng(5))
        out = rasterize(g, front_camera())
        grads = rasterize_backward(out, np.zeros((16, 16, 3)))
        for name in ("positions", "colors", "log_scales", "rotations", "opacity_logits"):
            assert not np.any(getattr(grads, name))


def direct_ssim(a, b, size=11, sigma=1.5):
    """Window-by-window SSIM with an explicit 2-D kernel."""
    w1 = gaussian_window(size, sigma)
    w2 = np.outer(w1, w1)
    vals = []
    for ch in range(a.shape[2]):
        for i, j in itertools.product(range(a.shape[0] - size + 1), range(a.shape[1] - size + 1)):
            pa, pb = a[i:i + size, j:j + size, ch], b[i:i + size, j:j + size, ch]
            ma, mb = np.sum(w2 * pa), np.sum(w2 * pb)
            va = np.sum(w2 * (pa - ma) ** 2)
            vb = np.sum(w2 * (pb - mb) ** 2)
            cov = np.sum(w2 * (pa - ma) * (pb - mb))
            vals.append(((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4)))
    return np.mean(vals)


class TestImageMetrics:
    def test_ssim_identity(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        assert ssim(img, img) == 1.0

    def test_ssim_constant_images(self):
        assert ssim(np.zeros((12, 12, 3)), np.ones((12, 12, 3))) == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-9)

    def test_ssim_direct_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(16, 14, 3)), rng.uniform(size=(16, 14, 3))
        assert abs(ssim(a, b) - direct_ssim(a, b)) < 1e-8

    def test_ssim_gradient(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(13, 12, 1)), rng.uniform(size=(13, 12, 1))
        _, grad = ssim_grad(a, b)
        num = numerical_grad(lambda: ssim(a, b), a)
        assert relative_error(grad, num) < 1e-5

    def test_ssim_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((12, 12)), np.zeros((12, 13)))

    def test_psnr_and_l1(self):
        img = np.full((4, 4, 3), 0.3)
        assert psnr(img, img) == 100.0
        assert l1(img, img) == 0.0
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)

    def test_psnr_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
        total = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(-10 * np.log10(total), rel=1e-12)
        assert l1(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size)
