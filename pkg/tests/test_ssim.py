import numpy as np
import pytest

from staticsplat.ssim import ssim, ssim_and_grad, ssim_map


def test_identical_images_score_one(rng):
    img = rng.uniform(size=(20, 17, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert ssim(img, img, rng.uniform(size=(20, 17))) == pytest.approx(1.0, abs=1e-12)


def test_symmetric_and_bounded(rng):
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    m = ssim_map(a, b)
    assert np.all(m <= 1 + 1e-12) and np.all(m >= -1 - 1e-12)


def test_zero_weight_counts_as_perfect(rng):
    a, b = rng.uniform(size=(2, 8, 8, 3))
    assert ssim(a, b, np.zeros((8, 8))) == 1.0


@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_finite_differences(rng, weighted):
    x, y = rng.uniform(size=(2, 12, 12, 3))
    w = rng.uniform(size=(12, 12)) if weighted else None
    _, g = ssim_and_grad(x, y, w)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (ssim(xp, y, w) - ssim(xm, y, w)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6
