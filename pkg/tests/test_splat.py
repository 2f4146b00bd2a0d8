import numpy as np
import pytest

from instances import random_cloud, render_gradient_errors
from staticsplat.geometry import Intrinsics, Pose
from staticsplat.splat import (
    COV2D_DILATION,
    GaussianCloud,
    project_cloud,
    project_gaussian,
    render,
    render_backward,
    render_forward,
    staticness_to_logit,
)

INTR = Intrinsics.centered(16.0, 16, 16)
ALWAYS = 40.0  # expit(40) rounds to exactly 1.0 in double precision
NEVER = -1000.0  # expit(-1000) is exactly 0.0


def single(mu, scale=0.1, color=(1.0, 0.0, 0.0), opacity_logit=0.0, staticness_logit=ALWAYS) -> GaussianCloud:
    return GaussianCloud(mu=[mu], log_scale=[np.log(np.broadcast_to(scale, 3))], rotation=[[1.0, 0, 0, 0]],
                         color=[color], opacity_logit=[opacity_logit], staticness_logit=[staticness_logit])


def concat(*clouds: GaussianCloud) -> GaussianCloud:
    names = ("mu", "log_scale", "rotation", "color", "opacity_logit", "staticness_logit")
    return GaussianCloud(**{k: np.concatenate([getattr(c, k) for c in clouds]) for k in names})


# ---------------------------------------------------------------------------
# projection


def test_isotropic_on_axis_projects_to_scaled_identity():
    sigma, z = 0.2, 3.0
    _, cov, depth = project_gaussian(single([0, 0, z], sigma), 0, Pose.identity(), INTR)
    expected = (INTR.fx * sigma / z) ** 2 + COV2D_DILATION
    assert depth == z
    assert np.allclose(cov, expected * np.eye(2), atol=1e-6)


def test_behind_camera_is_culled():
    assert project_gaussian(single([0, 0, -1.0]), 0, Pose.identity(), INTR) is None
    assert project_gaussian(single([0, 0, 0.0]), 0, Pose.identity(), INTR) is None


def test_doubling_depth_halves_projected_std(rng):
    cloud = random_cloud(rng, 1)
    cloud.mu[0] = [0.1, -0.05, 2.0]
    near = project_cloud(cloud, Pose.identity(), INTR)
    cloud.mu[0] *= 2.0
    far = project_cloud(cloud, Pose.identity(), INTR)

    def raw(p):  # screen covariance before the anti-aliasing dilation
        return p.J[0] @ p.cov_cam[0] @ p.J[0].T

    assert np.allclose(np.sqrt(np.linalg.eigvalsh(raw(far))), 0.5 * np.sqrt(np.linalg.eigvalsh(raw(near))), atol=1e-6)


# ---------------------------------------------------------------------------
# forward


def test_opaque_gaussian_at_pixel_center():
    intr = Intrinsics(16.0, 16.0, 7.0, 7.0, 16, 16)
    img = render(single([0, 0, 2.0], opacity_logit=12.0), Pose.identity(), intr).image
    assert np.allclose(img[7, 7], [0.999, 0, 0], atol=1e-5)


def test_empty_overlap_is_black():
    img = render(single([100.0, 0, 2.0]), Pose.identity(), INTR)
    assert np.all(img.image == 0)
    assert np.all(img.transmittance == 1)


def test_empty_cloud_is_rejected():
    with pytest.raises(ValueError):
        render(random_cloud(np.random.default_rng(0), 0), Pose.identity(), INTR)


def test_unknown_mode_is_rejected(rng):
    with pytest.raises(ValueError, match="mode"):
        render(random_cloud(rng), Pose.identity(), INTR, "additive")


def test_all_static_equals_plain(rng):
    cloud = random_cloud(rng, 30)
    cloud.staticness_logit[:] = ALWAYS
    a = render(cloud, Pose.identity(), INTR, "staticness")
    b = render(cloud, Pose.identity(), INTR, "plain")
    assert np.array_equal(a.image, b.image)


def test_zero_staticness_removes_gaussian(rng):
    cloud = random_cloud(rng, 30)
    cloud.staticness_logit[7] = NEVER
    with_it = render(cloud, Pose.identity(), INTR).image
    without = render(cloud.subset(np.arange(30) != 7), Pose.identity(), INTR).image
    assert np.array_equal(with_it, without)


def test_storage_order_does_not_matter(rng):
    cloud = random_cloud(rng, 40)
    cloud.mu[5] = cloud.mu[3]  # an exact depth tie
    perm = rng.permutation(40)
    a = render(cloud, Pose.identity(), INTR).image
    b = render(cloud.subset(perm), Pose.identity(), INTR).image
    assert np.abs(a - b).max() <= 1e-7


def test_lower_staticness_never_raises_own_weight(rng):
    cloud = random_cloud(rng, 10)
    cloud.color[:] = 0.0
    cloud.color[4] = 1.0  # the red channel now isolates Gaussian 4's blending weight
    weights = []
    for s in (0.99, 0.7, 0.4, 0.1, 0.0):
        cloud.staticness_logit[4] = staticness_to_logit(s, eps=0.0) if s > 0 else NEVER
        weights.append(render(cloud, Pose.identity(), INTR).image[..., 0])
    for hi, lo in zip(weights[:-1], weights[1:]):
        assert np.all(lo <= hi + 1e-15)


def test_staticness_logit_clamp():
    assert staticness_to_logit(np.array([0.0, 1.0])) == pytest.approx([-9.21024, 9.21024], abs=1e-4)
    assert np.isfinite(staticness_to_logit(np.array([0.0, 1.0]), eps=1e-12)).all()


# ---------------------------------------------------------------------------
# backward


def test_zero_upstream_gives_zero_gradients(rng):
    ctx = render_forward(random_cloud(rng), Pose.identity(), INTR)
    g = render_backward(ctx, np.zeros((16, 16, 3)))
    for name in ("mu", "log_scale", "rotation", "color", "opacity_logit", "staticness_logit", "pose_q", "pose_t"):
        assert not np.any(getattr(g, name)), name


@pytest.mark.parametrize("mode", ["plain", "staticness"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(mode, seed):
    errors = render_gradient_errors(np.random.default_rng(seed), mode)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_occluded_gaussian_gets_no_staticness_gradient(rng):
    # the 0.999 alpha cap leaves 1e-3 transmittance per layer, so two opaque layers hide everything behind
    wall = [single([0, 0, 1.0 + 0.01 * k], scale=20.0, color=(0.5, 0.5, 0.5), opacity_logit=12.0) for k in range(2)]
    hidden = single([0.05, 0.02, 3.0], scale=0.2, staticness_logit=0.3)
    cloud = concat(*wall, hidden)
    ctx = render_forward(cloud, Pose.identity(), INTR)
    g = render_backward(ctx, rng.normal(size=(16, 16, 3)))
    assert abs(g.staticness_logit[2]) < 1e-8


def test_occluded_gaussian_behind_single_layer_still_receives_gradient(rng):
    wall = single([0, 0, 1.0], scale=20.0, color=(0.5, 0.5, 0.5), opacity_logit=12.0)
    cloud = concat(wall, single([0.05, 0.02, 3.0], scale=0.2, staticness_logit=0.3))
    g = render_backward(render_forward(cloud, Pose.identity(), INTR), np.ones((16, 16, 3)))
    assert abs(g.staticness_logit[1]) > 1e-8

