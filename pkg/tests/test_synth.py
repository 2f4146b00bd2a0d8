import numpy as np
import pytest

from staticsplat.align import AlignSchedule, AlignState, AlignWeights, optimize_alignment
from staticsplat.geometry import depth_to_pointmap, induced_flow, relative_pose
from staticsplat.masks import aggregate_all
from staticsplat.synth import SceneSpec, corrupt_masks, generate, perturb_poses

SMALL = dict(width=32, height=24, num_frames=5)


@pytest.fixture(scope="module")
def dataset():
    return generate(SceneSpec(**SMALL, seed=2))


def test_no_dynamic_objects_means_empty_masks():
    ds = generate(SceneSpec(**SMALL, num_dynamic=0, seed=1))
    assert not ds.masks.any()
    assert np.array_equal(ds.images, ds.static_images)
    assert all(not p.M_nn.any() for p in ds.graph.predictions.values())


def test_static_camera_flow_lives_on_the_moving_object():
    base = generate(SceneSpec(**SMALL, seed=3))
    ds = generate(SceneSpec(**SMALL, seed=3), poses=[base.poses[0]] * 5)
    flow = ds.windows.flows[(0, 1)]
    moving = np.linalg.norm(flow.flow, axis=-1) > 1e-9
    assert ds.masks[0].any()
    assert np.array_equal(moving & flow.valid, (ds.masks[0] > 0) & flow.valid)


def test_ground_truth_flow_is_induced_flow_on_static_pixels(dataset):
    ds = dataset
    for t, t2 in ds.windows.pairs():
        est = ds.windows.flows[(t, t2)]
        ind = induced_flow(ds.depths[t], ds.poses[t], ds.poses[t2], ds.intr)
        keep = est.valid & ind.valid & (ds.masks[t] == 0)
        assert np.abs(est.flow - ind.flow)[keep].max() < 1e-9


def test_pair_pointmaps_are_exact(dataset):
    ds = dataset
    for (n, m), pred in ds.graph.predictions.items():
        expected = relative_pose(ds.poses[n], ds.poses[m]).apply(depth_to_pointmap(ds.depths[m], ds.intr))
        assert np.array_equal(pred.X_mn, expected)
        assert np.array_equal(pred.X_nn, depth_to_pointmap(ds.depths[n], ds.intr))


def test_noise_free_alignment_at_ground_truth(dataset):
    ds = dataset
    masks = aggregate_all(ds.graph.edges, ds.graph.pair_masks(), ds.num_frames)
    gt = AlignState.from_poses(ds.poses, ds.depths, ds.intr, len(ds.graph))
    res = optimize_alignment(ds.graph, ds.windows, masks, AlignWeights(w_smooth=0.0),
                             AlignSchedule(iterations=3), init=gt)
    assert res.trace[0]["total"] < 1e-8
    assert res.trace[res.best_iteration]["total"] < 1e-8


def test_generation_is_deterministic():
    a = generate(SceneSpec(**SMALL, seed=4, mask_fp_rate=0.2, pointmap_noise=0.01))
    b = generate(SceneSpec(**SMALL, seed=4, mask_fp_rate=0.2, pointmap_noise=0.01))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.depths, b.depths)
    for e in a.graph.edges:
        assert np.array_equal(a.graph.predictions[e].X_mn, b.graph.predictions[e].X_mn)
        assert np.array_equal(a.graph.predictions[e].M_nn, b.graph.predictions[e].M_nn)


@pytest.mark.parametrize("target", [0.1, 0.3])
def test_dynamic_coverage_hits_target(target):
    ds = generate(SceneSpec(width=48, height=48, num_frames=6, dynamic_coverage=target, seed=0))
    assert abs(ds.masks.mean() - target) <= 0.05


def test_spec_validation_names_the_field():
    with pytest.raises(ValueError, match="dynamic_coverage"):
        generate(SceneSpec(dynamic_coverage=0.95))
    with pytest.raises(ValueError, match="num_frames"):
        generate(SceneSpec(num_frames=1))


# ---------------------------------------------------------------------------
# corrupt_masks


def test_corruption_with_zero_rates_is_identity(rng):
    masks = (rng.uniform(size=(3, 16, 16)) > 0.5).astype(float)
    assert np.array_equal(corrupt_masks(masks, 0, 0, seed=1), masks)


def test_full_false_positive_rate_marks_everything_dynamic(rng):
    masks = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    assert np.all(corrupt_masks(masks, 1.0, 0.0, seed=1) == 1.0)


def test_false_positive_fraction():
    out = corrupt_masks(np.zeros((256, 256)), 0.1, 0.0, seed=7)
    assert abs(out.mean() - 0.1) <= 0.03


def test_corruption_comes_in_blocks():
    out = corrupt_masks(np.zeros((64, 64)), 0.3, 0.0, seed=3)
    blocks = out.reshape(8, 8, 8, 8)
    assert np.all(blocks.min(axis=(1, 3)) == blocks.max(axis=(1, 3)))


def test_corruption_rejects_bad_rates():
    with pytest.raises(ValueError):
        corrupt_masks(np.zeros((8, 8)), 1.5, 0.0, seed=0)


def test_perturbation_has_exact_magnitude(dataset):
    moved = perturb_poses(dataset.poses, 1.0, 0.02, seed=0)
    for a, b in zip(dataset.poses, moved):
        assert np.degrees(np.arccos(np.clip((np.trace(a.R.T @ b.R) - 1) / 2, -1, 1))) == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(a.t - b.t) == pytest.approx(0.02, abs=1e-12)
