import numpy as np
import pytest

from handadapt import autodiff as ad
from handadapt import nethead as nh
from handadapt.autodiff import Tensor


@pytest.fixture(scope="module")
def net():
    return nh.build_network(seed=0)


def test_same_seed_bitwise_equal():
    a, b = nh.build_network(seed=3), nh.build_network(seed=3)
    assert a.blocks.keys() == b.blocks.keys()
    assert all(np.array_equal(a.blocks[k], b.blocks[k]) for k in a.blocks)


def test_different_seeds_differ_same_shapes():
    a, b = nh.build_network(seed=1), nh.build_network(seed=2)
    assert all(a.blocks[k].shape == b.blocks[k].shape for k in a.blocks)
    assert any(not np.array_equal(a.blocks[k], b.blocks[k]) for k in a.blocks)


def test_branch_partition_is_disjoint_and_complete(net):
    parts = [set(net.branch(b)) for b in nh.BRANCHES]
    assert set().union(*parts) == set(net.blocks)
    assert sum(len(p) for p in parts) == len(net.blocks)


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        nh.build_network(nh.ArchConfig(image_size=30))
    with pytest.raises(ValueError):
        nh.build_network(nh.ArchConfig(width1=0))


def test_output_shapes(net):
    pred = nh.forward(net, np.zeros((2, 32, 32, 3)))
    assert pred.heatmaps.shape == (2, 21, 16, 16)
    assert pred.mask_logits.shape == (2, 32, 32)
    assert pred.mask_prob.shape == (2, 32, 32)


def test_zero_image_finite(net):
    pred = nh.forward(net, np.zeros((32, 32, 3)))
    assert np.all(np.isfinite(pred.heatmaps.data)) and np.all(np.isfinite(pred.mask_logits.data))


def test_batch_independence_bitwise(net):
    x = np.random.default_rng(0).random((2, 32, 32, 3))
    both = nh.forward(net, x)
    one = [nh.forward(net, x[i:i + 1]) for i in range(2)]
    assert np.array_equal(both.heatmaps.data, np.concatenate([o.heatmaps.data for o in one]))
    assert np.array_equal(both.mask_logits.data, np.concatenate([o.mask_logits.data for o in one]))


def test_output_ranges_random_sweep(net):
    x = np.random.default_rng(1).random((100, 32, 32, 3))
    out = nh.predict(net, x)
    for key in ("heatmaps", "mask_prob"):
        assert np.all(np.isfinite(out[key]))
        assert out[key].min() >= 0.0 and out[key].max() <= 1.0


def test_forward_is_pure(net):
    x = np.random.default_rng(2).random((3, 32, 32, 3))
    before = {k: v.copy() for k, v in net.blocks.items()}
    a, b = nh.forward(net, x), nh.forward(net, x)
    assert np.array_equal(a.heatmaps.data, b.heatmaps.data)
    assert all(np.array_equal(before[k], net.blocks[k]) for k in before)


def test_nan_reports_layer(net):
    bad = net.copy()
    bad.blocks["backbone.conv2.w"][0, 0, 0, 0] = np.inf
    with pytest.raises(ad.NonFiniteError, match="forward"):
        nh.forward(bad, np.ones((1, 32, 32, 3)))


def test_wrong_image_shape(net):
    with pytest.raises(ad.ShapeError):
        nh.forward(net, np.zeros((1, 28, 28, 3)))


def test_pose_loss_leaves_mask_branch_gradient_zero(net):
    x = np.random.default_rng(3).random((2, 32, 32, 3))
    _, g = ad.grad(lambda p: ad.mean(nh.forward(p, x).heatmaps), net.blocks)
    for k in net.branch("mask"):
        assert not np.any(g[k])
    assert any(np.any(g[k]) for k in net.branch("pose"))


# heatmap coding -----------------------------------------------------------------------

def test_encode_peak_on_cell():
    # grid cell (5, 7) has its centre at image pixel (2*5 + 0.5, 2*7 + 0.5)
    heat, inside = nh.encode_heatmaps(np.array([[10.5, 14.5]]), sigma=1.5)
    assert heat[0, 7, 5] == 1.0
    assert heat.max() == 1.0 and inside[0]


def test_encode_value_at_sigma():
    heat, _ = nh.encode_heatmaps(np.array([[10.5, 14.5]]), sigma=2.0)
    # two cells to the right is one sigma away
    assert abs(heat[0, 7, 7] - np.exp(-0.5)) < 1e-12
    assert abs(heat[0, 7, 7] - 0.6065) < 1e-4


def test_encode_no_crosstalk():
    coords = np.array([[4.5, 4.5], [24.5, 20.5]])
    two, _ = nh.encode_heatmaps(coords)
    a, _ = nh.encode_heatmaps(coords[:1])
    b, _ = nh.encode_heatmaps(coords[1:])
    assert np.array_equal(two[0], a[0]) and np.array_equal(two[1], b[0])


def test_encode_out_of_frame_flagged():
    heat, inside = nh.encode_heatmaps(np.array([[-3.0, 10.0], [10.0, 10.0]]))
    assert list(inside) == [False, True]
    assert heat.shape == (2, 16, 16) and np.all(np.isfinite(heat))


def test_encode_rejects_bad_sigma():
    with pytest.raises(ValueError):
        nh.encode_heatmaps(np.zeros((1, 2)), sigma=0.0)


@pytest.mark.parametrize("cell", [(0, 0), (3, 11), (15, 15), (8, 2)])
def test_decode_one_hot(cell):
    i, j = cell  # (x cell, y cell)
    h = np.zeros((1, 16, 16))
    h[0, j, i] = 1.0
    c, valid = nh.decode_keypoints(h, temperature=0.05)
    assert np.linalg.norm(c[0] - [2 * i + 0.5, 2 * j + 0.5]) <= 0.51
    assert valid[0]


def test_decode_uniform_is_centre():
    c, valid = nh.decode_keypoints(np.full((1, 16, 16), 0.3), 0.05)
    assert np.allclose(c[0], [15.5, 15.5], atol=1e-12) and valid[0]


def test_decode_all_zero_flagged():
    c, valid = nh.decode_keypoints(np.zeros((2, 16, 16)), 0.05)
    assert not valid.any()
    assert np.allclose(c, 15.5)


def test_decode_two_peaks_midpoint():
    h = np.zeros((1, 16, 16))
    h[0, 4, 3] = h[0, 10, 12] = 1.0
    c, _ = nh.decode_keypoints(h, 0.05)
    mid = (np.array([6.5, 8.5]) + np.array([24.5, 20.5])) / 2
    assert np.allclose(c[0], mid, atol=1e-6)


def test_decode_rejects_bad_temperature():
    with pytest.raises(ValueError):
        nh.decode_keypoints(np.zeros((1, 16, 16)), 0.0)


def test_round_trip_within_one_cell():
    arch = nh.ArchConfig()
    rng = np.random.default_rng(4)
    margin = 2 * 2 * arch.sigma  # 2 sigma, in image pixels
    coords = rng.uniform(margin, 31 - margin, size=(200, 2))
    heat, _ = nh.encode_heatmaps(coords, arch.sigma)
    dec, _ = nh.decode_keypoints(heat, arch.temperature)
    assert np.max(np.linalg.norm(dec - coords, axis=-1)) < 2.0


def test_grid_mapping_inverse():
    c = np.random.default_rng(5).uniform(0, 31, size=(10, 2))
    assert np.allclose(nh.grid_to_image(nh.image_to_grid(c)), c)


def test_prediction_detach_breaks_graph(net):
    pred = nh.forward(net.blocks | {}, np.zeros((1, 32, 32, 3)))
    d = pred.detach()
    assert isinstance(d.heatmaps, Tensor) and d.heatmaps._parents == ()
