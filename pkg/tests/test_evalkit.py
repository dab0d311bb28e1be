import json

import numpy as np
import pytest

from handadapt import evalkit as ev


# keypoint metrics -------------------------------------------------------------

def test_mpe_examples():
    gt = np.random.default_rng(0).uniform(0, 31, size=(21, 2))
    assert ev.mpe(gt, gt) == 0.0
    assert ev.mpe(gt + [3.0, 4.0], gt) == pytest.approx(5.0)
    off = gt.copy()
    off[3, 0] += 10.0
    assert ev.mpe(off, gt) == pytest.approx(10 / 21, abs=1e-12)
    assert ev.mpe(off, gt) == pytest.approx(0.47619, abs=1e-5)


def test_mpe_exclusion():
    gt = np.zeros((3, 2))
    pred = np.array([[0.0, 0.0], [3.0, 4.0], [100.0, 0.0]])
    assert ev.mpe(pred, gt, include=[True, True, False]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        ev.mpe(pred, gt, include=[False, False, False])


def test_pck_examples():
    assert ev.pck_auc(np.zeros(21)) == 100.0
    assert ev.pck_auc(np.full(21, 20.5)) == 0.0
    assert list(ev.pck_thresholds()) == list(np.arange(1.0, 21.0))
    assert ev.pck_auc([10.0]) == pytest.approx(55.0)


def test_pck_monotone_in_one_error():
    rng = np.random.default_rng(1)
    e = rng.uniform(0, 25, size=21)
    prev = ev.pck_auc(e)
    for bump in np.linspace(0, 30, 61):
        cur = e.copy()
        cur[7] += bump
        val = ev.pck_auc(cur)
        assert val <= prev + 1e-12
        prev = val


def test_pck_rejects_negative():
    with pytest.raises(ValueError):
        ev.pck_auc([-1.0])


def test_iou_examples():
    a = np.zeros((4, 4))
    a[0, :] = 1
    assert ev.iou(a, a) == (100.0, False)
    b = np.zeros((4, 4))
    b[3, :] = 1
    assert ev.iou(a, b)[0] == 0.0
    c = np.zeros((4, 4))
    c[0, 2:] = 1
    c[1, :2] = 1
    assert ev.iou(a, c)[0] == pytest.approx(100 / 3)
    assert ev.iou(np.zeros((4, 4)), np.zeros((4, 4))) == (100.0, True)


def test_iou_permutation_invariant():
    rng = np.random.default_rng(2)
    p, g = rng.random((8, 8)), (rng.random((8, 8)) > 0.5)
    perm = rng.permutation(64)
    assert ev.iou(p, g)[0] == pytest.approx(ev.iou(p.reshape(-1)[perm], g.reshape(-1)[perm])[0])


def test_evaluate_on_ground_truth():
    rng = np.random.default_rng(3)
    kp = rng.uniform(0, 31, size=(5, 21, 2))
    masks = (rng.random((5, 32, 32)) > 0.5).astype(np.uint8)
    rec = ev.evaluate(kp, masks.astype(float), kp, masks)
    assert (rec.mpe_px, rec.pck_auc, rec.iou, rec.avg) == (0.0, 100.0, 100.0, 100.0)
    assert len(rec.per_instance) == 5


def test_avg_is_mean_of_components():
    rng = np.random.default_rng(4)
    kp = rng.uniform(0, 31, size=(6, 21, 2))
    rec = ev.evaluate(kp + rng.normal(0, 2, kp.shape), rng.random((6, 32, 32)), kp,
                      (rng.random((6, 32, 32)) > 0.5))
    assert rec.avg == (rec.pck_auc + rec.iou) / 2
    assert 0 <= rec.pck_auc <= 100 and 0 <= rec.iou <= 100 and rec.mpe_px >= 0


def test_evaluate_drops_out_of_frame_joints():
    kp = np.full((1, 21, 2), 10.0)
    kp[0, 0] = (-5.0, 10.0)
    pred = kp.copy()
    pred[0, 0] = (30.0, 30.0)  # wrong, but the joint is out of frame
    m = np.ones((1, 32, 32))
    assert ev.evaluate(pred, m, kp, m).mpe_px == 0.0


def test_pck_threshold_scaling():
    assert ev.pck_max_threshold(128) == 20.0
    assert ev.pck_max_threshold(32) == 5.0


def test_write_metrics(tmp_path):
    kp = np.zeros((2, 21, 2)) + 5
    m = np.ones((2, 32, 32))
    rec = ev.evaluate(kp, m, kp, m)
    ev.write_metrics(rec, tmp_path)
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["avg"] == 100.0 and data["n"] == 2
    lines = (tmp_path / "metrics_per_instance.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("index,")


# correlation ------------------------------------------------------------------

def test_spearman_perfect_negative():
    d = np.random.default_rng(5).random(100)
    c = ev.disagreement_correlation(d, -d)
    assert c.spearman_rho == pytest.approx(-1.0) and not c.degenerate
    assert len(c.bins) == 10 and sum(b["n"] for b in c.bins) == 100
    means = [b["score_mean"] for b in c.bins]
    assert all(np.diff(means) < 0)


def test_spearman_null_distribution():
    rng = np.random.default_rng(6)
    rhos = [ev.disagreement_correlation(rng.random(200), rng.random(200)).spearman_rho for _ in range(200)]
    # the null standard deviation at n = 200 is about 0.071, so 0.2 is almost three of them
    assert np.mean(np.abs(rhos) < 0.2) > 0.98


def test_constant_disagreement_flagged():
    c = ev.disagreement_correlation(np.ones(50), np.arange(50.0))
    assert c.degenerate and np.isnan(c.spearman_rho)


def test_correlation_needs_30():
    with pytest.raises(ValueError):
        ev.disagreement_correlation(np.arange(10.0), np.arange(10.0))


# densities --------------------------------------------------------------------

def test_kde_single_length():
    grid, dens = ev.kde_curve([6.0], 0.5)
    assert abs(grid[np.argmax(dens)] - 6.0) < grid[1] - grid[0]
    peak = np.argmax(dens)
    assert np.all(np.diff(dens[:peak + 1]) >= 0) and np.all(np.diff(dens[peak:]) <= 0)


def test_kde_integrates_to_one():
    rng = np.random.default_rng(7)
    for bw in (0.2, 0.5, 1.5):
        grid, dens = ev.kde_curve(rng.normal(5, 1, 300), bw)
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3


def test_kde_two_modes():
    grid, dens = ev.kde_curve([4.0, 8.0], 0.4)
    interior = (dens[1:-1] > dens[:-2]) & (dens[1:-1] > dens[2:])
    modes = grid[1:-1][interior]
    assert len(modes) == 2
    assert np.allclose(sorted(modes), [4.0, 8.0], atol=0.05)


def test_kde_errors():
    with pytest.raises(ValueError):
        ev.kde_curve([], 0.5)
    with pytest.raises(ValueError):
        ev.kde_curve([1.0], 0.0)


def test_bone_length_kde_groups():
    kp = np.zeros((1, 21, 2))
    kp[0, 1:, 0] = 3.0  # every non-wrist joint 3 px to the right of the wrist
    grid, dens = ev.bone_length_kde(kp, "wrist_mcp", 0.3)
    assert abs(grid[np.argmax(dens)] - 3.0) < 0.05
    with pytest.raises(ValueError):
        ev.bone_length_kde(kp, "palm")


def test_curve_l1():
    grid = np.linspace(0, 10, 1001)
    _, a = ev.kde_curve([3.0], 0.5, grid)
    assert ev.curve_l1(grid, a, a) == 0.0
    _, b = ev.kde_curve([7.0], 0.5, grid)
    assert ev.curve_l1(grid, a, b) == pytest.approx(2.0, abs=1e-3)
