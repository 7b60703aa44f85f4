import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from udgs_slam.dataio import Trajectory
from udgs_slam.errors import DegenerateConfiguration, ShapeMismatch, TooFewPoses, TooSmall
from udgs_slam.evaluation import Alignment, align_points, ate_rmse, metrics_table, psnr, ssim
from udgs_slam.schemas import MetricsRow


def _trajectory(points, t0=0.0):
    n = len(points)
    return Trajectory(t0 + np.arange(n) / 30.0, points, np.tile([0.0, 0.0, 0.0, 1.0], (n, 1)))


def _naive_ssim(x, y, window=11, sigma=1.5):
    """Literal sliding-window SSIM over windows lying fully inside the image."""
    offsets = np.arange(window) - window // 2
    g = np.exp(-0.5 * offsets ** 2 / sigma ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(x.shape[0] - window + 1):
        for j in range(x.shape[1] - window + 1):
            a = x[i:i + window, j:j + window]
            b = y[i:i + window, j:j + window]
            mu_a, mu_b = np.sum(w * a), np.sum(w * b)
            var_a = np.sum(w * (a - mu_a) ** 2)
            var_b = np.sum(w * (b - mu_b) ** 2)
            cov = np.sum(w * (a - mu_a) * (b - mu_b))
            values.append((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


# --- Alignment ---

def test_identical_points_align_to_identity(rng):
    points = rng.normal(size=(20, 3))
    alignment = align_points(points, points)
    np.testing.assert_allclose(alignment.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(alignment.translation, 0.0, atol=1e-12)
    assert alignment.rmse < 1e-12
    assert not alignment.degenerate


def test_rotated_and_shifted_points_are_recovered(rng):
    est = rng.normal(size=(30, 3))
    R = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    t = np.array([0.5, -1.0, 2.0])
    gt = est @ R.T + t
    alignment = align_points(est, gt)
    np.testing.assert_allclose(alignment.rotation, R, atol=1e-10)
    np.testing.assert_allclose(alignment.translation, t, atol=1e-10)
    assert alignment.residuals.max() < 1e-9
    np.testing.assert_allclose(alignment.apply(est), gt, atol=1e-10)


def test_similarity_alignment_recovers_scale(rng):
    gt = rng.normal(size=(25, 3))
    alignment = align_points(0.5 * gt, gt, with_scale=True)
    assert alignment.scale == pytest.approx(2.0)
    assert alignment.rmse < 1e-12
    assert align_points(0.5 * gt, gt).scale == 1.0


def test_rmse_matches_noise_level():
    rng = np.random.default_rng(42)
    sigma, n = 0.01, 1000
    gt = rng.uniform(-2, 2, size=(n, 3))
    est = gt + rng.normal(0, sigma, size=(n, 3))
    expected = sigma * np.sqrt(3.0 - 6.0 / n)
    assert align_points(est, gt).rmse == pytest.approx(expected, rel=0.1)


def test_reflection_is_never_returned(rng):
    est = rng.normal(size=(10, 3))
    gt = est * np.array([1.0, 1.0, -1.0])
    alignment = align_points(est, gt)
    assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)


def test_collinear_estimate_falls_back_to_translation():
    est = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
    alignment = align_points(est, est + [0.0, 1.0, 0.0])
    assert alignment.degenerate
    np.testing.assert_array_equal(alignment.rotation, np.eye(3))
    assert alignment.rmse < 1e-12


def test_collinear_estimate_raises_when_strict():
    est = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateConfiguration):
        align_points(est, est + [0.0, 1.0, 0.0], strict=True)
    with pytest.raises(DegenerateConfiguration):
        align_points(np.ones((4, 3)), np.zeros((4, 3)), strict=True)
    assert not align_points(np.eye(3), np.eye(3), strict=True).degenerate


def test_too_few_poses():
    with pytest.raises(TooFewPoses):
        align_points(np.zeros((2, 3)), np.zeros((2, 3)))


# --- ATE ---

def test_identical_trajectories_have_zero_ate(rng):
    traj = _trajectory(rng.normal(size=(10, 3)))
    assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)


def test_constant_offset_is_absorbed(rng):
    points = rng.normal(size=(10, 3))
    assert ate_rmse(_trajectory(points + [0.05, 0.0, 0.0]), _trajectory(points)) == pytest.approx(0.0, abs=1e-9)


def test_rmse_of_known_residuals():
    alignment = Alignment(np.eye(3), np.zeros(3), 1.0, np.array([0.03, 0.04, 0.0]))
    assert alignment.rmse == pytest.approx(np.sqrt(25e-4 / 3))
    assert alignment.rmse == pytest.approx(0.0289, abs=1e-4)


def test_ate_uses_only_associated_poses(rng):
    points = rng.normal(size=(6, 3))
    est = _trajectory(points)
    gt = _trajectory(np.vstack([points, rng.normal(size=(4, 3))]))
    assert ate_rmse(est, gt) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(TooFewPoses):
        ate_rmse(est, _trajectory(points, t0=100.0))


# --- Image metrics ---

def test_psnr():
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_psnr_matches_mse_formula(rng):
    a, b = rng.uniform(size=(2, 12, 9, 3))
    assert psnr(a, b) == pytest.approx(-10 * np.log10(np.mean((a - b) ** 2)), abs=1e-9)


def test_ssim_of_identical_images(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_of_inverted_texture_is_negative(rng):
    a = rng.uniform(size=(32, 32))
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_matches_sliding_window_reference(rng):
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(0, 0.1, size=(16, 16)), 0, 1)
    assert ssim(a, b) == pytest.approx(_naive_ssim(a, b), abs=1e-6)


def test_ssim_averages_channels(rng):
    a, b = rng.uniform(size=(2, 16, 16, 3))
    expected = np.mean([_naive_ssim(a[:, :, c], b[:, :, c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


def test_image_metric_errors():
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((16, 16)), np.zeros((16, 16, 3)))


def test_metrics_table_columns():
    table = metrics_table([MetricsRow(sequence="orbit", ate_rmse_m=0.004, frames=50, keyframes=7)])
    assert list(table.columns)[:3] == ["sequence", "ate_rmse_m", "psnr_db"]
    assert table.loc[0, "lpips"] == "n/a"
    assert table.loc[0, "evaluated_on"] == "frames"
