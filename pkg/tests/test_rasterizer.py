import numpy as np
import pytest

from udgs_slam.gaussian_map import GaussianMap, logit
from udgs_slam.geometry import CameraIntrinsics, SE3Pose, se3_exp
from udgs_slam.gradcheck import check_gradients, exact_config, random_scene
from udgs_slam.rasterizer import covisibility, render, render_backward, render_naive, splat_project
from udgs_slam.schemas import RenderConfig


def _stack(depths, colors, opacity=0.9, scale=0.3):
    """Identical isotropic splats on the optical axis at the given depths."""
    n = len(depths)
    gmap = GaussianMap()
    gmap.add(np.column_stack([np.zeros(n), np.zeros(n), depths]), np.full((n, 3), np.log(scale)),
             np.tile([1.0, 0, 0, 0], (n, 1)), colors, np.full(n, logit(opacity)))
    return gmap


def test_empty_map_renders_background(K16):
    out = render(GaussianMap(), SE3Pose.identity(), K16)
    assert out.color_image.shape == (16, 16, 3)
    np.testing.assert_array_equal(out.color_image, 0.0)
    np.testing.assert_array_equal(out.depth_image, 0.0)
    np.testing.assert_array_equal(out.alpha_image, 0.0)


def test_single_splat_center_pixel(single_splat_map, K16):
    out = render(single_splat_map, SE3Pose.identity(), K16)
    np.testing.assert_allclose(out.color_image[8, 8], 0.7 * np.array([0.8, 0.2, 0.1]), atol=1e-12)
    assert out.depth_image[8, 8] == pytest.approx(0.7 * 2.0)
    assert out.alpha_image[8, 8] == pytest.approx(0.7)
    assert out.visibility[0] == pytest.approx(0.7)
    assert out.visible_ids(1e-3) == {0}


def test_splat_behind_camera_is_culled(single_splat_map, K16):
    behind = se3_exp([0.0, 0.0, -3.0, 0.0, 0.0, 0.0])
    assert splat_project(single_splat_map.splat(0), behind, K16) is None
    out = render(single_splat_map, behind, K16)
    np.testing.assert_array_equal(out.alpha_image, 0.0)
    assert out.visible_ids(1e-3) == set()


def test_splat_far_outside_image_is_culled(K16):
    gmap = _stack([2.0], [[1.0, 1.0, 1.0]], scale=0.01)
    gmap.mu_w[0, 0] = 10.0
    assert splat_project(gmap.splat(0), SE3Pose.identity(), K16) is None


def test_splat_project_matches_pinhole(single_splat_map, K16):
    splat = splat_project(single_splat_map.splat(0), SE3Pose.identity(), K16, source_id=7)
    np.testing.assert_allclose(splat.mu_i, [8.0, 8.0])
    assert splat.depth_c == pytest.approx(2.0)
    # isotropic 0.2 m at 2 m with fx 16 -> 1.6 px standard deviation, plus the floor
    np.testing.assert_allclose(splat.cov_i, (1.6 ** 2 + 0.3) * np.eye(2), atol=1e-12)
    assert splat.source_id == 7


def test_front_splat_occludes_back_splat(K16):
    gmap = _stack([2.0, 3.0], [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], opacity=0.95)
    out = render(gmap, SE3Pose.identity(), K16)
    red, _, blue = out.color_image[8, 8]
    assert red == pytest.approx(0.95)
    assert blue == pytest.approx(0.05 * 0.95)


def test_insertion_order_does_not_matter(K16):
    a = _stack([2.0, 3.0], [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    b = _stack([3.0, 2.0], [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(render(a, SE3Pose.identity(), K16).color_image,
                               render(b, SE3Pose.identity(), K16).color_image, atol=1e-15)


def test_early_termination_drops_hidden_splats(K16):
    gmap = _stack([2.0, 3.0], [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], opacity=0.9)
    out = render(gmap, SE3Pose.identity(), K16, RenderConfig(t_stop=0.5))
    np.testing.assert_allclose(out.color_image[8, 8], [0.9, 0.0, 0.0], atol=1e-12)
    assert out.final_transmittance[8, 8] == pytest.approx(0.1)


@pytest.mark.parametrize("t_stop", [0.0, 1e-4, 0.3])
def test_transmittance_telescopes(rng, K32, t_stop):
    for _ in range(10):
        gmap, pose = random_scene(rng, 10, K32)
        gmap.color[:] = 1.0
        out = render(gmap, pose, K32, RenderConfig(t_stop=t_stop))
        total = out.color_image[:, :, 0] + out.final_transmittance
        np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_tiled_matches_naive_oracle(rng, K16, K32):
    cfg = exact_config()
    for i in range(50):
        K = K32 if i % 2 else K16
        gmap, pose = random_scene(rng, int(rng.integers(1, 11)), K)
        tiled = render(gmap, pose, K, cfg)
        naive = render_naive(gmap, pose, K, cfg)
        np.testing.assert_allclose(tiled.color_image, naive.color_image, atol=1e-6)
        np.testing.assert_allclose(tiled.depth_image, naive.depth_image, atol=1e-6)
        np.testing.assert_allclose(tiled.alpha_image, naive.alpha_image, atol=1e-6)


def test_thread_count_does_not_change_output(rng, K32, monkeypatch):
    gmap, pose = random_scene(rng, 10, K32)
    grad_color = rng.normal(size=(32, 32, 3))
    grad_depth = rng.normal(size=(32, 32))
    monkeypatch.setenv("UDGS_THREADS", "1")
    single = render(gmap, pose, K32)
    single_grad = render_backward(gmap, pose, K32, grad_color, grad_depth)
    monkeypatch.setenv("UDGS_THREADS", "4")
    multi = render(gmap, pose, K32)
    multi_grad = render_backward(gmap, pose, K32, grad_color, grad_depth)
    np.testing.assert_array_equal(single.color_image, multi.color_image)
    np.testing.assert_array_equal(single.depth_image, multi.depth_image)
    for name, values in single_grad.groups().items():
        np.testing.assert_array_equal(values, multi_grad.groups()[name])
    np.testing.assert_array_equal(single_grad.d_pose, multi_grad.d_pose)


def test_backward_with_zero_upstream_is_zero(small_scene, K16):
    gmap, pose = small_scene
    bundle = render_backward(gmap, pose, K16, np.zeros((16, 16, 3)), np.zeros((16, 16)))
    assert bundle.is_finite()
    for values in bundle.groups().values():
        np.testing.assert_array_equal(values, 0.0)
    np.testing.assert_array_equal(bundle.d_pose, 0.0)


def test_backward_group_lengths(small_scene, K16, rng):
    gmap, pose = small_scene
    bundle = render_backward(gmap, pose, K16, rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)))
    groups = gmap.parameter_groups()
    for name, values in bundle.groups().items():
        assert len(values) == groups.expected_length(name)
    assert bundle.d_pose.shape == (6,)


def test_gradients_match_finite_differences(rng, K16):
    for _ in range(10):
        gmap, pose = random_scene(rng, int(rng.integers(1, 11)), K16)
        for report in check_gradients(gmap, pose, K16, rng):
            assert report.passed, f"{report.name}: abs {report.max_abs_error:.3g}, rel {report.max_rel_error:.3g}"


@pytest.mark.slow
def test_gradients_match_finite_differences_full_sweep(K16):
    rng = np.random.default_rng(0)
    for _ in range(100):
        gmap, pose = random_scene(rng, int(rng.integers(1, 11)), K16)
        assert all(report.passed for report in check_gradients(gmap, pose, K16, rng))


def test_covisibility(single_splat_map, K16):
    identity = SE3Pose.identity()
    assert covisibility(single_splat_map, identity, identity, K16) == 1.0
    looking_away = se3_exp([0.0, 0.0, 0.0, 0.0, np.pi, 0.0])
    assert covisibility(single_splat_map, identity, looking_away, K16) == 0.0
    assert covisibility(GaussianMap(), identity, looking_away, K16) == 1.0


def _row_of_splats(xs, depth=2.0):
    """Small opaque splats on the image row through the principal point, well apart."""
    n = len(xs)
    gmap = GaussianMap()
    gmap.add(np.column_stack([xs, np.zeros(n), np.full(n, depth)]), np.full((n, 3), np.log(0.01)),
             np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.5), np.full(n, logit(0.9)))
    return gmap


def test_covisibility_of_half_overlapping_views(K16):
    # at 2 m with fx 16 the splats land on columns 2, 6, 10, 14, 18, 22
    gmap = _row_of_splats([-0.75, -0.25, 0.25, 0.75, 1.25, 1.75])
    left = SE3Pose.identity()
    right = SE3Pose(np.eye(3), [-1.0, 0.0, 0.0])
    seen = []
    for pose in (left, right):
        projected = [splat_project(gmap.splat(i), pose, K16, source_id=int(gmap.ids[i])) for i in range(len(gmap))]
        seen.append({s.source_id for s in projected if s is not None})
        assert render(gmap, pose, K16).visible_ids(1e-3) == seen[-1]
    assert len(seen[0]) == len(seen[1]) == 4
    assert len(seen[0] & seen[1]) == 2
    expected = len(seen[0] & seen[1]) / len(seen[0] | seen[1])
    assert covisibility(gmap, left, right, K16) == pytest.approx(expected)
    assert covisibility(gmap, left, right, K16) == pytest.approx(1 / 3)


def test_chunked_blending_matches_single_pass(rng, K32):
    grad_color = rng.normal(size=(32, 32, 3))
    grad_depth = rng.normal(size=(32, 32))
    for t_stop in (0.0, 1e-4, 0.3):
        gmap, pose = random_scene(rng, 10, K32)
        one = RenderConfig(t_stop=t_stop, blend_chunk=1)
        whole = RenderConfig(t_stop=t_stop, blend_chunk=64)
        a, b = render(gmap, pose, K32, one), render(gmap, pose, K32, whole)
        np.testing.assert_allclose(a.color_image, b.color_image, atol=1e-12)
        np.testing.assert_allclose(a.final_transmittance, b.final_transmittance, atol=1e-12)
        np.testing.assert_allclose(a.visibility, b.visibility, atol=1e-12)
        ga = render_backward(gmap, pose, K32, grad_color, grad_depth, one)
        gb = render_backward(gmap, pose, K32, grad_color, grad_depth, whole)
        for name, values in ga.groups().items():
            np.testing.assert_allclose(values, gb.groups()[name], atol=1e-9)
        np.testing.assert_allclose(ga.d_pose, gb.d_pose, atol=1e-9)


def test_opaque_stack_stops_blending_early(K16):
    depths = np.linspace(2.0, 4.0, 40)
    gmap = _stack(depths, np.tile([0.2, 0.4, 0.6], (40, 1)), opacity=0.99, scale=2.0)
    cfg = RenderConfig(blend_chunk=4)
    out = render(gmap, SE3Pose.identity(), K16, cfg, keep_cache=True)
    blended = max(len(blend["s"]) for blend in out.cache.blends)
    assert blended < 40
    reference = render(gmap, SE3Pose.identity(), K16, RenderConfig(blend_chunk=40))
    np.testing.assert_allclose(out.color_image, reference.color_image, atol=1e-12)
    np.testing.assert_array_equal(out.visibility[blended:], 0.0)


def test_backward_reuses_matching_forward_only(rng, K32):
    gmap, pose = random_scene(rng, 10, K32)
    grad_color = rng.normal(size=(32, 32, 3))
    grad_depth = rng.normal(size=(32, 32))
    fresh = render_backward(gmap, pose, K32, grad_color, grad_depth)
    forward = render(gmap, pose, K32, keep_cache=True)
    reused = render_backward(gmap, pose, K32, grad_color, grad_depth, forward=forward)
    for name, values in fresh.groups().items():
        np.testing.assert_array_equal(values, reused.groups()[name])
    np.testing.assert_array_equal(fresh.d_pose, reused.d_pose)

    # a forward pass from another pose or map state is ignored
    moved = se3_exp([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]).compose(pose)
    stale = render_backward(gmap, moved, K32, grad_color, grad_depth, forward=forward)
    np.testing.assert_array_equal(stale.d_pose, render_backward(gmap, moved, K32, grad_color, grad_depth).d_pose)
    gmap.color[:] = 0.5
    gmap.generation += 1
    recolored = render_backward(gmap, pose, K32, grad_color, grad_depth, forward=forward)
    np.testing.assert_array_equal(recolored.d_pose, render_backward(gmap, pose, K32, grad_color, grad_depth).d_pose)
