import numpy as np
import pytest

from udgs_slam.dataio import load_depth, load_tum_sequence
from udgs_slam.depth_filter import DepthMap
from udgs_slam.geometry import project
from udgs_slam.schemas import SceneSpec
from udgs_slam import synth


def test_scene_is_seeded():
    a = synth.make_scene(SceneSpec(n_splats=20, seed=3))
    b = synth.make_scene(SceneSpec(n_splats=20, seed=3))
    c = synth.make_scene(SceneSpec(n_splats=20, seed=4))
    np.testing.assert_array_equal(a.mu_w, b.mu_w)
    np.testing.assert_array_equal(a.color, b.color)
    assert not np.array_equal(a.mu_w, c.mu_w)


def test_scene_stays_in_its_box():
    scene = synth.make_scene(SceneSpec(n_splats=100, extent=2.0, seed=0))
    assert len(scene) == 100
    assert np.all(np.abs(scene.mu_w) <= 1.0)
    assert np.all((scene.color >= 0) & (scene.color <= 1))
    assert len(synth.make_scene(SceneSpec(n_splats=1))) == 1


def test_orbit_headings():
    poses = synth.make_orbit(3.0, 4)
    centers = np.array([p.camera_center for p in poses])
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 3.0)
    for a, b in zip(centers, centers[1:]):
        assert np.degrees(np.arccos(np.dot(a, b) / 9.0)) == pytest.approx(90.0)


def test_orbit_chord_length():
    poses = synth.make_orbit(3.0, 50)
    step = np.linalg.norm(poses[1].camera_center - poses[0].camera_center)
    assert step == pytest.approx(2 * 3.0 * np.sin(np.pi / 50))


def test_orbit_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth.make_orbit(0.0, 4)
    with pytest.raises(ValueError):
        synth.make_orbit(1.0, 0)


def test_look_at_projects_target_to_principal_point(K64):
    pose = synth.look_at_pose([1.0, -0.5, -3.0], [0.2, 0.1, 0.4])
    np.testing.assert_allclose(project(pose.transform([0.2, 0.1, 0.4]), K64), [K64.cx, K64.cy], atol=1e-9)
    np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(pose.rotation) == pytest.approx(1.0)


def test_rendered_frames_have_depth_where_opaque(orbit_scene):
    scene, poses, K = orbit_scene
    frames = synth.synth_frames(scene, poses[:2], K)
    assert [f.index for f in frames] == [0, 1]
    assert frames[1].timestamp == pytest.approx(1 / 30)
    depth = frames[0].depth
    assert depth.valid.any()
    assert np.all(depth.values[depth.valid] > 0)
    assert frames[0].rgb.shape == (64, 64, 3)


def test_corruption_count_and_direction():
    clean = synth.make_smooth_depth(32, 32, seed=1)
    corrupted, mask = synth.corrupt_depth(clean, tail_fraction=0.05, tail_scale=5.0, seed=1)
    assert mask.sum() == round(0.05 * 32 * 32)
    ratio = corrupted.values[mask] / clean.values[mask]
    assert np.all((ratio >= 2.0) & (ratio <= 5.0))
    np.testing.assert_array_equal(corrupted.values[~mask], clean.values[~mask])


def test_zero_tail_fraction_is_identity():
    clean = synth.make_smooth_depth(16, 16)
    corrupted, mask = synth.corrupt_depth(clean, tail_fraction=0.0, tail_scale=5.0)
    assert not mask.any()
    np.testing.assert_array_equal(corrupted.values, clean.values)
    with pytest.raises(ValueError):
        synth.corrupt_depth(clean, tail_fraction=1.5, tail_scale=5.0)


def test_score_filter():
    clean = synth.make_smooth_depth(8, 8, noise=0.0)
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, :4] = True
    after = DepthMap(clean.values, clean.valid & ~mask)
    score = synth.score_filter(clean, after, mask)
    assert (score.precision, score.recall) == (1.0, 1.0)
    assert score.invalidated == score.corrupted == 4


def test_written_sequence_loads_back(orbit_scene, tmp_path):
    scene, poses, K = orbit_scene
    frames = synth.synth_frames(scene, poses[:3], K)
    synth.write_sequence(tmp_path / "seq", frames, poses[:3], K)
    sequence = load_tum_sequence(tmp_path / "seq")
    assert len(sequence) == 3
    assert sequence.intrinsics == K
    for (_, _, depth_path), frame in zip(sequence.frame_paths(), frames):
        loaded = load_depth(depth_path)
        np.testing.assert_array_equal(loaded.valid, frame.depth.valid)
    truth = sequence.groundtruth.poses_cw()
    for a, b in zip(truth, poses):
        assert a.allclose(b, atol=1e-5)
