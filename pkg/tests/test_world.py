import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from graspadapt.errors import EmptyObservation, WorkspaceLimit
from graspadapt.se3 import IDENTITY, Pose, SampleRange, compose, inverse, poses_close, sample_displacement
from graspadapt.world import (
    OBJECT_KINDS,
    Box,
    CameraModel,
    HalfSpace,
    ObjectModel,
    Observation,
    WorldState,
    aligning_displacement,
    default_world,
    make_object,
    move_eef,
    observe,
    principal_lengths,
    structured_dropout,
)
from oracles import pose_matrix


def bare_world(obj, eef=IDENTITY, grasp=IDENTITY, camera=IDENTITY, **cam):
    return WorldState(eef, grasp, obj, CameraModel(camera, **cam), None, None)


class TestObserve:
    def test_identity_frames_return_object_points(self, bar):
        obs = observe(bare_world(bar))
        assert_array_equal(obs.points_C, bar.points)
        assert obs.mask_source == "full"

    def test_full_dropout_is_empty(self, bar, rng):
        with pytest.raises(EmptyObservation):
            observe(bare_world(bar, dropout_uniform=1.0), rng)

    def test_pure_translation_shifts_points(self, bar):
        d = np.array([0.1, -0.2, 0.3])
        obs = observe(bare_world(bar, eef=Pose.from_translation(d)))
        assert_allclose(obs.points_C, bar.points + d, atol=1e-15)

    def test_matches_matrix_transform(self, bar, rng):
        eef, grasp, cam = (Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3)) for _ in range(3))
        obs = observe(bare_world(bar, eef, grasp, cam))
        m = np.linalg.inv(pose_matrix(cam)) @ pose_matrix(eef) @ pose_matrix(grasp)
        expect = bar.points @ m[:3, :3].T + m[:3, 3]
        assert_allclose(obs.points_C, expect, atol=1e-12)

    def test_noise_needs_generator(self, bar):
        with pytest.raises(ValueError):
            observe(bare_world(bar, noise_sigma=0.001))

    def test_noise_statistics(self, bar, rng):
        clean = observe(bare_world(bar))
        noisy = observe(bare_world(bar, noise_sigma=0.002), rng)
        assert np.std(noisy.points_C - clean.points_C) == pytest.approx(0.002, rel=0.1)

    def test_deterministic_under_seed(self, bar):
        w = bare_world(bar, noise_sigma=0.001, dropout_uniform=0.3)
        assert observe(w, np.random.default_rng(5)) == observe(w, np.random.default_rng(5))

    def test_occlusion_evaluated_in_eef_frame(self, bar):
        box = Box((0.0, 0.0, 0.0), (0.05, 1.0, 1.0))
        w = WorldState(Pose.from_translation((5, 0, 0)), IDENTITY, bar, CameraModel(IDENTITY), box, None)
        obs = observe(w)
        assert obs.mask_source == "occluded"
        assert np.all(np.abs(bar.points[obs.point_ids, 0]) > 0.025)

    def test_region_dropout_removes_half_space(self, bar):
        region = HalfSpace((1.0, 0.0, 0.0), 0.0)
        obs = observe(bare_world(bar, dropout_region=region))
        assert np.all(obs.points_C[:, 0] <= 0.0)
        assert len(obs) < len(bar)

    def test_observation_ignores_extrinsics_report(self, bar, rng):
        err = Pose.from_axis_angle((0, 1, 0), 0.1, (0.01, 0, 0))
        a = observe(bare_world(bar, noise_sigma=0.001), np.random.default_rng(1))
        b = observe(bare_world(bar, noise_sigma=0.001, extrinsics_report_error=err), np.random.default_rng(1))
        assert a == b

    def test_observations_are_read_only(self, bar):
        obs = observe(bare_world(bar))
        with pytest.raises(ValueError):
            obs.points_C[0, 0] = 1.0

    def test_without_everything_raises(self, bar):
        obs = observe(bare_world(bar))
        with pytest.raises(EmptyObservation):
            obs.without(np.ones(len(obs), dtype=bool))


class TestEmulationIdentity:
    """Displacing the EEF by N looks the same to the camera as holding the grasp N @ G."""

    def test_exact_to_1e12(self, clean_world, rng):
        w = clean_world.replace(gripper_occlusion=None)
        for _ in range(50):
            n = sample_displacement(SampleRange(0.30, 60), rng)
            a = observe(w.replace(eef_pose=compose(w.eef_pose, n)))
            b = observe(w.replace(grasp=compose(n, w.grasp)))
            assert np.abs(a.points_C - b.points_C).max() < 1e-12

    def test_injective_over_sampled_range(self, clean_world, rng):
        w = clean_world.replace(gripper_occlusion=None)
        seen = []
        for _ in range(30):
            n = sample_displacement(SampleRange(0.30, 60), rng)
            seen.append(observe(w.replace(eef_pose=compose(w.eef_pose, n))).points_C)
        for i in range(len(seen)):
            for j in range(i):
                assert np.abs(seen[i] - seen[j]).max() > 1e-9


class TestMoveEef:
    def test_identity_move(self, clean_world):
        assert move_eef(clean_world, IDENTITY).eef_pose == clean_world.eef_pose

    def test_two_moves_equal_one(self, clean_world, rng):
        a, b = (sample_displacement(SampleRange(0.05, 10), rng) for _ in range(2))
        two = move_eef(move_eef(clean_world, a), b)
        one = move_eef(clean_world, compose(a, b))
        assert poses_close(two.eef_pose, one.eef_pose, 1e-12)

    def test_grasp_unchanged(self, clean_world):
        moved = move_eef(clean_world, Pose.from_translation((0.1, 0, 0)))
        assert moved.grasp == clean_world.grasp

    def test_workspace_limit(self, clean_world):
        with pytest.raises(WorkspaceLimit):
            move_eef(clean_world, Pose.from_translation((10, 0, 0)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.2, 0.2), min_size=6, max_size=6))
def test_move_and_back(v):
    w = default_world(make_object("lshape", 16, 0))
    d = Pose.from_rotvec(v[:3], v[3:])
    back = move_eef(move_eef(w, d), inverse(d))
    assert poses_close(back.eef_pose, w.eef_pose, 1e-12)


class TestMakeObject:
    def test_bar_skeleton(self):
        o = make_object("bar", 8)
        pts = o.points
        rows = {round(v, 9) for v in pts[:, 1]}
        assert len(rows) == 2
        for y in rows:
            row = pts[np.isclose(pts[:, 1], y)]
            assert len(row) == 4
            assert np.ptp(row[:, 0]) == pytest.approx(0.2)
            assert np.ptp(row[:, 1]) == 0 and np.ptp(row[:, 2]) == 0

    @pytest.mark.parametrize("kind", OBJECT_KINDS)
    def test_deterministic(self, kind):
        assert make_object(kind, 64, 3) == make_object(kind, 64, 3)

    def test_random_principal_axes_distinct(self):
        lengths = principal_lengths(make_object("random", 64, 0).points)
        assert np.all(lengths[1:] <= 0.95 * lengths[:-1])

    @pytest.mark.parametrize("kind", OBJECT_KINDS)
    def test_no_rotational_self_symmetry(self, kind):
        # the identity must be the unique best rigid self-match among 180 deg flips
        o = make_object(kind, 256)
        from scipy.spatial import cKDTree

        tree = cKDTree(o.points)
        for axis in np.eye(3):
            flipped = Pose.from_axis_angle(axis, math.pi).apply(o.points)
            assert tree.query(flipped)[0].mean() > 1e-3

    def test_rejects_small_counts_and_unknown_kinds(self):
        with pytest.raises(ValueError):
            make_object("bar", 7)
        with pytest.raises(ValueError):
            make_object("spoon", 64)

    def test_json_round_trip(self):
        o = make_object("hammer", 32)
        assert ObjectModel.from_json(json.loads(json.dumps(o.to_json()))) == o

    def test_collinear_rejected(self):
        with pytest.raises(ValueError):
            ObjectModel(np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)]))


class TestStructuredDropout:
    @pytest.mark.parametrize("kind", OBJECT_KINDS)
    def test_removes_requested_fraction(self, kind):
        w = default_world(make_object(kind, 256), occlusion=None)
        region = structured_dropout(w, 0.7)
        obs = observe(w.replace(camera=CameraModel(w.camera.pose_WC, dropout_region=region)))
        assert len(obs) == pytest.approx(0.3 * 256, abs=2)

    def test_explicit_normal(self, clean_world):
        region = structured_dropout(clean_world, 0.5, normal=(0, 0, 2))
        assert region.normal == (0.0, 0.0, 1.0)


def test_aligning_displacement_brings_grasp_to_reference(rng):
    R = Pose.from_translation((0.5, 0, 0.4))
    G_R = Pose.from_rotvec((0.1, 0.2, 0.0), (0.0, 0.0, 0.1))
    G = compose(sample_displacement(SampleRange(0.05, 15), rng), G_R)
    x = aligning_displacement(R, G, R, G_R)
    assert poses_close(compose(R, x, G), compose(R, G_R), 1e-12)


def test_default_world_is_at_reference(clean_world):
    assert clean_world.camera.pose_WC.t[0] == pytest.approx(clean_world.eef_pose.t[0] + 0.6)
    assert isinstance(observe(clean_world), Observation)
