import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsn.core import (Box7, Detection, DetectorConfig, RigidTransform, box_corners_bev, logit,
                      make_rng, point_in_box, points_in_box, pose_matrix, sigmoid,
                      transform_flip_x, transform_rotate_z, wrap_angle)

angles = st.floats(-50.0, 50.0, allow_nan=False)


class TestWrapAngle:
    def test_identity_inside_range(self):
        for t in (-math.pi, -1.0, 0.0, 3.0):
            assert wrap_angle(t) == t

    def test_pi_maps_to_minus_pi(self):
        assert wrap_angle(math.pi) == -math.pi

    @given(angles)
    def test_range_and_congruence(self, t):
        w = float(wrap_angle(t))
        assert -math.pi <= w < math.pi
        k = (t - w) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-9

    def test_array(self):
        a = wrap_angle(np.array([0.0, 2 * math.pi + 0.5, -7.0]))
        np.testing.assert_allclose(a, [0.0, 0.5, -7.0 + 2 * math.pi], atol=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(ValueError):
            wrap_angle(float("nan"))


class TestBox7:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            Box7(0, 0, 0, 0.0, 1, 1, 0)
        with pytest.raises(ValueError):
            Box7(0, 0, 0, 1, -1, 1, 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Box7(float("inf"), 0, 0, 1, 1, 1, 0)

    def test_heading_is_wrapped(self):
        b = Box7(0, 0, 0, 1, 1, 1, 3 * math.pi / 2)
        assert b.theta == pytest.approx(-math.pi / 2)

    def test_array_round_trip(self):
        b = Box7(1, 2, 3, 4, 5, 6, 0.5)
        assert Box7.from_array(b.as_array()) == b
        assert b.volume() == 120.0


class TestDetection:
    def test_json_round_trip(self):
        d = Detection(Box7(1.5, -2, 0.25, 4, 2, 1.5, -0.3), 0.75, 2)
        back = Detection.from_json(json.loads(json.dumps(d.to_json())))
        assert back == d
        assert set(d.to_json()) == {"cx", "cy", "cz", "l", "w", "h", "theta", "score", "class_id"}

    def test_score_range(self):
        with pytest.raises(ValueError):
            Detection(Box7(0, 0, 0, 1, 1, 1, 0), 1.5)


class TestDetectorConfig:
    def test_vehicle_defaults(self):
        c = DetectorConfig.vehicle()
        assert (c.gamma, c.sigma, c.num_heading_bins) == (0.15, 1.0, 12)
        assert (c.lambda1, c.lambda2, c.delta1, c.delta2) == (400.0, 4.0, 0.2, 0.2)
        assert c.pillar and c.voxel_size[:2] == (0.2, 0.2)

    def test_pedestrian_defaults(self):
        c = DetectorConfig.pedestrian()
        assert (c.gamma, c.sigma, c.num_heading_bins) == (0.1, 0.5, 4)
        assert c.voxel_size[:2] == (0.1, 0.1)

    def test_json_round_trip_keeps_infinite_z(self):
        c = DetectorConfig.pedestrian(gamma=0.3)
        text = json.dumps(c.to_json())
        assert "Infinity" not in text
        assert DetectorConfig.from_json(json.loads(text)) == c

    @pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": 1.0}, {"sigma": 0.0},
                                    {"delta1": 1.0}, {"num_heading_bins": 1},
                                    {"voxel_size": (0.2, 0.0, 1.0)}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            DetectorConfig(**kw)


class TestContainment:
    def test_corners_ccw(self):
        c = box_corners_bev(Box7(0, 0, 0, 4, 2, 1, 0))
        np.testing.assert_allclose(c, [[2, 1], [-2, 1], [-2, -1], [2, -1]])
        x, y = c[:, 0], c[:, 1]
        assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0

    def test_rotated_box(self):
        b = Box7(1, 1, 0, 4, 1, 2, math.pi / 2)
        pts = np.array([[1, 2.9, 0], [1, 3.1, 0], [1.6, 1, 0], [1, 1, 1.0], [1, 1, 1.01]])
        np.testing.assert_array_equal(points_in_box(pts, b), [True, False, False, True, False])
        assert point_in_box([1, 1, 0], b)

    def test_bev_only_ignores_z(self):
        b = Box7(0, 0, 0, 1, 1, 1, 0)
        assert points_in_box(np.array([[0, 0, 5.0]]), b, bev_only=True)[0]


class TestTransforms:
    def test_flip(self):
        pts, (b,) = transform_flip_x(np.array([[1.0, 2.0, 3.0]]), [Box7(1, 2, 3, 1, 1, 1, 0.4)])
        np.testing.assert_array_equal(pts, [[1.0, -2.0, 3.0]])
        assert (b.cy, b.theta) == (-2.0, -0.4)

    def test_rotate_quarter_turn(self):
        pts, (b,) = transform_rotate_z(np.array([[1.0, 0.0, 0.0]]), [Box7(1, 0, 0, 2, 1, 1, 0)],
                                       math.pi / 2)
        np.testing.assert_allclose(pts, [[0, 1, 0]], atol=1e-15)
        assert b.theta == pytest.approx(math.pi / 2)

    @settings(max_examples=50)
    @given(st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5), st.booleans())
    def test_invert_is_inverse(self, ang, tx, ty, flip):
        T = RigidTransform(ang, (tx, ty, 0.5), flip)
        pts = make_rng(0).uniform(-10, 10, (20, 3))
        box = Box7(1, -2, 0.3, 4, 2, 1.5, 0.7)
        p2, b2 = T.apply(pts, [box])
        p3, (b3,) = T.invert(p2, b2)
        np.testing.assert_allclose(p3, pts, atol=1e-10)
        np.testing.assert_allclose(b3.as_array(), box.as_array(), atol=1e-10)

    def test_containment_is_transform_invariant(self):
        rng = make_rng(5)
        box = Box7(3, 1, 0, 4, 2, 1.5, 0.3)
        pts = rng.uniform(-5, 8, (500, 3))
        T = RigidTransform.random(rng, max_shift=2.0)
        p2, (b2,) = T.apply(pts, [box])
        inside = points_in_box(pts, box)
        # ignore points within rounding distance of a face
        grown = points_in_box(pts, Box7(3, 1, 0, 4.001, 2.001, 1.501, 0.3))
        shrunk = points_in_box(pts, Box7(3, 1, 0, 3.999, 1.999, 1.499, 0.3))
        clear = grown == shrunk
        np.testing.assert_array_equal(points_in_box(p2, b2)[clear], inside[clear])

    def test_pose_matrix(self):
        T = pose_matrix(math.pi / 2, (1, 2, 3))
        np.testing.assert_allclose(T @ [1, 0, 0, 1], [1, 3, 3, 1], atol=1e-15)


class TestSigmoid:
    def test_stable_extremes(self):
        np.testing.assert_array_equal(sigmoid(np.array([-1000.0, 1000.0])), [0.0, 1.0])

    def test_logit_inverse(self):
        p = np.array([0.01, 0.3, 0.5, 0.9])
        np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-14)


class TestRng:
    def test_reproducible(self):
        np.testing.assert_array_equal(make_rng(7).uniform(size=5), make_rng(7).uniform(size=5))
        assert not np.array_equal(make_rng(7).uniform(size=5), make_rng(8).uniform(size=5))
