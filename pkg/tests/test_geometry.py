import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopbev.geometry import (
    CalibrationOffsets,
    GeometryError,
    ReferenceBatch,
    RigidTransform2D,
    Roi,
    apply_rigid_transform,
    build_reference_batch,
    build_reference_point,
    compensate_reference_point,
    denormalize_point,
    normalize_point,
)

VEH_ROI = Roi(-51.2, 51.2, -51.2, 51.2, -5.0, 3.0)
INF_ROI = Roi(0.0, 102.4, -51.2, 51.2, -5.0, 3.0)

# dyadic floats: exactly representable, so additive roundtrips are exact
dyadic = st.integers(min_value=-2**20, max_value=2**20).map(lambda n: n / 256.0)


class TestRigidTransform:
    def test_identity_application(self):
        t = RigidTransform2D.identity()
        assert np.array_equal(apply_rigid_transform(t, (3.0, -4.0)), [3.0, -4.0])

    def test_quarter_turn(self):
        t = RigidTransform2D.from_yaw(np.pi / 2)
        out = apply_rigid_transform(t, (1.0, 0.0))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_against_matrix_oracle(self):
        # independent 2x2 matrix arithmetic, written out longhand
        yaw = np.pi / 6
        t = RigidTransform2D.from_yaw(yaw, (1.0, 2.0))
        p = np.array([2.0, 0.0])
        c, s = np.cos(yaw), np.sin(yaw)
        expected = np.array([c * p[0] - s * p[1] + 1.0, s * p[0] + c * p[1] + 2.0])
        np.testing.assert_allclose(apply_rigid_transform(t, p), expected, atol=1e-12)

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            RigidTransform2D(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            RigidTransform2D(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))

    def test_inverse_and_compose(self):
        t = RigidTransform2D.from_yaw(0.7, (3.0, -1.0))
        roundtrip = t.inverse() @ t
        np.testing.assert_allclose(roundtrip.rotation, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(roundtrip.translation, np.zeros(2), atol=1e-12)

    def test_batch_apply(self):
        t = RigidTransform2D.from_yaw(1.1, (0.5, 0.25))
        pts = np.random.default_rng(0).normal(size=(17, 2))
        singles = np.stack([apply_rigid_transform(t, p) for p in pts])
        np.testing.assert_allclose(t.apply(pts), singles, atol=1e-12)


class TestCompensation:
    def test_zero_offset_reduces_to_transform(self):
        t = RigidTransform2D.from_yaw(0.3, (1.0, -2.0))
        p = np.array([4.0, 5.0])
        np.testing.assert_array_equal(
            compensate_reference_point(p, t, np.zeros(2)),
            apply_rigid_transform(t, p))

    def test_identity_transform_is_additive(self):
        out = compensate_reference_point(
            (0.0, 0.0), RigidTransform2D.identity(), (0.5, -0.3))
        np.testing.assert_array_equal(out, [0.5, -0.3])

    def test_hand_composed_oracle(self):
        # rotate 90 degrees, translate, then add the correction, each by hand
        t = RigidTransform2D.from_yaw(np.pi / 2, (1.0, 1.0))
        ref = np.array([1.0, 0.0])
        rotated = np.array([0.0, 1.0])
        expected = rotated + np.array([1.0, 1.0]) + np.array([0.1, 0.2])
        out = compensate_reference_point(ref, t, (0.1, 0.2))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @given(rx=dyadic, ry=dyadic, ox=dyadic, oy=dyadic)
    def test_offset_inverts_exactly_on_dyadics(self, rx, ry, ox, oy):
        # exact cancellation needs exactly-representable inputs
        ident = RigidTransform2D.identity()
        ref = np.array([rx, ry])
        fwd = compensate_reference_point(ref, ident, (ox, oy))
        back = compensate_reference_point(fwd, ident, (-ox, -oy))
        assert np.array_equal(back, ref)


class TestNormalization:
    def test_vehicle_midpoint(self):
        norm, ok = normalize_point((0.0, 0.0), VEH_ROI)
        np.testing.assert_array_equal(norm, [0.5, 0.5])
        assert ok

    def test_vehicle_corner(self):
        norm, ok = normalize_point((-51.2, -51.2), VEH_ROI)
        np.testing.assert_array_equal(norm, [0.0, 0.0])
        assert ok

    def test_infra_out_of_range(self):
        norm, ok = normalize_point((-1.0, 0.0), INF_ROI)
        assert norm[0] < 0.0
        assert not ok

    def test_boundary_counts_as_inside(self):
        _, ok = normalize_point((102.4, 51.2), INF_ROI)
        assert ok

    @given(px=st.floats(0.0, 1.0, allow_nan=False), py=st.floats(0.0, 1.0, allow_nan=False))
    def test_roundtrip_on_unit_square(self, px, py):
        norm, _ = normalize_point(denormalize_point((px, py), INF_ROI), INF_ROI)
        np.testing.assert_allclose(norm, [px, py], atol=1e-9)


class TestCalibrationOffsets:
    def test_bound_enforced(self):
        with pytest.raises(GeometryError):
            CalibrationOffsets(np.array([6.0, 0.0]), np.zeros(2))

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            CalibrationOffsets(np.array([np.nan, 0.0]), np.zeros(2))

    def test_updates(self):
        o = CalibrationOffsets.zero().with_inf((1.0, -0.5))
        np.testing.assert_array_equal(o.d_inf, [1.0, -0.5])
        np.testing.assert_array_equal(o.d_veh, [0.0, 0.0])


class TestReferencePoints:
    def setup_method(self):
        self.t_veh = RigidTransform2D.identity()
        self.t_inf = RigidTransform2D.from_yaw(0.0, (30.0, 0.0))
        self.offsets = CalibrationOffsets.zero()

    def test_mask_matches_bounds(self):
        inside = build_reference_point(
            (0.0, 0.0), self.t_veh, self.t_inf, self.offsets, VEH_ROI, INF_ROI)
        assert inside.inf_in_bounds
        outside = build_reference_point(
            (-40.0, 0.0), self.t_veh, self.t_inf, self.offsets, VEH_ROI, INF_ROI)
        assert not outside.inf_in_bounds
        assert outside.inf_normalized[0] < 0.0

    def test_veh_normalization_consistent(self):
        rp = build_reference_point(
            (10.0, -3.0), self.t_veh, self.t_inf, self.offsets, VEH_ROI, INF_ROI)
        expected, _ = normalize_point(rp.veh_coord, VEH_ROI)
        np.testing.assert_allclose(rp.veh_normalized, expected, atol=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-50, 50, size=(6, 4, 2))
        offsets = CalibrationOffsets(np.array([0.2, -0.1]), np.array([0.5, 0.3]))
        batch = build_reference_batch(
            pts, self.t_veh, self.t_inf, offsets, VEH_ROI, INF_ROI)
        assert isinstance(batch, ReferenceBatch)
        for i in range(6):
            for j in range(4):
                single = build_reference_point(
                    pts[i, j], self.t_veh, self.t_inf, offsets, VEH_ROI, INF_ROI)
                np.testing.assert_allclose(
                    batch.veh_normalized[i, j], single.veh_normalized, atol=1e-12)
                np.testing.assert_allclose(
                    batch.inf_normalized[i, j], single.inf_normalized, atol=1e-12)
                assert batch.inf_in_bounds[i, j] == single.inf_in_bounds
