import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatgrid import tape
from splatgrid.camera import Camera, CameraIntrinsics, CameraPose, orbit_cameras, project
from splatgrid.splat import (DEPTH, OPACITY, ROTATION, SCALE, SPATIAL_CONCAT, VIEW_CONCAT, GridError,
                             Primitives, ScaleBounds, SplatGrid, activate_depth, activate_scale,
                             inverse_depth, inverse_scale, lift_grid, lift_grids, lift_tensor,
                             normalize_rotation, normalize_rotations, pack, plucker_stack, tile_views,
                             unpack, unpack_pluckers, untile_views)


def grid(h=8, w=8, seed=0, cam=None):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0, 1, (12, h, w))
    q = rng.normal(size=(4, h, w))
    raw[ROTATION] = q / np.linalg.norm(q, axis=0)
    cam = cam or orbit_cameras(1, intrinsics=CameraIntrinsics.from_fov(w, h))[0]
    return SplatGrid(raw, cam)


def test_scale_activation_examples():
    assert activate_scale(0.5) == pytest.approx(0.01025, abs=1e-15)
    assert activate_scale(1.0) == pytest.approx(5e-4)
    assert activate_scale(0.0) == pytest.approx(2e-2)
    assert activate_scale(0.25) == pytest.approx(0.0151250, abs=1e-12)


def test_depth_activation_examples():
    assert activate_depth(0.5, 1.5) == pytest.approx(1.5)
    assert activate_depth(0.0, 2.5) == pytest.approx(1.5)
    assert activate_depth(1.0, 2.5) == pytest.approx(3.5)
    assert activate_depth(0.75, 2.0) == pytest.approx(2.5)


def test_activation_range_errors():
    with pytest.raises(GridError):
        activate_scale(1.2)
    with pytest.raises(GridError):
        activate_depth(0.5, 0.9)
    with pytest.raises(GridError):
        ScaleBounds(0.1, 0.01)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1))
def test_inverse_activations(x):
    assert inverse_scale(activate_scale(x)) == pytest.approx(x, abs=1e-12)
    if 1e-3 <= x <= 1 - 1e-3:
        assert inverse_depth(activate_depth(x, 2.5), 2.5) == pytest.approx(x, abs=1e-12)


def test_normalize_rotation_examples():
    q, bad = normalize_rotation([2.0, 0, 0, 0])
    assert np.array_equal(q, [1, 0, 0, 0]) and not bad
    q, _ = normalize_rotation([1.0, 1, 1, 1])
    np.testing.assert_allclose(q, [0.5] * 4)
    q, bad = normalize_rotation([1e-12, 0, 0, 0])
    assert np.array_equal(q, [1, 0, 0, 0]) and bad


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-5, 5)))
def test_normalize_rotations_vectorized(raw):
    q, bad = normalize_rotations(raw)
    for i in range(len(raw)):
        qi, bi = normalize_rotation(raw[i])
        assert bi == bad[i]
        np.testing.assert_allclose(q[i], qi, atol=1e-12)


def test_single_pixel_grid_on_axis():
    k = CameraIntrinsics(10.0, 10.0, 0.5, 0.5, 1, 1)
    cam = orbit_cameras(1, radius=2.5, intrinsics=k)[0]
    raw = np.zeros((12, 1, 1))
    raw[ROTATION.start] = 1.0
    raw[DEPTH] = 0.5
    p = lift_grid(SplatGrid(raw, cam))
    np.testing.assert_allclose(p.positions[0], [0, 0, 0], atol=1e-12)
    uv, z = project(p.positions[0], cam)
    assert z == pytest.approx(cam.distance)


def test_zero_opacity_and_count():
    g = grid()
    g.raw[OPACITY] = 0.0
    assert np.all(lift_grid(g).opacities == 0)
    cams = orbit_cameras(4, intrinsics=CameraIntrinsics.from_fov(8))
    p = lift_grids([grid(cam=c, seed=i) for i, c in enumerate(cams)])
    assert len(p) == 256


def test_lift_respects_bounds_and_reprojects():
    g = grid(seed=3)
    p = lift_grid(g)
    p.validate()
    cam = g.camera
    uv, z = project(p.positions, cam)
    v, u = np.divmod(np.arange(64), 8)
    np.testing.assert_allclose(uv, np.stack([u + 0.5, v + 0.5], 1), atol=1e-9)
    d = cam.distance
    assert np.all((z > d - 1) & (z < d + 1))


def test_lift_tensor_matches_numpy():
    g = grid(seed=4)
    tp = lift_tensor(tape.Tensor(g.raw), g.camera).numpy()
    p = lift_grid(g)
    for f in ("colors", "positions", "scales", "rotations", "opacities"):
        np.testing.assert_allclose(getattr(tp, f), getattr(p, f), atol=1e-12)


def test_lift_tensor_gradient():
    g = grid(4, 4, seed=5)
    w = np.random.default_rng(0).normal(size=(16, 3))

    def f(x):
        p = lift_tensor(x, g.camera)
        return tape.sum_(p.positions * tape.Tensor(w)) + tape.sum_(p.scales * p.scales) + tape.sum_(
            p.rotations * p.rotations * p.rotations)

    assert tape.grad_check(f, g.raw) < 1e-6


def test_grid_validation():
    g = grid()
    g.raw[SCALE.start, 0, 0] = 1.5
    with pytest.raises(GridError, match="unit-range"):
        g.validate()
    g = grid()
    with pytest.raises(GridError, match="extent"):
        SplatGrid(g.raw[:, :4], g.camera).validate()


def test_primitives_validate_reports_first_violation():
    p = lift_grid(grid())
    p.scales[5] = 1.0
    with pytest.raises(GridError, match="primitive 5 violates scale"):
        p.validate()


def test_layout_shapes():
    rng = np.random.default_rng(0)
    d, h, w = 5, 3, 4
    lat = rng.normal(size=(4, d, h, w))
    pl = rng.normal(size=(4, 6, h, w))
    b = pack(lat, pl, VIEW_CONCAT)
    assert b.payload.shape == (4, d + 6, h, w)
    b = pack(lat, pl, SPATIAL_CONCAT, 2, 2)
    assert b.payload.shape == (d + 6, 2 * h, 2 * w)


@pytest.mark.parametrize("layout", [VIEW_CONCAT, SPATIAL_CONCAT])
def test_layout_round_trip_bit_exact(layout):
    rng = np.random.default_rng(1)
    lat = rng.normal(size=(4, 12, 6, 5))
    pl = rng.normal(size=(4, 6, 6, 5))
    cond = (rng.normal(size=(12, 6, 5)), rng.normal(size=(6, 6, 5)))
    for c in (None, cond):
        b = pack(lat, pl, layout, 2, 2, condition=c)
        assert np.array_equal(unpack(b), lat)
        assert np.array_equal(unpack_pluckers(b), pl)


def test_view_concat_condition_slot():
    rng = np.random.default_rng(2)
    lat = rng.normal(size=(4, 3, 2, 2))
    pl = rng.normal(size=(4, 6, 2, 2))
    b = pack(lat, pl, VIEW_CONCAT, condition=(np.ones((3, 2, 2)), np.zeros((6, 2, 2))))
    assert b.payload.shape[0] == 5
    assert b.payload[:, -1].sum() == 4  # one view's pixel count


def test_tile_untile_tensor_and_errors():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 2, 3, 3))
    np.testing.assert_array_equal(untile_views(tile_views(x, 2, 3), 2, 3), x)
    t = tile_views(tape.Tensor(x), 3, 2)
    np.testing.assert_array_equal(untile_views(t, 3, 2).data, x)
    with pytest.raises(GridError):
        tile_views(x, 2, 2)
    with pytest.raises(GridError):
        pack(x[:, :1], x[:, :1], SPATIAL_CONCAT, 2, 2)


def test_plucker_stack_scales_cameras():
    cams = orbit_cameras(2, intrinsics=CameraIntrinsics.from_fov(32))
    assert plucker_stack(cams, 4, 4).shape == (2, 6, 4, 4)


def test_primitives_shape_check():
    with pytest.raises(GridError):
        Primitives(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))
    assert len(Primitives.empty()) == 0


def test_camera_pose_used_by_lift():
    k = CameraIntrinsics(4.0, 4.0, 1.0, 1.0, 2, 2)
    cam = Camera(k, CameraPose(np.eye(3), [0.0, 0.0, 3.0]))
    raw = np.zeros((12, 2, 2))
    raw[ROTATION.start] = 1.0
    raw[DEPTH] = 0.5
    p = lift_grid(SplatGrid(raw, cam))
    np.testing.assert_allclose(p.positions[:, 2], 0.0, atol=1e-12)
