import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poselab.geometry import (
    CameraIntrinsics,
    RigidTransform,
    TriangleMesh,
    TwistCoordinates,
    apply_to_point,
    compose,
    exp_twist,
    invert,
    mesh_diameter,
    project_point,
    quaternion_distance,
    rodrigues,
    twist_about_axis,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_transform(rng):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.normal(size=3))


st_seed = st.integers(min_value=0, max_value=2**32 - 1)


# --- RigidTransform construction ---------------------------------------------

def test_quaternion_canonicalized_to_positive_w():
    t = RigidTransform(np.array([-1.0, 0, 0, 0]), np.zeros(3))
    assert t.rotation[0] == pytest.approx(1.0)


def test_non_unit_quaternion_rejected():
    with pytest.raises(ValueError):
        RigidTransform(np.array([1.0, 1.0, 0, 0]), np.zeros(3))


def test_quaternion_norm_invariant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = random_transform(rng)
        assert abs(np.linalg.norm(t.rotation) - 1.0) < 1e-9


# --- exp_twist ----------------------------------------------------------------

def test_exp_twist_pure_translation():
    xi = TwistCoordinates(v=np.array([1.0, 0, 0]), omega=np.zeros(3))
    t = exp_twist(xi, 0.5)
    assert np.allclose(t.translation, [0.5, 0, 0])
    assert np.allclose(t.matrix3(), np.eye(3))


def test_exp_twist_zero_theta_is_identity():
    xi = TwistCoordinates(v=np.array([0.3, -2.0, 1.0]), omega=unit([1, 2, 3]))
    t = exp_twist(xi, 0.0)
    assert np.allclose(t.matrix4(), np.eye(4), atol=1e-12)


def test_exp_twist_half_turn_about_offset_axis():
    # screw about the vertical axis through (1,0,0); half turn reflects
    # (2,0,0) through the axis to the origin
    xi = TwistCoordinates(v=np.array([0.0, -1.0, 0.0]), omega=np.array([0.0, 0.0, 1.0]))
    t = exp_twist(xi, np.pi)
    assert np.allclose(apply_to_point(t, [2.0, 0, 0]), [0, 0, 0], atol=1e-12)


def test_exp_twist_non_unit_omega_rejected():
    with pytest.raises(ValueError):
        TwistCoordinates(v=np.zeros(3), omega=np.array([0.0, 0.0, 0.5]))


@settings(max_examples=100, deadline=None)
@given(st_seed)
def test_screw_fixes_axis_point(seed):
    # oracle: rotation about an axis through v_o is R(x - v_o) + v_o
    rng = np.random.default_rng(seed)
    omega = unit(rng.normal(size=3))
    v_o = rng.normal(size=3) * 2.0
    theta = rng.uniform(-2 * np.pi, 2 * np.pi)
    t = exp_twist(twist_about_axis(omega, v_o), theta)
    assert np.linalg.norm(apply_to_point(t, v_o) - v_o) < 1e-9
    # full-motion oracle on an off-axis point
    p = rng.normal(size=3)
    expected = rodrigues(omega, theta) @ (p - v_o) + v_o
    assert np.allclose(apply_to_point(t, p), expected, atol=1e-9)


# --- twist_about_axis ----------------------------------------------------------

def test_twist_about_axis_cross_product():
    xi = twist_about_axis([0.0, 0, 1], [1.0, 0, 0])
    assert np.allclose(xi.v, [0, -1, 0])
    assert np.allclose(xi.omega, [0, 0, 1])


def test_twist_about_axis_point_on_axis():
    xi = twist_about_axis([0.0, 0, 1], [0.0, 0, 5])
    assert np.allclose(xi.v, [0, 0, 0])


def test_twist_about_axis_rejects_zero_omega():
    with pytest.raises(ValueError):
        twist_about_axis([0.0, 0, 0], [1.0, 0, 0])


# --- compose / invert / apply --------------------------------------------------

def test_compose_identity():
    rng = np.random.default_rng(1)
    t = random_transform(rng)
    r = compose(RigidTransform.identity(), t)
    assert quaternion_distance(r.rotation, t.rotation) < 1e-12
    assert np.allclose(r.translation, t.translation)


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = random_transform(rng)
        r = compose(invert(t), t)
        assert np.allclose(r.matrix4(), np.eye(4), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st_seed)
def test_compose_matches_pointwise_application(seed):
    rng = np.random.default_rng(seed)
    ta, tb = random_transform(rng), random_transform(rng)
    p = rng.normal(size=3)
    assert np.allclose(apply_to_point(compose(ta, tb), p),
                       apply_to_point(ta, apply_to_point(tb, p)), atol=1e-9)


def test_invert_pure_translation():
    t = invert(RigidTransform(translation=np.array([1.0, 2, 3])))
    assert np.allclose(t.translation, [-1, -2, -3])
    assert np.allclose(t.matrix3(), np.eye(3))


def test_invert_hand_case():
    # 180 deg about x with t=(0,0,1): R = diag(1,-1,-1), t' = -R^T t = (0,0,1)
    t = RigidTransform(np.array([0.0, 1.0, 0, 0]), np.array([0.0, 0, 1]))
    ti = invert(t)
    assert np.allclose(ti.matrix3(), np.diag([1.0, -1.0, -1.0]), atol=1e-12)
    assert np.allclose(ti.translation, [0, 0, 1], atol=1e-12)


def test_apply_to_point_rotation_oracle():
    t = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2)
    assert np.allclose(apply_to_point(t, [1.0, 0, 0]), [0, 1, 0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st_seed)
def test_rigidity_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    p, q = rng.normal(size=3), rng.normal(size=3)
    d0 = np.linalg.norm(p - q)
    d1 = np.linalg.norm(apply_to_point(t, p) - apply_to_point(t, q))
    assert abs(d0 - d1) < 1e-9


# --- projection ----------------------------------------------------------------

INTR = CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480)


def test_project_optical_axis():
    assert project_point([0.0, 0, 2], INTR) == pytest.approx((320, 240))


def test_project_off_axis():
    u, v = project_point([0.2, 0, 2], INTR)
    assert u == pytest.approx(370.0)
    assert v == pytest.approx(240.0)


def test_project_behind_camera():
    assert project_point([0.0, 0, -1], INTR) is None


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(7)
    K = INTR.matrix()
    for _ in range(1000):
        p = rng.uniform([-1, -1, 0.1], [1, 1, 5])
        uvw = K @ p
        u, v = project_point(p, INTR)
        assert abs(u - uvw[0] / uvw[2]) < 1e-9
        assert abs(v - uvw[1] / uvw[2]) < 1e-9


# --- quaternion distance ---------------------------------------------------------

def test_quaternion_distance_identity():
    q = unit([0.3, 0.4, 0.5, 0.6])
    assert quaternion_distance(q, q) == 0.0


def test_quaternion_distance_antipode():
    q = unit([0.3, 0.4, 0.5, 0.6])
    assert quaternion_distance(q, -q) == 0.0


def test_quaternion_distance_orthogonal():
    assert quaternion_distance([1.0, 0, 0, 0], [0.0, 1, 0, 0]) == pytest.approx(np.sqrt(2))


def test_quaternion_distance_rejects_non_unit():
    with pytest.raises(ValueError):
        quaternion_distance([1.0, 1.0, 0, 0], [1.0, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st_seed)
def test_quaternion_distance_properties(seed):
    rng = np.random.default_rng(seed)
    q = unit(rng.normal(size=4))
    p = unit(rng.normal(size=4))
    d = quaternion_distance(q, p)
    assert 0.0 <= d <= np.sqrt(2) + 1e-12
    assert d == pytest.approx(quaternion_distance(p, q))
    assert d == pytest.approx(quaternion_distance(-q, p))
    assert d == pytest.approx(quaternion_distance(q, -p))


# --- mesh diameter ----------------------------------------------------------------

def test_mesh_diameter_unit_cube():
    verts = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    assert mesh_diameter(verts) == pytest.approx(np.sqrt(3))


def test_mesh_diameter_two_points():
    assert mesh_diameter(np.array([[0.0, 0, 0], [3.0, 4, 0]])) == pytest.approx(5.0)


def test_mesh_diameter_matches_brute_force():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    d2 = np.sum((pts[:, None] - pts[None, :]) ** 2, axis=2)
    assert mesh_diameter(pts) == pytest.approx(np.sqrt(d2.max()), abs=0)


def test_mesh_diameter_hull_path_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(6000, 3))
    d2max = 0.0
    for i in range(0, 6000, 500):
        chunk = pts[i:i + 500]
        d2 = np.sum((chunk[:, None] - pts[None, :]) ** 2, axis=2)
        d2max = max(d2max, d2.max())
    assert mesh_diameter(pts) == pytest.approx(np.sqrt(d2max), abs=1e-9)


def test_mesh_diameter_degenerate():
    with pytest.raises(ValueError):
        mesh_diameter(np.array([[1.0, 1, 1], [1.0, 1, 1]]))


def test_triangle_mesh_validates_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), np.array([[0, 1, 3]]))


def test_triangle_mesh_caches_diameter():
    m = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]),
                     np.array([[0, 1, 2]]))
    assert m.diameter == pytest.approx(np.sqrt(2))
