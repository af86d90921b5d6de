import numpy as np
import pytest

from vibe.errors import BehindPlane, DegenerateConfiguration, TooFewPoints
from vibe.geometry import (
    Calibration,
    DistortionModel,
    Homography,
    PinholeCamera,
    distort_point,
    dump_calibration,
    estimate_homography,
    ground_to_image,
    image_to_ground,
    load_calibration,
    undistort_point,
)

ZERO_HEIGHTS = {c: 0.0 for c in ("car", "bus", "truck", "pedestrian", "bicycle")}


def random_homography(rng):
    m = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    m[2, :2] = 1e-4 * rng.standard_normal(2)
    m[2, 2] = 1.0
    return m


def forward(h, pts):
    hp = np.c_[pts, np.ones(len(pts))] @ h.T
    return hp[:, :2] / hp[:, 2:3]


def test_identity_on_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    h = estimate_homography(np.c_[sq, sq])
    np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-12)


def test_known_homography_recovered():
    true = np.array([[2.0, 0, 1], [0, 2, -1], [0, 0, 1]])
    rng = np.random.default_rng(1)
    img = rng.uniform(-5, 5, size=(8, 2))
    h, resid = estimate_homography(np.c_[img, forward(true, img)], return_residual=True)
    assert np.max(np.abs(h.matrix - true)) < 1e-9
    assert resid < 1e-9


def test_collinear_points_degenerate():
    pts = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(np.c_[pts, pts * 2])


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_homography([[0, 0, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1]])


def test_exact_on_random_homographies():
    rng = np.random.default_rng(7)
    for _ in range(100):
        true = random_homography(rng)
        img = rng.uniform(0, 1000, size=(10, 2))
        h = estimate_homography(np.c_[img, forward(true, img)])
        assert h.matrix[2, 2] == 1.0
        assert np.max(np.abs(h.matrix - true)) <= 1e-9


def test_zero_distortion_is_identity():
    d = DistortionModel(center=(640, 360))
    p = np.array([12.5, 700.25])
    np.testing.assert_array_equal(undistort_point(p, d), p)


def test_center_is_fixed_point():
    d = DistortionModel(center=(640, 360), k1=-0.3, k2=0.1, normalization_radius=800)
    np.testing.assert_allclose(undistort_point([640, 360], d), [640, 360])


def test_distortion_round_trip():
    d = DistortionModel(center=(640, 360), k1=-0.1, normalization_radius=1280)
    xs, ys = np.meshgrid(np.linspace(0, 1280, 10), np.linspace(0, 720, 10))
    grid = np.c_[xs.ravel(), ys.ravel()]
    for p in grid:
        back = undistort_point(distort_point(p, d), d)
        assert np.linalg.norm(back - p) < 1e-6


def test_identity_projection_of_box():
    calib = Calibration(Homography(np.eye(3)), class_heights=ZERO_HEIGHTS)
    np.testing.assert_allclose(image_to_ground((8, 5, 12, 20), "car", calib), [10, 20])


def test_collinearity_preserved():
    rng = np.random.default_rng(3)
    calib = Calibration(Homography(random_homography(rng)), class_heights=ZERO_HEIGHTS)
    boxes = [(x - 5, 0, x + 5, 100 + 0.5 * x) for x in (10.0, 200.0, 400.0)]
    g = np.array([image_to_ground(b, "car", calib) for b in boxes])
    v1, v2 = g[1] - g[0], g[2] - g[0]
    assert abs(v1[0] * v2[1] - v1[1] * v2[0]) < 1e-9 * np.linalg.norm(v1) * np.linalg.norm(v2)


def test_behind_plane():
    m = np.eye(3)
    m[2, 0] = -0.01
    calib = Calibration(Homography(m), class_heights=ZERO_HEIGHTS)
    with pytest.raises(BehindPlane):
        image_to_ground((190, 0, 210, 10), "car", calib)


def _scene_camera():
    return PinholeCamera(position=(-30.0, -30.0, 25.0), target=(0.0, 0.0, 0.0))


def test_pinhole_scene_with_class_heights():
    """Independent oracle: project raised 3D points with the pinhole model."""
    cam = _scene_camera()
    rng = np.random.default_rng(11)
    landmarks = rng.uniform(-30, 30, size=(12, 2))
    img = cam.project(np.c_[landmarks, np.zeros(len(landmarks))])
    hom = estimate_homography(np.c_[img, landmarks])
    heights = {"car": 0.5, "bus": 0.9, "truck": 0.9, "pedestrian": 0.0, "bicycle": 0.3}
    calib = Calibration(hom, DistortionModel(), heights, cam.position[:2], cam.position[2])
    classes = list(heights)
    errors = []
    for i in range(50):
        cls = classes[i % len(classes)]
        truth = rng.uniform(-25, 25, size=2)
        ref = cam.project([[truth[0], truth[1], heights[cls]]])[0]
        box = (ref[0] - 20, ref[1] - 30, ref[0] + 20, ref[1])
        errors.append(np.linalg.norm(image_to_ground(box, cls, calib) - truth))
    assert max(errors) < 0.05


def test_ground_to_image_round_trip():
    cam = _scene_camera()
    dist = DistortionModel(center=(640, 360), k1=-0.05, normalization_radius=1280)
    calib = cam.calibration(distortion=dist)
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = rng.uniform(-25, 25, size=2)
        for cls in ("car", "pedestrian"):
            u = ground_to_image(p, cls, calib)
            box = (u[0] - 10, u[1] - 20, u[0] + 10, u[1])
            assert np.linalg.norm(image_to_ground(box, cls, calib) - p) < 1e-6


def test_calibration_file_round_trip(tmp_path):
    calib = _scene_camera().calibration(distortion=DistortionModel((640, 360), -0.05, 0.01, 1280))
    path = tmp_path / "calib.ini"
    path.write_text(dump_calibration(calib))
    back = load_calibration(path)
    np.testing.assert_array_equal(back.homography.matrix, calib.homography.matrix)
    assert back.distortion == calib.distortion
    assert back.class_heights == calib.class_heights
    assert back.camera_foot == calib.camera_foot
    assert dump_calibration(back) == dump_calibration(calib)
