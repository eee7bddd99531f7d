import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from helpers import random_scene
from splatembed.errors import DataError, FormatError
from splatembed.scene import (LOGIT_CLAMP, SH_C0, CameraPose, GaussianScene, ImageRGB, covariances,
                              load_cameras, load_scene, quat_to_rotmat, save_cameras, save_scene)


def _assert_scene_close(a, b, tol=1e-6):
    assert len(a) == len(b)
    for name in ("means", "scales", "rotations", "opacities", "colors"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=tol, rtol=0, err_msg=name)


def _write_ply(path, fields, rows, fmt="binary_little_endian"):
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {f}" for f in fields] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        for r in rows:
            fh.write(struct.pack("<" + "f" * len(fields), *r))


FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
          "rot_0", "rot_1", "rot_2", "rot_3"]


def test_identity_record(tmp_path):
    p = tmp_path / "one.ply"
    _write_ply(p, FIELDS, [[1, 2, 3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]])
    s = load_scene(p)
    np.testing.assert_array_equal(s.rotations[0], [1, 0, 0, 0])
    np.testing.assert_array_equal(s.scales[0], [1, 1, 1])
    assert s.opacities[0] == 0.5
    np.testing.assert_array_equal(s.colors[0], [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(s.means[0], [1, 2, 3])


def test_round_trip_random_100(tmp_path, rng):
    scene = random_scene(rng, 100, spread=5.0, depth=(-2, 2), opacity=(0.01, 0.99))
    save_scene(scene, tmp_path / "s.ply")
    _assert_scene_close(load_scene(tmp_path / "s.ply"), scene)


@given(seed=st.integers(0, 2**31), n=st.integers(0, 30))
def test_round_trip_property(tmp_path, seed, n):
    scene = random_scene(np.random.default_rng(seed), n, spread=8.0, depth=(-3, 3), opacity=(0.001, 0.999))
    p = tmp_path / f"rt_{seed}_{n}.ply"
    save_scene(scene, p)
    _assert_scene_close(load_scene(p), scene)


def test_empty_scene_round_trip(tmp_path):
    save_scene(GaussianScene.empty(), tmp_path / "e.ply")
    assert len(load_scene(tmp_path / "e.ply")) == 0


def test_opacity_one_clamps_logit(tmp_path):
    s = GaussianScene([[0, 0, 0]], [[1, 1, 1]], [[1, 0, 0, 0]], [1.0], [[0.2, 0.4, 0.6]])
    save_scene(s, tmp_path / "o.ply")
    raw = (tmp_path / "o.ply").read_bytes()
    body = raw[raw.index(b"end_header\n") + len(b"end_header\n"):]
    rec = np.frombuffer(body, dtype="<f4")
    assert rec[9] == pytest.approx(LOGIT_CLAMP)
    assert load_scene(tmp_path / "o.ply").opacities[0] == pytest.approx(1 / (1 + np.exp(-15)))


def test_missing_property_named(tmp_path):
    p = tmp_path / "m.ply"
    _write_ply(p, [f for f in FIELDS if f != "rot_2"], [[0] * 13])
    with pytest.raises(FormatError, match="rot_2"):
        load_scene(p)


def test_non_finite_names_record(tmp_path):
    p = tmp_path / "n.ply"
    rows = [[0] * 10 + [1, 0, 0, 0] for _ in range(3)]
    rows[2][1] = float("nan")
    _write_ply(p, FIELDS, rows)
    with pytest.raises(DataError, match="record 2"):
        load_scene(p)


def test_ascii_ply_rejected(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(FormatError, match="binary_little_endian"):
        load_scene(p)


def test_list_property_rejected(tmp_path):
    p = tmp_path / "l.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement face 0\n"
                  b"property list uchar int vertex_indices\nend_header\n")
    with pytest.raises(FormatError, match="list"):
        load_scene(p)


def test_extra_properties_and_elements_ignored(tmp_path):
    p = tmp_path / "x.ply"
    fields = FIELDS + ["f_rest_0"]
    _write_ply(p, fields, [[0, 0, 1] + [0] * 7 + [2, 0, 0, 0] + [5]])
    s = load_scene(p)
    np.testing.assert_allclose(s.rotations[0], [1, 0, 0, 0])  # normalized on load


def test_sh_dc_decoding(tmp_path):
    p = tmp_path / "c.ply"
    _write_ply(p, FIELDS, [[0, 0, 0, 1.0, -1.0, 10.0, 0, 0, 0, 0, 1, 0, 0, 0]])
    c = load_scene(p).colors[0]
    np.testing.assert_allclose(c, [0.5 + SH_C0, 0.5 - SH_C0, 1.0], atol=1e-7)


@given(q=hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)), s=hnp.arrays(np.float64, 3, elements=st.floats(0.01, 3)))
def test_covariance_spd(q, s):
    if np.linalg.norm(q) < 1e-3:
        return
    q = q / np.linalg.norm(q)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    cov = covariances(s[None], q[None])[0]
    np.testing.assert_allclose(cov, cov.T, atol=1e-14)
    assert np.linalg.eigvalsh(cov).min() > 0
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s ** 2), rtol=1e-9)


def test_scene_accessors(rng):
    s = random_scene(rng, 10, depth=(-1, 1))
    g = s[3]
    assert g.id == 3 and g.opacity == s.opacities[3]
    np.testing.assert_allclose(g.covariance(), s.covariances()[3])
    lo, hi = s.bbox
    assert np.all(s.means >= lo) and np.all(s.means <= hi)
    np.testing.assert_array_equal(s.ids, np.arange(10))
    sub = s.select([7, 2])
    np.testing.assert_array_equal(sub.means, s.means[[7, 2]])
    s.validate()


def test_validate_catches_bad_fields():
    base = dict(means=[[0, 0, 0]], scales=[[1, 1, 1]], rotations=[[1, 0, 0, 0]], opacities=[0.5], colors=[[0, 0, 0]])
    for key, bad in (("rotations", [[2, 0, 0, 0]]), ("scales", [[1, 0, 1]]), ("opacities", [1.5])):
        with pytest.raises(DataError):
            GaussianScene(**{**base, key: bad}).validate()


# -- cameras ------------------------------------------------------------------

def _identity_cam(i=0):
    return CameraPose(i, 100.0, 100.0, 64.0, 64.0, np.eye(3), np.zeros(3), 128, 128)


def test_identity_pose_record(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\n0 100 100 64 64 1 0 0 0 1 0 0 0 1 0 0 0 128 128\n")
    (cam,) = load_cameras(p)
    np.testing.assert_array_equal(cam.R, np.eye(3))
    np.testing.assert_array_equal(cam.t, np.zeros(3))
    np.testing.assert_array_equal(cam.K, [[100, 0, 64], [0, 100, 64], [0, 0, 1]])


def test_reflection_rejected(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 100 100 64 64 -1 0 0 0 1 0 0 0 1 0 0 0 128 128\n")
    with pytest.raises(DataError, match="determinant"):
        load_cameras(p)


def test_non_orthonormal_rejected(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 100 100 64 64 1.01 0 0 0 1 0 0 0 1 0 0 0 128 128\n")
    with pytest.raises(DataError, match="orthonormal"):
        load_cameras(p)


def test_bad_field_count(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 100 100 64 64\n")
    with pytest.raises(FormatError, match="19 fields"):
        load_cameras(p)


def test_invalid_intrinsics():
    with pytest.raises(DataError):
        CameraPose(0, -1.0, 100.0, 64.0, 64.0, np.eye(3), np.zeros(3), 128, 128).validate()
    with pytest.raises(DataError):
        CameraPose(0, 100.0, 100.0, 200.0, 64.0, np.eye(3), np.zeros(3), 128, 128).validate()


def test_camera_file_252_poses(tmp_path, rng):
    cams = []
    for i in range(252):
        eye = rng.normal(size=3) * 5 + [0, 0, 8]
        cams.append(CameraPose.look_at(i, eye, rng.normal(size=3), [0, 1, 0], 500, 480, 648, 484))
    save_cameras(cams, tmp_path / "c.txt")
    loaded = load_cameras(tmp_path / "c.txt")
    assert len(loaded) == 252
    for a, b in zip(cams, loaded):
        assert (a.image_id, a.width, a.height) == (b.image_id, b.width, b.height)
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)


def test_look_at_conventions():
    cam = CameraPose.look_at(0, [0, 0, 5], [0, 0, 0], [0, 1, 0], 100, 100, 64, 64)
    cam.validate()
    # the target sits on the optical axis, in front of the camera
    xc = cam.R @ np.zeros(3) + cam.t
    assert xc[2] == pytest.approx(5.0)
    np.testing.assert_allclose(xc[:2], 0, atol=1e-12)


def test_rescaled_keeps_pixel_centers():
    cam = _identity_cam()
    half = cam.rescaled(64, 64)
    assert half.fx == 50.0
    # integer pixel centers: the edge at -0.5 stays at -0.5 after scaling
    assert half.cx == pytest.approx((64 + 0.5) / 2 - 0.5)
    assert cam.rescaled(128, 128) is cam


# -- images -------------------------------------------------------------------

def test_image_round_trip(tmp_path, rng):
    px = rng.integers(0, 256, (7, 9, 3)) / 255.0
    img = ImageRGB(4, 9, 7, px)
    img.save(tmp_path / "i.png")
    back = ImageRGB.load(tmp_path / "i.png", 4)
    np.testing.assert_allclose(back.pixels, px, atol=1e-12)


def test_image_shape_checked():
    with pytest.raises(DataError):
        ImageRGB(0, 4, 4, np.zeros((3, 4, 3)))
