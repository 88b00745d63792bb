import json
import struct

import numpy as np
import pytest

from d2t.geometry import Pose
from d2t.pipeline.formats import (FormatError, decode_model, decode_pfm, encode_model, encode_pfm, read_json,
                                  read_pfm, read_png, read_poses, write_json, write_pfm, write_png, write_poses)
from d2t.splat_renderer import GaussianCloud

from conftest import random_pose


def test_pfm_round_trip(tmp_path, rng):
    a = rng.standard_normal((5, 7)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "a.pfm", a)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), a)


def test_pfm_header_and_row_order():
    data = encode_pfm(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert data.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first, little-endian
    assert struct.unpack("<4f", data[-16:]) == (3.0, 4.0, 1.0, 2.0)


def test_pfm_big_endian_accepted():
    payload = struct.pack(">2f", 1.5, -2.0)
    np.testing.assert_array_equal(decode_pfm(b"Pf\n2 1\n1.0\n" + payload), [[1.5, -2.0]])


def test_pfm_truncated_reports_offset(tmp_path):
    good = encode_pfm(np.ones((4, 4)))
    (tmp_path / "t.pfm").write_bytes(good[:-5])
    with pytest.raises(FormatError) as info:
        read_pfm(tmp_path / "t.pfm")
    assert "t.pfm" in str(info.value)
    assert info.value.offset == len(good) - 5


@pytest.mark.parametrize("blob,offset", [(b"P5\n2 2\n-1\n", 0), (b"Pf\nx 2\n-1\n", 3), (b"Pf\n2", 4)])
def test_pfm_bad_headers(blob, offset):
    with pytest.raises(FormatError) as info:
        decode_pfm(blob)
    assert info.value.offset == offset


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((6, 9, 3)) * 255) / 255
    write_png(tmp_path / "x.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "x.png"), img, atol=1e-12)


def test_png_unreadable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        read_png(tmp_path / "bad.png")


def test_poses_round_trip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(3)]
    write_poses(tmp_path / "p.json", poses)
    back = read_poses(tmp_path / "p.json")
    for a, b in zip(poses, back):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-15)
    data = json.loads((tmp_path / "p.json").read_text())
    assert data["convention"] == "world_to_camera_row_major"
    np.testing.assert_allclose(np.array(data["poses"][0])[:3, 3], poses[0].translation)


def test_json_error_offset(tmp_path):
    (tmp_path / "c.json").write_text('{"a": 1,, }')
    with pytest.raises(FormatError) as info:
        read_json(tmp_path / "c.json")
    assert info.value.offset == 8  # the second comma


def test_json_sorted_and_deterministic(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    write_json(tmp_path / "b.json", {"a": [1.5, 2], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_model_layout(rng):
    c = GaussianCloud([[1, 2, 3]], [[-1, -2, -3]], [[1, 0, 0, 0]], [0.5], [[0.1, 0.2, 0.3]])
    data = encode_model(c)
    assert len(data) == 14 * 4
    vals = struct.unpack("<14f", data)
    np.testing.assert_allclose(vals, [1, 2, 3, -1, -2, -3, 1, 0, 0, 0, 0.5, 0.1, 0.2, 0.3], rtol=1e-7)


def test_model_round_trip_and_truncation(rng):
    n = 10
    q = rng.standard_normal((n, 4))
    c = GaussianCloud(rng.random((n, 3)), rng.random((n, 3)), q, rng.random(n), rng.random((n, 3)))
    back = decode_model(encode_model(c))
    np.testing.assert_allclose(back.positions, c.positions, rtol=1e-6)
    assert len(decode_model(b"")) == 0
    with pytest.raises(FormatError) as info:
        decode_model(encode_model(c)[:-3])
    assert info.value.offset == 9 * 56
