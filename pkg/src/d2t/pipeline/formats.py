"""File formats shared with external tools.

* PFM for float maps: one channel per file, little-endian, rows stored bottom-up
  as the format requires.
* 8-bit PNG for color images and masks.
* JSON for poses (4x4 row-major world-to-camera matrices) and configs.
* ``model.bin``: a little-endian stream of float32 Gaussian records laid out as
  position[3], log_scale[3], quaternion(w, x, y, z)[4], opacity_logit[1], color[3].

Every writer goes through a temporary file in the target directory followed by
an atomic rename.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Pose
from ..splat_renderer import GaussianCloud

RECORD_FLOATS = 14
RECORD_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """A malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {reason}")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------- PFM


def encode_pfm(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PFM writer takes a single-channel 2D map, got shape {values.shape}")
    H, W = values.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(values[::-1], dtype="<f4").tobytes()


def decode_pfm(data: bytes, path="<bytes>") -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        # skip whitespace between header tokens
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated header")
        fields.append((start, data[start:pos]))
    pos += 1  # the single whitespace byte ending the header
    (o0, magic), (o1, w), (o2, h), (o3, scale) = fields
    if magic == b"PF":
        raise FormatError(path, o0, "three-channel PFM not supported; store one channel per file")
    if magic != b"Pf":
        raise FormatError(path, o0, f"bad magic {magic!r}")
    try:
        W, H = int(w), int(h)
    except ValueError:
        raise FormatError(path, o1, "non-integer dimensions") from None
    if W <= 0 or H <= 0:
        raise FormatError(path, o1, f"non-positive dimensions {W}x{H}")
    try:
        s = float(scale)
    except ValueError:
        raise FormatError(path, o3, "non-numeric scale") from None
    if s == 0:
        raise FormatError(path, o3, "scale must be non-zero")
    need = W * H * 4
    if len(data) - pos < need:
        raise FormatError(path, len(data), f"truncated payload: expected {need} bytes, found {len(data) - pos}")
    dtype = "<f4" if s < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return arr[::-1].astype(np.float64)


def write_pfm(path, values: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pfm(values))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes(), path)


# --------------------------------------------------------------------------- PNG


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Save a float image in [0, 1] (gray 2D or RGB 3D) as 8-bit PNG."""
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    """Load an 8-bit PNG as float RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise FormatError(path, 0, f"unreadable PNG ({exc})") from None
    return arr


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


# --------------------------------------------------------------------------- JSON


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(path, offset, exc.msg) from None


def poses_to_json(poses) -> list:
    return [p.matrix().tolist() for p in poses]


def poses_from_json(rows, path="<json>") -> list[Pose]:
    out = []
    for k, m in enumerate(rows):
        arr = np.asarray(m, dtype=np.float64)
        if arr.shape != (4, 4):
            raise FormatError(path, 0, f"pose {k} has shape {arr.shape}, expected 4x4")
        out.append(Pose.from_matrix(arr))
    return out


def write_poses(path, poses) -> None:
    write_json(path, {"convention": "world_to_camera_row_major", "poses": poses_to_json(poses)})


def read_poses(path) -> list[Pose]:
    data = read_json(path)
    rows = data["poses"] if isinstance(data, dict) else data
    return poses_from_json(rows, path)


# --------------------------------------------------------------------------- model.bin


def encode_model(cloud: GaussianCloud) -> bytes:
    rec = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.quaternions,
        cloud.opacity_logits[:, None], cloud.colors,
    ], axis=1)
    return np.ascontiguousarray(rec, dtype=RECORD_DTYPE).tobytes()


def decode_model(data: bytes, path="<bytes>") -> GaussianCloud:
    size = RECORD_FLOATS * RECORD_DTYPE.itemsize
    if len(data) % size:
        whole = len(data) // size * size
        raise FormatError(path, whole, f"trailing partial record ({len(data) - whole} of {size} bytes)")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE).reshape(-1, RECORD_FLOATS).astype(np.float64)
    if len(rec) == 0:
        return GaussianCloud.empty()
    return GaussianCloud(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14])


def write_model(path, cloud: GaussianCloud) -> None:
    atomic_write_bytes(path, encode_model(cloud))


def read_model(path) -> GaussianCloud:
    return decode_model(Path(path).read_bytes(), path)
