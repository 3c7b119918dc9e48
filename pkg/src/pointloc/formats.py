"""Binary and text file formats.

All binary formats are little-endian with a 4-byte ASCII magic; byte
level layouts are documented in formats.md at the repository root.
Loaders validate the magic and declared lengths before touching the
payload and report the byte offset of the first problem.  Save->load
round-trips are bit-exact at f32 precision.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, TruncatedFile, VersionMismatch
from .geometry import Camera, Pose
from .mlp import Dense, Mlp
from .pointfield import PointField, build_field

MAGIC_POINTFIELD = b"PNPF"
MAGIC_DESCRIPTOR_MAP = b"PNDM"
MAGIC_DEPTH = b"PNDP"
MAGIC_IMAGE = b"PNIM"
MAGIC_MASK = b"PNMK"
MAGIC_MLP = b"PNML"

_ACTIVATION_CODES = {"linear": 0, "tanh": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


def _read_exact(f, n, offset, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"expected {n} bytes for {what}, got {len(data)}",
                            offset=offset + len(data))
    return data


def _check_magic(f, magic):
    got = f.read(4)
    if len(got) < 4:
        raise TruncatedFile("file shorter than its magic", offset=len(got))
    if got != magic:
        raise BadMagic(f"expected {magic!r}, found {got!r}", offset=0)


def _read_f32(f, count, offset, what):
    data = _read_exact(f, 4 * count, offset, what)
    return np.frombuffer(data, dtype="<f4", count=count).astype(np.float64)


# -- point field -------------------------------------------------------------

def save_pointfield(path, field: PointField):
    n = len(field)
    fa = field.descriptors.shape[1]
    fr = field.features.shape[1]
    with open(path, "wb") as f:
        f.write(MAGIC_POINTFIELD)
        f.write(struct.pack("<IQII", 1, n, fa, fr))
        record = np.concatenate([
            field.positions, field.confidences[:, None], field.scores[:, None],
            field.descriptors, field.features], axis=1).astype("<f4")
        f.write(record.tobytes())


def load_pointfield(path, **build_kwargs) -> PointField:
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_POINTFIELD)
        header = _read_exact(f, 20, 4, "point-field header")
        version, n, fa, fr = struct.unpack("<IQII", header)
        if version != 1:
            raise VersionMismatch(f"point-field version {version}", offset=4)
        width = 3 + 1 + 1 + fa + fr
        flat = _read_f32(f, n * width, 24, "point records").reshape(n, width)
    return build_field(flat[:, :3], flat[:, 5:5 + fa], flat[:, 5 + fa:],
                       confidences=flat[:, 3], scores=flat[:, 4],
                       feature_dim=fr, **build_kwargs)


# -- dense maps / images -------------------------------------------------------

def save_descriptor_map(path, data):
    data = np.asarray(data, dtype=np.float64)
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(MAGIC_DESCRIPTOR_MAP)
        f.write(struct.pack("<III", w, h, c))
        f.write(data.astype("<f4").tobytes())


def load_descriptor_map(path):
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_DESCRIPTOR_MAP)
        w, h, c = struct.unpack("<III", _read_exact(f, 12, 4, "map header"))
        return _read_f32(f, w * h * c, 16, "map data").reshape(h, w, c)


def save_depth(path, depth):
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(MAGIC_DEPTH)
        f.write(struct.pack("<II", w, h))
        f.write(depth.astype("<f4").tobytes())


def load_depth(path):
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_DEPTH)
        w, h = struct.unpack("<II", _read_exact(f, 8, 4, "depth header"))
        return _read_f32(f, w * h, 12, "depth data").reshape(h, w)


def save_image_f32(path, image):
    """Lossless planar f32 image: (H, W) or (H, W, C)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(MAGIC_IMAGE)
        f.write(struct.pack("<III", w, h, c))
        f.write(np.moveaxis(img, 2, 0).astype("<f4").tobytes())


def load_image_f32(path):
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_IMAGE)
        w, h, c = struct.unpack("<III", _read_exact(f, 12, 4, "image header"))
        planes = _read_f32(f, w * h * c, 16, "image data").reshape(c, h, w)
    img = np.moveaxis(planes, 0, 2)
    return img[:, :, 0] if c == 1 else img


def save_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(MAGIC_MASK)
        f.write(struct.pack("<II", w, h))
        f.write(np.where(mask, 0xFF, 0x00).astype(np.uint8).tobytes())


def load_mask(path):
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_MASK)
        w, h = struct.unpack("<II", _read_exact(f, 8, 4, "mask header"))
        data = _read_exact(f, w * h, 12, "mask data")
    return (np.frombuffer(data, dtype=np.uint8).reshape(h, w) != 0)


def save_png(path, image):
    """8-bit PNG for eyeballing; values are clipped to [0, 1] first."""
    from PIL import Image
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path):
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


# -- MLP checkpoints -----------------------------------------------------------

def save_mlp(path, mlp: Mlp):
    with open(path, "wb") as f:
        f.write(MAGIC_MLP)
        f.write(struct.pack("<II", 1, len(mlp.layers)))
        for layer in mlp.layers:
            f.write(struct.pack("<III", layer.in_dim, layer.out_dim,
                                _ACTIVATION_CODES[layer.activation]))
        for layer in mlp.layers:
            f.write(layer.weight.astype("<f4").tobytes())
            f.write(layer.bias.astype("<f4").tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_MLP)
        version, n_layers = struct.unpack("<II", _read_exact(f, 8, 4, "mlp header"))
        if version != 1:
            raise VersionMismatch(f"mlp version {version}", offset=4)
        dims = []
        offset = 12
        for _ in range(n_layers):
            dims.append(struct.unpack("<III",
                                      _read_exact(f, 12, offset, "layer dims")))
            offset += 12
        layers = []
        for in_dim, out_dim, act in dims:
            W = _read_f32(f, out_dim * in_dim, offset,
                          "weights").reshape(out_dim, in_dim)
            offset += 4 * out_dim * in_dim
            b = _read_f32(f, out_dim, offset, "biases")
            offset += 4 * out_dim
            layers.append(Dense(W, b, _ACTIVATION_NAMES[act]))
    mlp = Mlp.__new__(Mlp)
    mlp.layers = layers
    return mlp


# -- text formats ----------------------------------------------------------------

def pose_to_line(pose: Pose) -> str:
    q = pose.to_quaternion()
    vals = list(q) + list(pose.translation)
    return " ".join(f"{v:.17g}" for v in vals)


def pose_from_line(line: str) -> Pose:
    vals = [float(v) for v in line.split()]
    if len(vals) != 7:
        raise ValueError(f"pose line needs 7 values, got {len(vals)}")
    return Pose.from_quaternion(vals[:4], vals[4:])


def save_poses(path, poses):
    with open(path, "w") as f:
        for pose in poses:
            f.write(pose_to_line(pose) + "\n")


def load_poses(path):
    with open(path) as f:
        return [pose_from_line(line) for line in f if line.strip()]


def camera_to_line(camera: Camera) -> str:
    return (f"{camera.fx:.17g} {camera.fy:.17g} {camera.cx:.17g} "
            f"{camera.cy:.17g} {camera.width} {camera.height}")


def camera_from_line(line: str) -> Camera:
    vals = line.split()
    if len(vals) != 6:
        raise ValueError(f"camera line needs 6 values, got {len(vals)}")
    return Camera(float(vals[0]), float(vals[1]), float(vals[2]),
                  float(vals[3]), int(vals[4]), int(vals[5]))


def save_cameras(path, cameras):
    with open(path, "w") as f:
        for cam in cameras:
            f.write(camera_to_line(cam) + "\n")


def load_cameras(path):
    with open(path) as f:
        return [camera_from_line(line) for line in f if line.strip()]
