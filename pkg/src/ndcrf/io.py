"""NPY v1.0 and PNG readers/writers for tensors and label maps."""

import numpy as np
from numpy.lib import format as npy_format
from PIL import Image

ALLOWED_DTYPES = (np.dtype("<f4"), np.dtype("|u1"))


class NpyFormatError(ValueError):
    """Base class for rejected NPY files."""


class MalformedHeaderError(NpyFormatError):
    pass


class UnsupportedDtypeError(NpyFormatError):
    pass


class TruncatedPayloadError(NpyFormatError):
    pass


def _read_header(fh):
    try:
        version = npy_format.read_magic(fh)
    except ValueError as exc:
        raise MalformedHeaderError(str(exc)) from None
    if version != (1, 0):
        raise MalformedHeaderError(f"only NPY version 1.0 is supported, got {version[0]}.{version[1]}")
    try:
        # dtype validation is ours; accept any descr the header parser can read
        shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
    except (ValueError, TypeError, SyntaxError) as exc:
        raise MalformedHeaderError(str(exc)) from None
    return shape, fortran, dtype


def read_npy(path):
    """Read a little-endian float32 or uint8 array from an NPY v1.0 file."""
    with open(path, "rb") as fh:
        shape, fortran, dtype = _read_header(fh)
        if dtype not in ALLOWED_DTYPES or dtype.hasobject:
            raise UnsupportedDtypeError(f"unsupported dtype {dtype.str}; expected <f4 or |u1")
        count = int(np.prod(shape, dtype=np.int64))
        payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"expected {count * dtype.itemsize} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).copy()
    return arr.reshape(shape, order="F" if fortran else "C")


def write_npy(arr, path):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4")
    elif arr.dtype.kind in "iub":
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise UnsupportedDtypeError("label maps must fit in uint8")
        arr = arr.astype("|u1")
    else:
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}")
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def read_tensor(path):
    """Float32 tensor with the channel axis last."""
    arr = read_npy(path)
    if arr.dtype != np.float32:
        raise UnsupportedDtypeError(f"{path}: tensors must be float32, got {arr.dtype}")
    return arr


def write_tensor(t, path):
    write_npy(np.asarray(t, dtype=np.float32), path)


def read_labels(path):
    arr = read_npy(path)
    if arr.dtype != np.uint8:
        raise UnsupportedDtypeError(f"{path}: label maps must be uint8, got {arr.dtype}")
    return arr


def write_labels(labels, path):
    write_npy(np.asarray(labels).astype(np.uint8), path)


def read_png(path):
    """8-bit grayscale or RGB PNG as an ``(H, W, c)`` float32 tensor in [0, 1]."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_png(t, path):
    t = np.asarray(t)
    if t.ndim == 3 and t.shape[-1] == 1:
        t = t[..., 0]
    data = np.clip(np.rint(t * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_image(path):
    """Reference image from either a PNG or an NPY tensor."""
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_tensor(path)
