"""
Binary codecs for images, attribution maps and masks.

BTEN: magic "BTEN", u32 version, u32 W, u32 H, u32 C, then W*H*C little-endian f32.
      Values are laid out as [row][column][channel].
      2-D maps are stored with C = 1.
BMSK: magic "BMSK", u32 W, u32 H, then W*H bytes in {0, 1}, row-major.

All integers are little-endian.
"""

import struct

import numpy as np

TENSOR_MAGIC = b'BTEN'
TENSOR_VERSION = 1
MASK_MAGIC = b'BMSK'


class CodecError(ValueError):
    pass


def dumps_tensor(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise CodecError(f'Tensor must be 2-D or 3-D, got shape {values.shape}')
    h, w, c = values.shape
    header = TENSOR_MAGIC + struct.pack('<IIII', TENSOR_VERSION, w, h, c)
    return header + np.ascontiguousarray(values, dtype='<f4').tobytes()


def loads_tensor(data: bytes, squeeze: bool = False) -> np.ndarray:
    if len(data) < 20:
        raise CodecError('truncated header')
    if data[:4] != TENSOR_MAGIC:
        raise CodecError('bad magic')
    version, w, h, c = struct.unpack('<IIII', data[4:20])
    if version != TENSOR_VERSION:
        raise CodecError(f'unsupported version {version}')
    if len(data) != 20 + 4 * w * h * c:
        raise CodecError(f'payload size does not match shape {(w, h, c)}')
    values = np.frombuffer(data, dtype='<f4', offset=20).astype(np.float64).reshape(h, w, c)
    if squeeze and c == 1:
        values = values[:, :, 0]
    return values


def dumps_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CodecError(f'Mask must be 2-D, got shape {mask.shape}')
    h, w = mask.shape
    return MASK_MAGIC + struct.pack('<II', w, h) + mask.astype(np.uint8).tobytes()


def loads_mask(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise CodecError('truncated header')
    if data[:4] != MASK_MAGIC:
        raise CodecError('bad magic')
    w, h = struct.unpack('<II', data[4:12])
    if len(data) != 12 + w * h:
        raise CodecError(f'payload size does not match shape {(w, h)}')
    raw = np.frombuffer(data, dtype=np.uint8, offset=12).reshape(h, w)
    if raw.max(initial=0) > 1:
        raise CodecError('mask values must be 0 or 1')
    return raw.astype(bool)
