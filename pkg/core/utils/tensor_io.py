"""
Named-tensor container on disk.

Layout (all little-endian):
    magic b'DNV3' | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | extents u32 * rank
                | dtype tag u8 | raw data
Writes are atomic: the file is written next to its target and renamed.
"""
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from ..exceptions import DinoLabError

MAGIC = b'DNV3'
FORMAT_VERSION = 1

DTYPE_TAGS = {
    np.dtype('<f4'): 0,
    np.dtype('<f8'): 1,
    np.dtype('<i8'): 2,
    np.dtype('u1'): 3,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class ContainerFormatError(DinoLabError):
    pass


def _as_array(value) -> np.ndarray:
    array = np.asarray(getattr(value, 'data', value))
    kind = array.dtype.kind
    if kind == 'f':
        dtype = np.dtype('<f8') if array.dtype.itemsize == 8 else np.dtype('<f4')
    elif kind == 'b' or array.dtype == np.uint8:
        dtype = np.dtype('u1')
    elif kind in 'iu':
        dtype = np.dtype('<i8')
    else:
        raise ContainerFormatError(f'Unsupported dtype {array.dtype}')
    return np.ascontiguousarray(array.astype(dtype, copy=False))


def encode_tensors(tensors: Mapping[str, object]) -> bytes:
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = _as_array(value)
        tag = DTYPE_TAGS.get(array.dtype)
        if tag is None:
            raise ContainerFormatError(f'Unsupported dtype {array.dtype} for tensor {name!r}')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(struct.pack('<B', tag))
        chunks.append(array.tobytes(order='C'))
    return b''.join(chunks)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ContainerFormatError('Not a DNV3 tensor container')
    version, count = struct.unpack_from('<II', blob, 4)
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f'Unsupported container version {version}')
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (rank,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        shape = struct.unpack_from(f'<{rank}I', blob, offset)
        offset += 4 * rank
        (tag,) = struct.unpack_from('<B', blob, offset)
        offset += 1
        dtype = TAG_DTYPES.get(tag)
        if dtype is None:
            raise ContainerFormatError(f'Unknown dtype tag {tag} for tensor {name!r}')
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=offset).reshape(shape).copy()
        offset += nbytes
    return tensors


def atomic_write_bytes(path, payload: bytes) -> Path:
    """Write to a temp file in the same directory, fsync, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_tensors(path, tensors: Mapping[str, object]) -> Path:
    return atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode('utf-8'), dtype=np.uint8).copy()


def tensor_to_text(array: np.ndarray) -> str:
    return np.asarray(array, dtype=np.uint8).tobytes().decode('utf-8')
