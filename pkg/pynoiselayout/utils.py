"""Utilities for seeding, checksums and array codecs.
"""
import base64
import hashlib
import json
from typing import Iterable, Union

import numpy as np

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK64 = (1 << 64) - 1


def fnv64(data: bytes) -> str:
    """64-bit FNV-1a hash of a byte string as 16 hex characters."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return f'{h:016x}'


def array_checksum(arr: np.ndarray) -> str:
    """SHA-256 of the row-major float64 bytes of an array, as hex."""
    raw = np.ascontiguousarray(arr, dtype=np.float64).tobytes()
    return hashlib.sha256(raw).hexdigest()


def stream_key(seed: int, *stream: Union[int, str]) -> int:
    """Derive a 128-bit Philox key from a seed and a stream path.

    Args:
        seed: The user seed (low 64 bits used).
        *stream: Labels identifying the random stream, e.g. `('noise', t)`.

    Returns:
        Integer key; the seed occupies the low word, the stream hash the
            high word.
    """
    tag = '/'.join(str(s) for s in stream).encode()
    stream_hash = int(fnv64(tag), 16)
    return (stream_hash << 64) | (int(seed) & _MASK64)


def philox(seed: int, *stream: Union[int, str]) -> np.random.Generator:
    """Counter-based generator for an independent, reproducible stream."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *stream)))


def derive_seed(seed: int, *stream: Union[int, str]) -> int:
    """Derive a child seed for a named sub-task (e.g. one dataset scene)."""
    return int(philox(seed, *stream).integers(0, 2**63 - 1))


def encode_array(arr: np.ndarray, dtype: str = 'float64') -> dict:
    """Encode an array as a JSON-friendly dict with base64 row-major data."""
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder('<'))
    return {
        'shape': list(data.shape),
        'dtype': dtype,
        'data': base64.b64encode(data.tobytes()).decode('ascii'),
    }


def decode_array(obj: dict, dtype: str = 'float64') -> np.ndarray:
    """Decode an array produced by `encode_array`.

    Args:
        obj: The encoded array.
        dtype: The in-memory dtype of the result.
    """
    stored = np.dtype(obj.get('dtype', 'float64')).newbyteorder('<')
    raw = base64.b64decode(obj['data'])
    arr = np.frombuffer(raw, dtype=stored).astype(dtype)
    shape = tuple(obj['shape'])
    if int(np.prod(shape)) != arr.size:
        raise ValueError('Array data does not match shape')
    return arr.reshape(shape)


def rle_encode(labels: np.ndarray) -> dict:
    """Run-length encode an integer label map in row-major order."""
    flat = np.asarray(labels, dtype=np.int64).ravel()
    runs: list[list[int]] = []
    if flat.size:
        edges = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate(([0], edges))
        ends = np.concatenate((edges, [flat.size]))
        runs = [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]
    return {'shape': list(np.shape(labels)), 'runs': runs}


def rle_decode(obj: dict) -> np.ndarray:
    """Decode a label map produced by `rle_encode`."""
    shape = tuple(obj['shape'])
    values = [v for v, _ in obj['runs']]
    counts = [n for _, n in obj['runs']]
    flat = np.repeat(np.asarray(values, dtype=np.int64),
                     np.asarray(counts, dtype=np.int64))
    if flat.size != int(np.prod(shape)):
        raise ValueError('Run lengths do not match shape')
    return flat.reshape(shape)


def config_hash(obj: dict) -> str:
    """Short stable hash of a JSON-serializable configuration."""
    canonical = json.dumps(obj, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def parse_int_list(text: str) -> list[int]:
    """Parse `'0,2,5-7'` into `[0, 2, 5, 6, 7]`."""
    values: list[int] = []
    for part in (p.strip() for p in text.split(',')):
        if not part:
            continue
        if '-' in part:
            lo, hi = part.split('-', 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f'Invalid range: {part}')
            values.extend(range(lo_i, hi_i + 1))
        else:
            values.append(int(part))
    if not values:
        raise ValueError('Empty integer list')
    return values


def pairs(items: Iterable) -> Iterable[tuple]:
    """Yield all unordered pairs of a sequence in index order."""
    seq = list(items)
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            yield seq[i], seq[j]
