"""Binary tensor container (``GRTF``) and the checkpoint file built on it.

TensorFile layout, little-endian::

    b"GRTF" | version u8 | dtype u8 (1=float32, 2=float64) | rank u8 | rank x u32 dims | payload

Checkpoint layout::

    b"GRCK" | version u8 | manifest length u32 | manifest (canonical JSON) | TensorFile blobs

The manifest maps each tensor name to ``[offset, length]`` inside the blob
region, records the fused flag and carries the model config as canonical
JSON text.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import GeoRepNetConfig, canonical_json
from .errors import FormatError

MAGIC = b"GRTF"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

CKPT_MAGIC = b"GRCK"
CKPT_VERSION = 1


def encode_tensor(array):
    arr = np.asarray(array)
    code = CODE_FOR.get(np.dtype(arr.dtype.type))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}", 5)
    if arr.ndim > 255:
        raise FormatError("rank above 255", 6)
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(buf, offset=0, exact=True):
    """Decode one TensorFile starting at ``offset``; return ``(array, end_offset)``.

    Error offsets are absolute positions in ``buf``.
    """
    buf = memoryview(buf)
    if len(buf) - offset < 4 or bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError("bad magic, expected b'GRTF'", offset)
    if len(buf) - offset < 7:
        raise FormatError("truncated header", len(buf))
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    dims_at = offset + 7
    if len(buf) < dims_at + 4 * rank:
        raise FormatError("truncated dimension table", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, dims_at)
    data_at = dims_at + 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < data_at + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes", len(buf))
    end = data_at + nbytes
    if exact and len(buf) != end:
        raise FormatError("trailing bytes after payload", end)
    arr = np.frombuffer(buf[data_at:end], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), end


def write_tensor(t, path):
    data = t if isinstance(t, np.ndarray) else t.data
    with open(path, "wb") as fh:
        fh.write(encode_tensor(data))


def read_tensor(path):
    from .tensor import Tensor

    with open(path, "rb") as fh:
        arr, _ = decode_tensor(fh.read())
    return Tensor(arr)


@dataclass
class Checkpoint:
    config: GeoRepNetConfig
    tensors: dict = field(default_factory=dict)
    fused: bool = False
    format_version: int = CKPT_VERSION
    extra: dict = field(default_factory=dict)

    def to_bytes(self):
        blobs = []
        directory = {}
        pos = 0
        for name in sorted(self.tensors):
            blob = encode_tensor(self.tensors[name])
            directory[name] = [pos, len(blob)]
            blobs.append(blob)
            pos += len(blob)
        manifest = {
            "config": canonical_json(self.config.to_dict()),
            "extra": self.extra,
            "format_version": self.format_version,
            "fused": bool(self.fused),
            "tensors": directory,
        }
        text = canonical_json(manifest).encode("utf-8")
        head = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(text))
        return head + text + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf):
        buf = memoryview(bytes(buf))
        if len(buf) < 4 or bytes(buf[:4]) != CKPT_MAGIC:
            raise FormatError("bad magic, expected b'GRCK'", 0)
        if len(buf) < 9:
            raise FormatError("truncated checkpoint header", len(buf))
        version, size = struct.unpack_from("<BI", buf, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        if len(buf) < 9 + size:
            raise FormatError("truncated manifest", len(buf))
        try:
            manifest = json.loads(bytes(buf[9 : 9 + size]).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}", 9) from exc
        base = 9 + size
        tensors = {}
        for name, (off, length) in manifest["tensors"].items():
            start = base + off
            arr, _ = decode_tensor(buf[: start + length], start)
            tensors[name] = arr
        config = GeoRepNetConfig.from_dict(json.loads(manifest["config"]))
        return cls(
            config=config,
            tensors=tensors,
            fused=manifest["fused"],
            format_version=manifest["format_version"],
            extra=manifest.get("extra", {}),
        )

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
