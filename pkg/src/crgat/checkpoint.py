"""Binary checkpoint format for model parameters.

Layout (all integers little-endian)::

    b"CRGW" | u32 version | u64 header length | UTF-8 JSON header
    then one record per array, in ModelParams.named() order followed by
    the batch-norm buffers that are set:
        u32 name length | name | u32 ndim | ndim x u64 dims
        | float64 real parts | float64 imaginary parts

Real-valued arrays are written with zero imaginary parts and listed under
``"real"`` in the header so they load back as real.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import CrgatConfig, ModelParams, init_params

CHECKPOINT_MAGIC = b"CRGW"
CHECKPOINT_VERSION = 1


def _records(params: ModelParams):
    out = list(params.named())
    out += [(name, arr) for name, arr in params.buffers() if arr is not None]
    return out


def checkpoint_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    records = _records(params)
    header = {
        "config": params.config.to_dict(),
        "loss": None,
        "optimizer_state": False,
        "mu": None,
        "rng": None,
        "epoch": 0,
        **(meta or {}),
        "real": [name for name, arr in records if not np.iscomplexobj(arr)],
        "records": [name for name, _ in records],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    for name, arr in records:
        arr = np.asarray(arr)
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(np.real(arr), dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(np.imag(arr) if np.iscomplexobj(arr) else np.zeros(arr.shape), dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def parse_checkpoint(buf: bytes) -> tuple[ModelParams, dict]:
    if len(buf) < 16:
        raise FormatError("file shorter than the fixed preamble", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if 16 + hlen > len(buf):
        raise FormatError("header runs past end of file", len(buf))
    try:
        meta = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        config = CrgatConfig.from_dict(meta["config"])
    except Exception as exc:  # noqa: BLE001 - any header defect is a format error
        raise FormatError(f"malformed header: {exc}", 16) from None
    params = init_params(config, 0)
    expected = {name: arr.shape for name, arr in params.named()}
    real = set(meta.get("real", []))
    pos = 16 + hlen
    seen = []
    while pos < len(buf):
        try:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 4)
            pos += 4 + 8 * ndim
        except (struct.error, UnicodeDecodeError):
            raise FormatError("truncated record header", pos) from None
        n = int(np.prod(shape))
        if pos + 16 * n > len(buf):
            raise FormatError(f"record {name!r} truncated", pos)
        re = np.frombuffer(buf, "<f8", n, pos).reshape(shape)
        im = np.frombuffer(buf, "<f8", n, pos + 8 * n).reshape(shape)
        pos += 16 * n
        arr = re.astype(np.float64) if name in real else (re + 1j * im).astype(np.complex128)
        if name in expected and tuple(shape) != tuple(expected[name]):
            raise FormatError(f"record {name!r} has shape {shape}, config implies {expected[name]}", pos)
        try:
            params.set(name, arr)
        except (AttributeError, IndexError, ValueError):
            raise FormatError(f"unknown record {name!r}", pos) from None
        seen.append(name)
    missing = set(expected) - set(seen)
    if missing:
        raise FormatError(f"missing records: {sorted(missing)}", len(buf))
    return params, meta


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    return parse_checkpoint(Path(path).read_bytes())
