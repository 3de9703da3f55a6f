"""Binary model files (``.prtx``).

Layout, all integers little-endian::

    b"PRTX" | u8 version | u8 network id (0=IM, 1=NM) | u8 stage
    per conv layer, in network order:
        u32 name length | name (utf-8) | u32 c_in | u32 c_out
        f32 weights (c_out x c_in, row-major) | f32 bias (c_out)
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .networks import NetworkSpec, build_network, validate_params
from .tensor import ConvParams

MAGIC = b"PRTX"
VERSION = 1


class ModelFormatError(ValueError):
    """The file is not a valid model file (bad magic, truncated, checksum)."""


@dataclass
class ModelFile:
    net: NetworkSpec
    params: dict
    stage: int
    version: int = VERSION


def encode_model(net: NetworkSpec, params: dict, stage: int) -> bytes:
    validate_params(net, params)
    if not 0 <= stage <= 255:
        raise ValueError("stage index must fit in a byte")
    out = bytearray(MAGIC)
    out += struct.pack("<BBB", VERSION, net.net_id, stage)
    for layer in net.conv_layers:
        p = params[layer.name]
        name = layer.name.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<II", p.c_in, p.c_out)
        out += p.matrix.astype("<f4").tobytes()
        out += p.bias.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_model(blob: bytes) -> ModelFile:
    if len(blob) < 11 or blob[:4] != MAGIC:
        raise ModelFormatError("missing PRTX magic")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError("checksum mismatch (file truncated or corrupt)")
    version, net_id, stage = struct.unpack_from("<BBB", body, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if net_id not in (0, 1):
        raise ModelFormatError(f"unknown network id {net_id}")
    pos = 7
    params = {}
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            c_in, c_out = struct.unpack_from("<II", body, pos)
            pos += 8
            w = np.frombuffer(body, "<f4", c_in * c_out, pos).reshape(c_out, c_in)
            pos += 4 * c_in * c_out
            b = np.frombuffer(body, "<f4", c_out, pos)
            pos += 4 * c_out
            params[name] = ConvParams(w.astype(np.float32), b.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"malformed layer record: {exc}") from exc
    first = next(iter(params.values()), None)
    if first is None:
        raise ModelFormatError("no layers")
    net = build_network(net_id, first.c_in)
    try:
        validate_params(net, params)
    except KeyError as exc:
        raise ModelFormatError(str(exc)) from exc
    return ModelFile(net, params, stage, version)


def save_model(path, net: NetworkSpec, params: dict, stage: int) -> None:
    Path(path).write_bytes(encode_model(net, params, stage))


def load_model(path) -> ModelFile:
    return decode_model(Path(path).read_bytes())
