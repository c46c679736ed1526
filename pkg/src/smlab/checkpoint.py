"""Binary model checkpoints.

Layout: magic ``SBERTCKPT`` | format version (uint32 LE) | header length
(uint32 LE) | header JSON | parameter blobs | optimizer moment blobs |
CRC32 (uint32 LE) over everything before it.

The header records the model config, an ordered (name, shape) manifest,
and the optimizer hyperparameters/step count when one is saved.  All
blobs are little-endian float64 in manifest order.
"""

import json
import struct
import zlib

import numpy as np

from .model import EncoderModel, ModelConfig, _param_shapes
from .optim import Adam
from . import tensor as T

MAGIC = b"SBERTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Base for unreadable or inconsistent checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(model, adam, path):
    """Write model parameters (and optimizer state, unless ``adam`` is
    None) to ``path``."""
    manifest = [[name, list(p.data.shape)] for name, p in model.params.items()]
    header = {
        "config": model.config.to_dict(),
        "params": manifest,
        "adam": None if adam is None else {
            "t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps,
        },
    }
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for p in model.params.values():
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    if adam is not None:
        for buf in (*adam.m, *adam.v):
            parts.append(np.ascontiguousarray(buf, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint; returns (model, adam-or-None).

    ``expect_config`` (optional) asserts the embedded config matches the
    caller's; a different architecture raises ShapeMismatchError.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12:
        raise TruncatedError(f"{path}: file shorter than a valid header")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(
            f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC.decode()}"
        )
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    version, head_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise BadVersionError(
            f"{path}: format version {version}, this reader handles {VERSION}"
        )
    off = len(MAGIC) + 8
    if off + head_len > len(body):
        raise TruncatedError(f"{path}: header extends past end of file")
    try:
        header = json.loads(body[off:off + head_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable header: {e}")
    off += head_len

    config = ModelConfig.from_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise ShapeMismatchError(
            f"{path}: checkpoint was written for a different model config"
        )
    expected = [[name, list(shape)] for name, shape in _param_shapes(config)]
    if header["params"] != expected:
        raise ShapeMismatchError(
            f"{path}: parameter manifest disagrees with the embedded config"
        )

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) * 8
        if off + n > len(body):
            raise TruncatedError(f"{path}: parameter data truncated")
        arr = np.frombuffer(body, dtype="<f8", count=int(np.prod(shape)),
                            offset=off).reshape(shape).copy()
        off += n
        return arr

    params = {name: T.param(take(shape)) for name, shape in header["params"]}
    model = EncoderModel(config, params)

    adam = None
    if header["adam"] is not None:
        meta = header["adam"]
        adam = Adam(model.param_list(), lr=meta["lr"], beta1=meta["beta1"],
                    beta2=meta["beta2"], eps=meta["eps"])
        shapes = [shape for _, shape in header["params"]]
        adam.load_state({
            "t": meta["t"],
            "m": [take(s) for s in shapes],
            "v": [take(s) for s in shapes],
        })
    if off != len(body):
        raise TruncatedError(
            f"{path}: {len(body) - off} unexpected trailing bytes"
        )
    return model, adam
