"""Tests for the binary checkpoint format and its failure modes."""

import numpy as np
import pytest

from smlab import checkpoint as ck
from smlab import model as M
from smlab import scenario as sc
from smlab.optim import Adam
from smlab.rng import Rng


@pytest.fixture()
def trained(tmp_path):
    """A small model that has taken a few optimizer steps."""
    vocab = sc.build_vocabulary()
    universe = sc.enumerate_chunks()
    split = sc.sample_split(universe, seed=3)
    cfg = M.ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32, seed=8)
    m = M.init_model(cfg)
    opt = Adam(m.param_list(), lr=1e-3)
    gen = Rng(4)
    for i in range(5):
        ids, slots = sc.encode_chunk(split.train[i], vocab)
        ex = sc.mask_chunk(ids, slots, gen, vocab)
        M.train_step(m, [ex], opt)
    return m, opt, split, vocab


def _one_example(split, vocab, seed=9):
    ids, slots = sc.encode_chunk(split.train[20], vocab)
    return sc.mask_chunk(ids, slots, Rng(seed), vocab)


# ---------------------------------------------------------------
# round trips
# ---------------------------------------------------------------


def test_round_trip_is_bit_identical(trained, tmp_path):
    m, opt, split, vocab = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    loaded, opt2 = ck.load_checkpoint(path)
    assert loaded.config == m.config
    for name in m.params:
        assert np.array_equal(loaded.params[name].data, m.params[name].data)
    ex = _one_example(split, vocab)
    a = M.masked_loss(m, [ex]).item()
    b = M.masked_loss(loaded, [ex]).item()
    assert a == b


def test_optimizer_state_resumes_identically(trained, tmp_path):
    m, opt, split, vocab = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    loaded, opt2 = ck.load_checkpoint(path)

    # ten more steps on each copy must stay bit-identical
    gen_a, gen_b = Rng(77), Rng(77)
    for _ in range(10):
        ids, slots = sc.encode_chunk(split.train[1], vocab)
        M.train_step(m, [sc.mask_chunk(ids, slots, gen_a, vocab)], opt)
        M.train_step(loaded, [sc.mask_chunk(ids, slots, gen_b, vocab)], opt2)
    for name in m.params:
        assert np.array_equal(m.params[name].data, loaded.params[name].data)


def test_save_without_optimizer(trained, tmp_path):
    m, _, _, _ = trained
    path = tmp_path / "bare.ckpt"
    ck.save_checkpoint(m, None, path)
    loaded, opt = ck.load_checkpoint(path)
    assert opt is None
    for name in m.params:
        assert np.array_equal(loaded.params[name].data, m.params[name].data)


def test_expect_config_accepts_match(trained, tmp_path):
    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    loaded, _ = ck.load_checkpoint(path, expect_config=m.config)
    assert loaded.config == m.config


# ---------------------------------------------------------------
# rejection paths
# ---------------------------------------------------------------


def test_rejects_wrong_magic(trained, tmp_path):
    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ck.BadMagicError):
        ck.load_checkpoint(path)


def test_rejects_truncated_file(trained, tmp_path):
    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises((ck.TruncatedError, ck.ChecksumError)):
        ck.load_checkpoint(path)
    path.write_bytes(raw[:6])
    with pytest.raises(ck.TruncatedError):
        ck.load_checkpoint(path)


def test_rejects_flipped_byte(trained, tmp_path):
    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ck.ChecksumError):
        ck.load_checkpoint(path)


def test_rejects_future_version(trained, tmp_path):
    import struct
    import zlib

    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    raw = bytearray(path.read_bytes())
    # bump the version field and re-seal the checksum so only the
    # version check can fire
    raw[len(ck.MAGIC):len(ck.MAGIC) + 4] = struct.pack("<I", ck.VERSION + 1)
    body = bytes(raw[:-4])
    raw[-4:] = struct.pack("<I", zlib.crc32(body))
    path.write_bytes(bytes(raw))
    with pytest.raises(ck.BadVersionError):
        ck.load_checkpoint(path)


def test_rejects_config_mismatch(trained, tmp_path):
    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    other = M.ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ffn=32)
    with pytest.raises(ck.ShapeMismatchError):
        ck.load_checkpoint(path, expect_config=other)


def test_rejects_tampered_manifest(trained, tmp_path):
    import json
    import struct
    import zlib

    m, opt, _, _ = trained
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(m, opt, path)
    raw = path.read_bytes()
    off = len(ck.MAGIC)
    version, header_len = struct.unpack_from("<II", raw, off)
    off += 8
    header = json.loads(raw[off:off + header_len])
    header["params"][0][1] = [1, 1]  # lie about the first shape
    new_header = json.dumps(header, sort_keys=True).encode()
    body = (raw[:len(ck.MAGIC)]
            + struct.pack("<II", version, len(new_header))
            + new_header
            + raw[off + header_len:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises((ck.ShapeMismatchError, ck.TruncatedError)):
        ck.load_checkpoint(path)


def test_error_classes_are_value_errors():
    for cls in (ck.BadMagicError, ck.BadVersionError, ck.TruncatedError,
                ck.ChecksumError, ck.ShapeMismatchError):
        assert issubclass(cls, ck.CheckpointError)
        assert issubclass(cls, ValueError)
