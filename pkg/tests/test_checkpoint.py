import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from attnmix.checkpoint import load_checkpoint, save_checkpoint
from attnmix.errors import CheckpointFormatError


def sample():
    rng = np.random.default_rng(0)
    return {"layer0.weight": rng.normal(size=(3, 4)), "layer0.bias": rng.normal(size=4),
            "scalar": np.array(2.5), "weird": np.array([np.nan, -0.0, np.inf, 5e-324])}


def test_empty(tmp_path):
    save_checkpoint({}, tmp_path / "e.bin")
    assert load_checkpoint(tmp_path / "e.bin") == {}


def test_round_trip_bit_exact(tmp_path):
    src = sample()
    save_checkpoint(src, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(src)
    for name, arr in src.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.astype("<f8").tobytes()


def test_rewrite_is_byte_identical(tmp_path):
    save_checkpoint(sample(), tmp_path / "a.bin")
    save_checkpoint(load_checkpoint(tmp_path / "a.bin"), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def corrupt(tmp_path, mutate):
    p = tmp_path / "c.bin"
    save_checkpoint(sample(), p)
    p.write_bytes(mutate(bytearray(p.read_bytes())))
    return p


def test_truncated_payload(tmp_path):
    p = corrupt(tmp_path, lambda b: b[:-8])
    with pytest.raises(CheckpointFormatError, match="at byte"):
        load_checkpoint(p)


def test_trailing_bytes(tmp_path):
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(corrupt(tmp_path, lambda b: b + b"\0" * 8))


def test_bad_magic(tmp_path):
    def mutate(b):
        b[0:1] = b"X"
        return b
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(corrupt(tmp_path, mutate))


def test_future_version(tmp_path):
    def mutate(b):
        b[8:12] = struct.pack("<I", 2)
        return b
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(corrupt(tmp_path, mutate))


def test_garbled_manifest(tmp_path):
    def mutate(b):
        b[24] = 0xFF
        return b
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(corrupt(tmp_path, mutate))


def test_short_file(tmp_path):
    p = tmp_path / "s.bin"
    p.write_bytes(b"AMIX")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4))
def test_round_trip_property(tmp_path_factory, arrs):
    p = tmp_path_factory.mktemp("ck") / "p.bin"
    src = {f"t{i}": a for i, a in enumerate(arrs)}
    save_checkpoint(src, p)
    back = load_checkpoint(p)
    assert all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in src.items())
