import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stalemp.checkpoint import (CACHE_MAGIC, PARAM_MAGIC, FormatError, decode, encode,
                                load_cache, load_parameters, read_parameters, save_cache,
                                save_parameters)
from stalemp.history import HistoryStore
from stalemp.layer import init_params


def test_header_bytes_by_hand():
    data = encode([("w", np.array([[1.0, 2.0]]))], PARAM_MAGIC)
    body = (b"SMPP" + (1).to_bytes(4, "little") + (1).to_bytes(8, "little")
            + (1).to_bytes(8, "little") + b"w" + (2).to_bytes(8, "little")
            + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
            + struct.pack("<2d", 1.0, 2.0))
    assert data == body + zlib.crc32(body).to_bytes(4, "little")


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, width=64)))
def test_roundtrip_is_exact(arr):
    out = decode(encode([("a", arr), ("b.c", np.zeros(3))], PARAM_MAGIC), PARAM_MAGIC)
    assert out["a"].shape == arr.shape and np.array_equal(out["a"], arr)


def test_parameter_file_roundtrip(tmp_path):
    src, dst = init_params([4, 3, 2], "concat", seed=1), init_params([4, 3, 2], "concat", seed=2)
    save_parameters(tmp_path / "p", src)
    load_parameters(tmp_path / "p", dst)
    for a, b in zip(src, dst):
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.value, pb.value)


def test_parameter_shape_and_name_mismatch(tmp_path):
    save_parameters(tmp_path / "p", init_params([4, 3, 2], "sum", seed=0))
    with pytest.raises(FormatError, match="shape"):
        load_parameters(tmp_path / "p", init_params([4, 5, 2], "sum", seed=0))
    with pytest.raises(FormatError, match="names"):
        load_parameters(tmp_path / "p", init_params([4, 3, 2], "none", seed=0))


def _store():
    rng = np.random.default_rng(0)
    store = HistoryStore(rng.standard_normal((6, 4)), [4, 3], g_thres=5.0)
    store.tick(); store.tick()
    store.push(1, np.array([0, 2]), rng.standard_normal((2, 3)))
    store.grad_norm[1][:] = rng.random(6)
    return store


def test_cache_roundtrip(tmp_path):
    store = _store()
    save_cache(tmp_path / "c", store, epoch=7)
    back, epoch = load_cache(tmp_path / "c")
    assert epoch == 7 and back.iteration == store.iteration and back.g_thres == 5.0
    for l in range(store.num_layers):
        assert np.array_equal(back.embeddings[l], store.embeddings[l])
        assert np.array_equal(back.grad_norm[l], store.grad_norm[l])
        assert np.array_equal(back.last_update[l], store.last_update[l])


def test_cache_infinite_threshold_survives(tmp_path):
    store = HistoryStore(np.zeros((2, 2)), [2])
    save_cache(tmp_path / "c", store)
    assert math.isinf(load_cache(tmp_path / "c")[0].g_thres)


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic", "empty"])
def test_damaged_files_raise(tmp_path, damage):
    save_cache(tmp_path / "c", _store())
    data = bytearray((tmp_path / "c").read_bytes())
    if damage == "flip":
        data[40] ^= 0x01
    elif damage == "truncate":
        data = data[:-13]
    elif damage == "magic":
        data[:4] = PARAM_MAGIC
    else:
        data = b""
    (tmp_path / "c").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_cache(tmp_path / "c")


def test_parameter_reader_rejects_cache(tmp_path):
    save_cache(tmp_path / "c", _store())
    with pytest.raises(FormatError, match="magic"):
        read_parameters(tmp_path / "c")


def test_structural_errors_behind_valid_checksum():
    def sealed(body):
        return body + struct.pack("<I", zlib.crc32(body))

    good = encode([("x", np.ones(2))], CACHE_MAGIC)[:-4]
    with pytest.raises(FormatError, match="trailing"):
        decode(sealed(good + b"\0"), CACHE_MAGIC)
    with pytest.raises(FormatError, match="truncated"):
        decode(sealed(good[:-3]), CACHE_MAGIC)
    bumped = good[:4] + struct.pack("<I", 9) + good[8:]
    with pytest.raises(FormatError, match="version"):
        decode(sealed(bumped), CACHE_MAGIC)
    dup = encode([("x", np.ones(1)), ("x", np.ones(1))], CACHE_MAGIC)
    with pytest.raises(FormatError, match="duplicate"):
        decode(dup, CACHE_MAGIC)


def test_cache_missing_entry(tmp_path):
    (tmp_path / "c").write_bytes(encode([("embeddings.0", np.zeros((2, 2)))], CACHE_MAGIC))
    with pytest.raises(FormatError, match="missing"):
        load_cache(tmp_path / "c")
