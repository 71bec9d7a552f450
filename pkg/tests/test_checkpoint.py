import struct

import numpy as np
import pytest

from kurtq import model as M
from kurtq.checkpoint import (decode, encode, load_checkpoint, quantize_params, save_checkpoint,
                              split_calibration, with_calibration)
from kurtq.errors import FormatError
from kurtq.quant import QTensor, compute_scale_maxabs, dequantize, fake_quant
from kurtq.tensor import make_rng

CFG = M.ModelConfig(num_blocks=2, d_model=8, num_heads=2, d_ff=12)


@pytest.fixture
def params():
    return M.generate_pretrained_like(make_rng(0), CFG)


def test_round_trip_is_bitwise(params, tmp_path):
    path = tmp_path / "m.kqck"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].dtype == np.float32
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
    save_checkpoint(back, tmp_path / "again.kqck")
    assert (tmp_path / "again.kqck").read_bytes() == path.read_bytes()


def test_layout_by_hand():
    blob = encode({"ab": np.array([1.5], np.float32),
                   "q": QTensor(np.array([[1, -2]], np.int8), np.float32(0.25))})
    expect = (b"KQCK" + struct.pack("<II", 1, 2)
              + struct.pack("<I", 2) + b"ab" + struct.pack("<BB", 0, 1) + struct.pack("<Q", 1)
              + struct.pack("<f", 1.5)
              + struct.pack("<I", 1) + b"q" + struct.pack("<BB", 1, 2) + struct.pack("<QQ", 1, 2)
              + struct.pack("<f", 0.25) + bytes([1, 0xFE]))
    assert blob == expect


def test_int8_round_trip_within_half_step(params, tmp_path):
    path = tmp_path / "q.kqck"
    save_checkpoint(quantize_params(params), path)
    back = load_checkpoint(path)
    for k, t in params.items():
        q = back[k]
        assert isinstance(q, QTensor) and q.scale > 0
        s = compute_scale_maxabs(t)
        assert q.scale == s
        assert np.abs(dequantize(q) - t).max() <= s / 2 * (1 + 1e-5)
        np.testing.assert_array_equal(dequantize(q), fake_quant(t, s))


def test_truncated_file_rejected_with_offset(params):
    blob = encode(params)
    for cut in (0, 3, 7, 11, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError) as info:
            decode(blob[:cut])
        assert 0 <= info.value.offset <= cut
        assert "offset" in str(info.value)


def test_bad_header_rejected(params):
    blob = bytearray(encode(params))
    with pytest.raises(FormatError, match="magic") as info:
        decode(b"XXXX" + bytes(blob[4:]))
    assert info.value.offset == 0
    bad = bytearray(blob)
    bad[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version") as info:
        decode(bytes(bad))
    assert info.value.offset == 4
    with pytest.raises(FormatError, match="trailing"):
        decode(bytes(blob) + b"\0")


def test_bad_dtype_tag_offset():
    blob = bytearray(encode({"a": np.zeros(2, np.float32)}))
    tag_at = 12 + 4 + 1
    blob[tag_at] = 7
    with pytest.raises(FormatError, match="dtype") as info:
        decode(bytes(blob))
    assert info.value.offset == tag_at


def test_failed_load_leaves_no_partial_result(tmp_path, params):
    path = tmp_path / "t.kqck"
    path.write_bytes(encode(params)[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_calibration_entries_survive_quantization(params):
    acts = {"head.a": 3.5, "block0.ffn.fc1.a": 0.25}
    full = with_calibration(params, acts)
    model, back = split_calibration(full)
    assert set(model) == set(params) and back == acts
    _, qback = split_calibration(quantize_params(full))
    for site, amax in acts.items():
        assert qback[site] == pytest.approx(amax, rel=1e-6)
