import struct

import numpy as np
import pytest

from crgat.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from crgat.errors import FormatError
from crgat.model import predict

from conftest import crandn, small_model


def test_roundtrip_preserves_weights_buffers_and_meta(tmp_path, rng):
    params = small_model()
    save_checkpoint(tmp_path / "m.crgw", params, {"loss": "ldm", "mu": [0.5, 1.0]})
    back, meta = load_checkpoint(tmp_path / "m.crgw")
    assert meta["loss"] == "ldm" and meta["mu"] == [0.5, 1.0]
    assert back.config == params.config
    for (n1, a), (n2, b) in zip(params.named() + params.buffers(), back.named() + back.buffers()):
        assert n1 == n2 and a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    h = crandn(rng, 3, 4)
    np.testing.assert_array_equal(predict(h, back), predict(h, params))
    assert checkpoint_bytes(back, meta) == checkpoint_bytes(params, meta)


def test_uncalibrated_model_roundtrips_without_buffers():
    params = small_model(calibrate=False)
    back, _ = parse_checkpoint(checkpoint_bytes(params))
    assert back.cfcls[0].cbn.running_mean is None


def test_bytes_are_stable():
    assert checkpoint_bytes(small_model(seed=3)) == checkpoint_bytes(small_model(seed=3))


@pytest.mark.parametrize("cut", [3, 12, 100, -1])
def test_truncation_is_a_format_error(cut):
    buf = checkpoint_bytes(small_model())
    with pytest.raises(FormatError):
        parse_checkpoint(buf[:cut])


def test_bad_magic_and_version():
    buf = checkpoint_bytes(small_model())
    with pytest.raises(FormatError):
        parse_checkpoint(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        parse_checkpoint(buf[:4] + struct.pack("<I", 99) + buf[8:])


def test_shape_mismatch_is_reported():
    a = checkpoint_bytes(small_model(n_t=4))
    b = checkpoint_bytes(small_model(n_t=3))
    # header of a 4-antenna model with the records of a 3-antenna one
    ha = 16 + struct.unpack_from("<Q", a, 8)[0]
    hb = 16 + struct.unpack_from("<Q", b, 8)[0]
    with pytest.raises(FormatError):
        parse_checkpoint(a[:ha] + b[hb:])
