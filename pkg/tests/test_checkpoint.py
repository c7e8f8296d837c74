import json
import struct

import numpy as np
import pytest

from progsae.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from progsae.core import FormatError
from progsae.matryoshka import GranularitySchedule
from progsae.ranking import FeatureStats
from progsae.sae import SaeConfig, init_params


@pytest.fixture
def ckpt(rng):
    p = init_params(4, 8, rng).astype(np.float32).astype(np.float64)
    p.b_center[:] = rng.standard_normal(4).astype(np.float32)
    stats = FeatureStats(rng.random(8), rng.integers(0, 9, 8), 17)
    return Checkpoint(
        p,
        SaeConfig(n=8, d=4, k=2, aux_scale=0.125),
        GranularitySchedule.fixed([4, 8], 2, weights=[0.5, 1.0], mode="sampled"),
        stats,
        {"seed": 3, "arch": "matryoshka-sampled"},
    )


def test_roundtrip(tmp_path, ckpt):
    path = tmp_path / "m.psae"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    for name, arr in ckpt.params.arrays().items():
        np.testing.assert_array_equal(getattr(back.params, name), arr)
    assert back.config == ckpt.config
    assert back.schedule == ckpt.schedule
    assert back.meta == ckpt.meta
    np.testing.assert_array_equal(back.stats.sum_sq, ckpt.stats.sum_sq)
    np.testing.assert_array_equal(back.stats.fire_count, ckpt.stats.fire_count)
    assert back.stats.n_samples == 17


def test_save_load_save_identical(tmp_path, ckpt):
    a = tmp_path / "a.psae"
    b = tmp_path / "b.psae"
    save_checkpoint(a, ckpt)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_without_stats(ckpt):
    ckpt.stats = None
    assert from_bytes(to_bytes(ckpt)).stats is None


def test_header_layout(ckpt):
    raw = to_bytes(ckpt)
    assert raw[:4] == b"PSAE"
    assert struct.unpack_from("<5I", raw, 4) == (1, 4, 8, 2, 2)


def test_bad_magic(ckpt):
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"NOPE" + to_bytes(ckpt)[4:])


def test_bad_version(ckpt):
    raw = to_bytes(ckpt)
    with pytest.raises(FormatError, match="version"):
        from_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])


def test_truncated_tensor_reports_offset(ckpt):
    raw = to_bytes(ckpt)
    tensor_start = raw.index(b"w_dec")
    with pytest.raises(FormatError, match=r"offset \d+") as info:
        from_bytes(raw[: tensor_start + 40])
    assert "w_dec" in str(info.value)


@pytest.mark.parametrize("cut", [3, 10, 30, 60])
def test_truncated_anywhere(ckpt, cut):
    with pytest.raises(FormatError):
        from_bytes(to_bytes(ckpt)[:cut])


def test_every_truncation_rejected(ckpt):
    raw = to_bytes(ckpt)
    for cut in range(0, len(raw), 7):
        with pytest.raises(FormatError):
            from_bytes(raw[:cut])


def test_trailing_bytes(ckpt):
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(to_bytes(ckpt) + b"\0")


def test_inconsistent_config(ckpt):
    raw = bytearray(to_bytes(ckpt))
    struct.pack_into("<I", raw, 16, 9)  # k > N
    with pytest.raises(FormatError):
        from_bytes(bytes(raw))


def test_non_finite_tensor(ckpt):
    ckpt.params.w_dec[0, 0] = np.inf
    with pytest.raises(FormatError):
        from_bytes(to_bytes(ckpt))


def test_meta_is_json(ckpt):
    raw = to_bytes(ckpt)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    assert meta in raw
