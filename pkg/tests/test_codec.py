import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topogs.codec import (DecodeError, decode, decode_binary, encode, encode_binary, qstep, raw_size, read_stream,
                          write_stream)
from topogs.core import ConfigError, FormatError
from topogs.packing import build_layout, pack_sequence

from conftest import lifespan_sequence


@pytest.fixture
def seq(rng):
    frames, glut = lifespan_sequence(rng, n=80, frames=5)
    return pack_sequence(frames, build_layout(glut, len(frames))), glut


def _static(maps, n):
    out = []
    for t in range(1, n + 1):
        m = type(maps[0])(t, maps[0].plan_hash, {k: v.copy() for k, v in maps[0].groups.items()},
                          {k: v.copy() for k, v in maps[0].ranges.items()})
        out.append(m)
    return out


def test_qstep():
    assert qstep(0) == 1.0 and qstep(6) == 2.0 and qstep(15) == pytest.approx(2 ** 2.5)


def test_lossless_bit_exact(seq):
    maps, glut = seq
    out = decode(encode(maps, glut, qp=0))
    assert out.maps == maps and out.glut == glut
    assert out.frame_types[0] == "I" and set(out.frame_types[1:]) == {"P"}


@pytest.mark.parametrize("qp", [5, 15, 25])
def test_lossy_error_bound(seq, qp):
    maps, glut = seq
    out = decode(encode(maps, glut, qp=qp))
    # residual levels reconstruct to integers, hence the extra half code
    bound = qstep(qp) / 2 + 0.5
    # checked at every frame: errors must not accumulate through the P-frame chain
    for a, b in zip(maps, out.maps):
        for k in a.groups:
            assert np.abs(a.groups[k].astype(int) - b.groups[k].astype(int)).max() <= bound


def test_static_sequence_p_frames_tiny(seq):
    maps, glut = seq
    stat = _static(maps, 6)
    _, info = encode(stat, glut, qp=0, return_info=True)
    assert info.frame_types[0] == "I"
    assert sum(info.frame_bytes[1:]) < 0.01 * info.frame_bytes[0] * 5 + 5 * 64
    for gb in info.group_bytes[1:]:
        assert all(v <= 16 for v in gb.values())


def test_qp_monotone_sizes(seq):
    maps, glut = seq
    sizes = [len(encode(maps, glut, qp=q)) for q in (5, 15, 25)]
    assert sizes[0] > sizes[1] > sizes[2]


def test_single_frame_and_gop(seq):
    maps, glut = seq
    one = decode(encode(maps[:1], glut, qp=0))
    assert one.maps == maps[:1] and one.frame_types == ["I"]
    two = decode(encode(maps, glut, qp=0, gop=2))
    assert two.frame_types == ["I", "P", "I", "P", "I"] and two.maps == maps


def test_corruption_reports_frame(seq):
    maps, glut = seq
    data = bytearray(encode(maps, glut, qp=15))
    data[-5] ^= 0x40
    with pytest.raises(DecodeError) as e:
        decode(bytes(data))
    assert e.value.frame == len(maps)
    with pytest.raises(DecodeError):
        decode(bytes(data[: len(data) // 2]))
    hdr = bytearray(encode(maps, glut, qp=15))
    hdr[10] ^= 1
    with pytest.raises(DecodeError):
        decode(bytes(hdr))


def test_every_single_byte_flip_detected(seq):
    maps, glut = seq
    data = encode(maps[:2], glut, qp=15)
    rng = np.random.default_rng(9)
    for pos in rng.choice(len(data), 40, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(8))
        with pytest.raises(FormatError):
            decode(bytes(bad))


def test_plan_mismatch_rejected(seq, rng):
    maps, glut = seq
    frames, g2 = lifespan_sequence(rng, n=80, frames=2)
    other = pack_sequence(frames, build_layout(g2, 2, "morton"))
    with pytest.raises(FormatError):
        encode([maps[0], other[1]], glut)
    with pytest.raises(ConfigError):
        encode(maps, glut, qp=-1)
    with pytest.raises(ConfigError):
        encode([], glut)


def test_raw_size_and_file(tmp_path, seq):
    maps, glut = seq
    rows, cols = maps[0].shape
    C = sum(g.shape[0] for g in maps[0].groups.values())
    assert raw_size(maps) == len(maps) * C * rows * cols * 2
    write_stream(tmp_path / "s.tgc", encode(maps, glut, qp=0))
    assert read_stream(tmp_path / "s.tgc").maps == maps


def test_binary_coder_identity_large():
    rng = np.random.default_rng(2)
    n = 1 << 20
    ctx = rng.integers(0, 8, n)
    p = np.linspace(0.02, 0.98, 8)[ctx]
    bits = (rng.random(n) < p).astype(np.uint8)
    data = encode_binary(bits, ctx, 8)
    assert np.array_equal(decode_binary(data, ctx, 8), bits)
    assert len(data) < n / 8  # skewed contexts compress


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=3000), st.integers(1, 6))
def test_binary_coder_identity_property(bits, nctx):
    bits = np.array(bits, dtype=np.uint8)
    ctx = np.arange(len(bits)) % nctx
    assert np.array_equal(decode_binary(encode_binary(bits, ctx, nctx), ctx, nctx), bits)
