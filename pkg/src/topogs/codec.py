"""Predictive coder for attribute-map sequences.

I-frames predict every sample from max(left, top) of the reconstructed
plane, P-frames from the same slot of the previous reconstruction. Residuals
are uniformly quantized with step 2^(qp/6) and coded with an adaptive binary
range coder (11-bit probabilities, LZMA-style carry handling). Contexts are
kept per channel group and frame type and reset at every I-frame.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import ConfigError, FormatError
from .packing import AttributeMaps, LAYERS, export_rasters, import_rasters  # noqa: F401  (raster bridge)
from .registration import Glut

MAGIC = b"TGC1"
VERSION = 1
BLOCK = 8
PROB_BITS = 11
PROB_INIT = 1 << (PROB_BITS - 1)
MOVE_BITS = 5
TOP = 1 << 24
MAX_BITS = 18  # Exp-Golomb length bound for 16-bit residuals

# context layout inside one group's probability table
CTX_SKIP = 0
CTX_ZERO = 1
CTX_SIGN = 2
CTX_PREFIX = 3
CTX_SUFFIX = CTX_PREFIX + MAX_BITS + 1
N_CTX = CTX_SUFFIX + MAX_BITS * MAX_BITS

I_FRAME, P_FRAME = 0, 1


class DecodeError(FormatError):
    def __init__(self, msg, frame=None):
        super().__init__(msg if frame is None else f"frame {frame}: {msg}")
        self.frame = frame


def qstep(qp: float) -> float:
    return float(2.0 ** (qp / 6.0))


# ---------------------------------------------------------------------------
# range coder (state kept in small arrays so numba functions can share it)

@numba.njit(cache=True)
def _shift_low(st, out):
    # st: [low, range, cache, cache_size, pos]
    low = st[0]
    if low < 0xFF000000 or low > 0xFFFFFFFF:
        carry = low >> 32
        temp = st[2]
        while True:
            out[st[4]] = (temp + carry) & 0xFF
            st[4] += 1
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8


@numba.njit(cache=True)
def _enc_bit(st, out, probs, i, bit):
    p = probs[i]
    bound = (st[1] >> PROB_BITS) * p
    if bit == 0:
        st[1] = bound
        probs[i] = p + (((1 << PROB_BITS) - p) >> MOVE_BITS)
    else:
        st[0] += bound
        st[1] -= bound
        probs[i] = p - (p >> MOVE_BITS)
    while st[1] < TOP:
        st[1] <<= 8
        _shift_low(st, out)


@numba.njit(cache=True)
def _enc_init():
    st = np.zeros(5, dtype=np.int64)
    st[1] = 0xFFFFFFFF
    st[3] = 1
    return st


@numba.njit(cache=True)
def _enc_flush(st, out):
    for _ in range(5):
        _shift_low(st, out)


@numba.njit(cache=True)
def _dec_init(data):
    # st: [code, range, pos, overrun]
    st = np.zeros(4, dtype=np.int64)
    st[1] = 0xFFFFFFFF
    for _ in range(5):
        st[0] = ((st[0] << 8) | _next_byte(st, data)) & 0xFFFFFFFF
    return st


@numba.njit(cache=True)
def _next_byte(st, data):
    pos = st[2]
    st[2] += 1
    if pos < data.shape[0]:
        return np.int64(data[pos])
    st[3] = 1
    return np.int64(0)


@numba.njit(cache=True)
def _dec_bit(st, data, probs, i):
    p = probs[i]
    bound = (st[1] >> PROB_BITS) * p
    if st[0] < bound:
        st[1] = bound
        probs[i] = p + (((1 << PROB_BITS) - p) >> MOVE_BITS)
        bit = 0
    else:
        st[0] -= bound
        st[1] -= bound
        probs[i] = p - (p >> MOVE_BITS)
        bit = 1
    while st[1] < TOP:
        st[1] <<= 8
        st[0] = ((st[0] << 8) | _next_byte(st, data)) & 0xFFFFFFFF
    return bit


@numba.njit(cache=True)
def _encode_bits(bits, ctx, probs):
    out = np.zeros(bits.shape[0] // 4 + 64, dtype=np.uint8)
    st = _enc_init()
    for k in range(bits.shape[0]):
        if st[4] + 16 > out.shape[0]:
            grown = np.zeros(out.shape[0] * 2, dtype=np.uint8)
            grown[:out.shape[0]] = out
            out = grown
        _enc_bit(st, out, probs, ctx[k], bits[k])
    if st[4] + 16 > out.shape[0]:
        grown = np.zeros(out.shape[0] + 16, dtype=np.uint8)
        grown[:out.shape[0]] = out
        out = grown
    _enc_flush(st, out)
    return out[:st[4]]


@numba.njit(cache=True)
def _decode_bits(data, ctx, probs):
    st = _dec_init(data)
    bits = np.zeros(ctx.shape[0], dtype=np.uint8)
    for k in range(ctx.shape[0]):
        bits[k] = _dec_bit(st, data, probs, ctx[k])
    return bits, st[3]


def encode_binary(bits, contexts, n_contexts: int) -> bytes:
    """Code a raw bit stream where bit k uses adaptive context contexts[k]."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    ctx = np.ascontiguousarray(contexts, dtype=np.int64)
    if len(bits) != len(ctx):
        raise ValueError("bits and contexts differ in length")
    probs = np.full(n_contexts, PROB_INIT, dtype=np.int64)
    return _encode_bits(bits, ctx, probs).tobytes()


def decode_binary(data: bytes, contexts, n_contexts: int) -> np.ndarray:
    ctx = np.ascontiguousarray(contexts, dtype=np.int64)
    probs = np.full(n_contexts, PROB_INIT, dtype=np.int64)
    bits, overrun = _decode_bits(np.frombuffer(data, dtype=np.uint8), ctx, probs)
    if overrun:
        raise DecodeError("binary stream truncated")
    return bits


# ---------------------------------------------------------------------------
# residual symbols

@numba.njit(cache=True)
def _enc_value(st, out, probs, v):
    if v == 0:
        _enc_bit(st, out, probs, CTX_ZERO, 0)
        return
    _enc_bit(st, out, probs, CTX_ZERO, 1)
    _enc_bit(st, out, probs, CTX_SIGN, 1 if v < 0 else 0)
    m = abs(v)  # >= 1, Exp-Golomb on m
    nb = 0
    while (m >> (nb + 1)) > 0:
        nb += 1
    for i in range(nb):
        _enc_bit(st, out, probs, CTX_PREFIX + i, 1)
    _enc_bit(st, out, probs, CTX_PREFIX + nb, 0)
    for j in range(nb - 1, -1, -1):
        _enc_bit(st, out, probs, CTX_SUFFIX + nb * MAX_BITS + j, (m >> j) & 1)


@numba.njit(cache=True)
def _dec_value(st, data, probs):
    if _dec_bit(st, data, probs, CTX_ZERO) == 0:
        return 0
    neg = _dec_bit(st, data, probs, CTX_SIGN)
    nb = 0
    while nb < MAX_BITS and _dec_bit(st, data, probs, CTX_PREFIX + nb) == 1:
        nb += 1
    if nb >= MAX_BITS:
        st[3] = 1
        return 0
    m = 1
    for j in range(nb - 1, -1, -1):
        m = (m << 1) | _dec_bit(st, data, probs, CTX_SUFFIX + nb * MAX_BITS + j)
    return -m if neg else m


@numba.njit(cache=True)
def _round_half(x):
    # round half away from zero
    if x >= 0:
        return np.floor(x + 0.5)
    return -np.floor(-x + 0.5)


@numba.njit(cache=True)
def _quantize(d, delta):
    """Residual level whose integer reconstruction is closest to d (ties -> smaller |q|).

    Plain rounding can leave a static slot bouncing between two integer
    levels; the tie rule makes re-quantizing an unchanged sample a no-op.
    """
    q0 = np.int64(_round_half(d / delta))
    best, berr = q0, abs(d - np.int64(_round_half(q0 * delta)))
    for q in (q0 - 1, q0 + 1):
        e = abs(d - np.int64(_round_half(q * delta)))
        if e < berr or (e == berr and abs(q) < abs(best)):
            best, berr = q, e
    return best


@numba.njit(cache=True)
def _predict(rec, ref, c, r, k, intra):
    if not intra:
        return ref[c, r, k]
    if r > 0 and k > 0:
        return max(rec[c, r, k - 1], rec[c, r - 1, k])
    if k > 0:
        return rec[c, r, k - 1]
    if r > 0:
        return rec[c, r - 1, k]
    return np.int64(0)


@numba.njit(cache=True)
def _encode_plane(cur, ref, intra, delta, probs):
    """Code one channel group (C, H, W) of int64 samples; returns (bytes, recon)."""
    C, H, W = cur.shape
    rec = np.zeros((C, H, W), dtype=np.int64)
    q = np.zeros((C, BLOCK, BLOCK), dtype=np.int64)
    out = np.zeros(C * H * W * 6 + 64, dtype=np.uint8)
    st = _enc_init()
    for br in range(0, H, BLOCK):
        for bc in range(0, W, BLOCK):
            r1 = min(br + BLOCK, H)
            c1 = min(bc + BLOCK, W)
            nz = 0
            for c in range(C):
                for r in range(br, r1):
                    for k in range(bc, c1):
                        p = _predict(rec, ref, c, r, k, intra)
                        qq = _quantize(cur[c, r, k] - p, delta)
                        v = p + np.int64(_round_half(qq * delta))
                        rec[c, r, k] = min(max(v, 0), 65535)
                        q[c, r - br, k - bc] = qq
                        if qq != 0:
                            nz = 1
            _enc_bit(st, out, probs, CTX_SKIP, 1 - nz)
            if nz:
                for c in range(C):
                    for r in range(br, r1):
                        for k in range(bc, c1):
                            _enc_value(st, out, probs, q[c, r - br, k - bc])
    _enc_flush(st, out)
    return out[:st[4]], rec


@numba.njit(cache=True)
def _decode_plane(data, ref, intra, delta, probs, C, H, W):
    rec = np.zeros((C, H, W), dtype=np.int64)
    st = _dec_init(data)
    for br in range(0, H, BLOCK):
        for bc in range(0, W, BLOCK):
            r1 = min(br + BLOCK, H)
            c1 = min(bc + BLOCK, W)
            skip = _dec_bit(st, data, probs, CTX_SKIP)
            for c in range(C):
                for r in range(br, r1):
                    for k in range(bc, c1):
                        qq = 0 if skip else _dec_value(st, data, probs)
                        p = _predict(rec, ref, c, r, k, intra)
                        v = p + np.int64(_round_half(qq * delta))
                        rec[c, r, k] = min(max(v, 0), 65535)
            if st[3]:
                return rec, 1
    return rec, st[3]


# ---------------------------------------------------------------------------
# stream

@dataclass
class StreamInfo:
    qp: float
    gop: int
    header_bytes: int
    frame_bytes: list = field(default_factory=list)
    frame_types: list = field(default_factory=list)
    group_bytes: list = field(default_factory=list)  # per frame: dict name -> bytes

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(self.frame_bytes)


def raw_size(maps_seq) -> int:
    """Bytes of the uncompressed 16-bit sample planes."""
    return int(sum(g.size * 2 for m in maps_seq for g in m.groups.values()))


def _header(maps_seq, glut, qp, delta, gop, layer):
    m0 = maps_seq[0]
    rows, cols = m0.shape
    out = [MAGIC, struct.pack("<HIIIBdI", VERSION, len(maps_seq), rows, cols, LAYERS.index(layer), delta, gop),
           struct.pack("<d", float(qp)), m0.plan_hash, struct.pack("<I", len(m0.groups))]
    for name, g in m0.groups.items():
        nb = name.encode()
        out.append(struct.pack("<B", len(nb)) + nb + struct.pack("<I", g.shape[0]))
        out.append(np.ascontiguousarray(m0.ranges[name], dtype="<f8").tobytes())
    gb = glut.to_bytes() if glut is not None else b""
    out.append(struct.pack("<I", len(gb)) + gb)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def encode(maps_seq, glut: Glut | None, qp: float = 15, gop: int = 20, layer: str = "motion",
           return_info: bool = False):
    """Compress a list of AttributeMaps (one per frame, shared plan) into bytes."""
    if not maps_seq:
        raise ConfigError("nothing to encode")
    if qp < 0:
        raise ConfigError("qp must be >= 0")
    if gop < 1:
        raise ConfigError("gop must be >= 1")
    if layer not in LAYERS:
        raise ConfigError(f"layer must be one of {LAYERS}")
    m0 = maps_seq[0]
    for m in maps_seq[1:]:
        if m.plan_hash != m0.plan_hash:
            raise FormatError(f"frame {m.frame}: plan hash differs from frame {m0.frame}")
        if list(m.groups) != list(m0.groups) or any(m.groups[k].shape != m0.groups[k].shape for k in m.groups):
            raise FormatError(f"frame {m.frame}: channel groups differ from frame {m0.frame}")
        if any(not np.array_equal(m.ranges[k], m0.ranges[k]) for k in m.ranges):
            raise FormatError(f"frame {m.frame}: dequantization ranges differ from frame {m0.frame}")
    delta = qstep(qp)
    header = _header(maps_seq, glut, qp, delta, gop, layer)
    info = StreamInfo(qp, gop, len(header))
    chunks = [header]
    names = list(m0.groups)
    probs = {}
    recon = None
    for i, m in enumerate(maps_seq):
        intra = i % gop == 0
        if intra:
            probs = {n: np.full(N_CTX, PROB_INIT, dtype=np.int64) for n in names}
        parts, new_rec, sizes = [], {}, {}
        for n in names:
            cur = m.groups[n].astype(np.int64)
            ref = cur if intra else recon[n]
            data, rec = _encode_plane(cur, ref, intra, delta, probs[n])
            parts.append(struct.pack("<I", len(data)) + data.tobytes())
            new_rec[n] = rec
            sizes[n] = len(data) + 4
        recon = new_rec
        payload = b"".join(parts)
        chunk = struct.pack("<BIII", I_FRAME if intra else P_FRAME, m.frame, len(payload), zlib.crc32(payload)) + payload
        chunks.append(chunk)
        info.frame_bytes.append(len(chunk))
        info.frame_types.append("I" if intra else "P")
        info.group_bytes.append(sizes)
    stream = b"".join(chunks)
    return (stream, info) if return_info else stream


@dataclass
class DecodedStream:
    maps: list
    glut: Glut | None
    qp: float
    gop: int
    layer: str
    frame_types: list


def _read_header(data: bytes):
    if data[:4] != MAGIC:
        raise DecodeError("bad magic, not a TGC1 stream")
    try:
        version, n_frames, rows, cols, layer, delta, gop = struct.unpack_from("<HIIIBdI", data, 4)
        off = 4 + struct.calcsize("<HIIIBdI")
        (qp,) = struct.unpack_from("<d", data, off)
        off += 8
        plan_hash = data[off:off + 8]
        off += 8
        (ng,) = struct.unpack_from("<I", data, off)
        off += 4
        table = []
        for _ in range(ng):
            (ln,) = struct.unpack_from("<B", data, off)
            name = data[off + 1:off + 1 + ln].decode()
            (c,) = struct.unpack_from("<I", data, off + 1 + ln)
            off += 5 + ln
            rng = np.frombuffer(data, "<f8", 2 * c, off).reshape(c, 2).copy()
            off += 16 * c
            table.append((name, c, rng))
        (gl,) = struct.unpack_from("<I", data, off)
        off += 4
        gbytes = data[off:off + gl]
        if len(gbytes) != gl:
            raise DecodeError("header truncated")
        off += gl
        (crc,) = struct.unpack_from("<I", data, off)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DecodeError(f"header truncated or malformed: {e}") from None
    if zlib.crc32(data[:off]) != crc:
        raise DecodeError("header checksum mismatch")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    glut = None
    if gl:
        try:
            glut, _ = Glut.from_bytes(gbytes)
        except (FormatError, struct.error, ValueError) as e:
            raise DecodeError(f"lifespan table unreadable: {e}") from None
    hdr = dict(n_frames=n_frames, rows=rows, cols=cols, layer=LAYERS[layer] if layer < len(LAYERS) else "motion",
               delta=delta, gop=gop, qp=qp, plan_hash=plan_hash, table=table, glut=glut)
    return hdr, off + 4


def decode(data: bytes) -> DecodedStream:
    data = bytes(data)
    hdr, off = _read_header(data)
    rows, cols, delta = hdr["rows"], hdr["cols"], hdr["delta"]
    table = hdr["table"]
    maps, types, recon, probs = [], [], None, {}
    chunk_head = struct.calcsize("<BIII")
    for i in range(hdr["n_frames"]):
        if off + chunk_head > len(data):
            raise DecodeError("stream truncated before frame header", frame=i + 1)
        ftype, frame, plen, crc = struct.unpack_from("<BIII", data, off)
        off += chunk_head
        payload = data[off:off + plen]
        if len(payload) != plen:
            raise DecodeError("stream truncated inside frame payload", frame=frame)
        if zlib.crc32(payload) != crc:
            raise DecodeError("payload checksum mismatch (corrupted data)", frame=frame)
        off += plen
        if ftype not in (I_FRAME, P_FRAME) or (i == 0 and ftype != I_FRAME):
            raise DecodeError("invalid frame type", frame=frame)
        intra = ftype == I_FRAME
        if intra:
            probs = {n: np.full(N_CTX, PROB_INIT, dtype=np.int64) for n, _, _ in table}
        p, groups, new_rec = 0, {}, {}
        for name, c, _ in table:
            if p + 4 > plen:
                raise DecodeError(f"group {name} missing", frame=frame)
            (gl,) = struct.unpack_from("<I", payload, p)
            seg = np.frombuffer(payload, np.uint8, gl, p + 4) if p + 4 + gl <= plen else None
            if seg is None:
                raise DecodeError(f"group {name} truncated", frame=frame)
            p += 4 + gl
            ref = np.zeros((c, rows, cols), np.int64) if intra else recon[name]
            rec, bad = _decode_plane(seg, ref, intra, delta, probs[name], c, rows, cols)
            if bad:
                raise DecodeError(f"group {name} residual data malformed", frame=frame)
            new_rec[name] = rec
            groups[name] = rec.astype(np.uint16)
        if p != plen:
            raise DecodeError("trailing bytes in frame payload", frame=frame)
        recon = new_rec
        maps.append(AttributeMaps(frame, hdr["plan_hash"], groups, {n: r.copy() for n, _, r in table}))
        types.append("I" if intra else "P")
    if off != len(data):
        raise DecodeError("trailing bytes after last frame")
    return DecodedStream(maps, hdr["glut"], hdr["qp"], hdr["gop"], hdr["layer"], types)


def write_stream(path, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def read_stream(path) -> DecodedStream:
    with open(path, "rb") as f:
        return decode(f.read())
