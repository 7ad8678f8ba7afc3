"""Lifespan-aware 2D layout of per-frame Gaussian attributes.

Motion Gaussians get one slot each in a fixed grid: persistent ones (alive
the whole sequence) first in Morton order of their first-frame position,
then transient ones by birth frame. Appearance Gaussians inherit the order
(K consecutive slots per anchor). Slots of inactive Gaussians repeat their
last active value so inter-frame residuals vanish outside lifespans.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, FormatError, GaussianSet, InvalidInputError
from .registration import Glut

QMAX = 65535
SORTINGS = ("combined", "lifespan", "morton")
LAYERS = ("motion", "appearance")


def channel_groups(sh_degree: int = 3):
    """(name, channel count) in storage order."""
    return (("position", 3), ("rotation", 4), ("log_scale", 3), ("opacity", 1), ("sh", 3 * (sh_degree + 1) ** 2))


def _flatten(gs: GaussianSet) -> np.ndarray:
    """(N, C) attribute matrix in channel-group order."""
    return np.concatenate([gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits[:, None],
                           gs.sh.reshape(len(gs), -1)], axis=1)


def _unflatten(vals: np.ndarray, ids, sh_degree: int) -> GaussianSet:
    bands = (sh_degree + 1) ** 2
    return GaussianSet(vals[:, 0:3], vals[:, 3:7], vals[:, 7:10], vals[:, 10], vals[:, 11:].reshape(-1, bands, 3),
                       ids)


# ---------------------------------------------------------------------------
# classification and Morton order

def classify(glut: Glut, total_frames: int, min_fraction: float = 1.0):
    """(persistent ids, transient ids).

    The default is the strict reading: persistent = born on frame 1 and never
    pruned. min_fraction < 1 relaxes it to "born on frame 1 and alive for at
    least that fraction of the sequence".
    """
    ids, births, deaths, _, _ = glut.arrays()
    end = np.where(deaths < 0, total_frames + 1, deaths)
    if min_fraction >= 1.0:
        pers = (births == 1) & (deaths < 0)
    else:
        pers = (births == 1) & ((end - births) >= min_fraction * total_frames)
    return ids[pers], ids[~pers]


def morton_quantize(positions, bbox, bits: int = 10):
    """Integer grid coordinates in [0, 2^bits - 1] and a mask of clamped points."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    ext = hi - lo
    top = (1 << bits) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(ext > 0, (p - lo) / np.where(ext > 0, ext, 1.0), 0.0)
    clamped = np.any((f < 0) | (f > 1), axis=1)
    q = np.rint(np.clip(f, 0.0, 1.0) * top).astype(np.int64)
    return q, clamped


def interleave(q, bits: int = 10) -> np.ndarray:
    """Bit-interleave (x, y, z) integers; x takes the lowest bit of every triple."""
    q = np.asarray(q, dtype=np.uint64).reshape(-1, 3)
    code = np.zeros(len(q), dtype=np.uint64)
    for b in range(bits):
        for axis in range(3):
            bit = (q[:, axis] >> np.uint64(b)) & np.uint64(1)
            code |= bit << np.uint64(3 * b + axis)
    return code


def morton_encode(positions, bbox, bits: int = 10) -> np.ndarray:
    q, _ = morton_quantize(positions, bbox, bits)
    return interleave(q, bits)


# ---------------------------------------------------------------------------
# layout

@dataclass
class LayoutPlan:
    order: np.ndarray  # motion global ids in slot order
    rows: int
    cols: int
    n_persistent: int
    k: int = 9
    sorting: str = "combined"
    clamped: int = 0
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self._index = {int(g): i for i, g in enumerate(self.order)}

    @property
    def total_slots(self) -> int:
        return len(self.order)

    @property
    def persistent_block(self):
        return (0, self.n_persistent)

    @property
    def transient_block(self):
        return (self.n_persistent, self.total_slots)

    def grid(self, layer: str = "motion"):
        return (self.rows, self.cols) if layer == "motion" else (self.rows, self.cols * self.k)

    def slot(self, gid: int) -> int:
        return self._index[int(gid)]

    def slot_of(self, gid: int):
        s = self.slot(gid)
        return divmod(s, self.cols)

    def slots(self, gids, layer: str = "motion") -> np.ndarray:
        """Flat (row-major) slot index per id for the given layer (same shape as gids)."""
        gids = np.asarray(gids, dtype=np.int64)
        if layer == "motion":
            try:
                return np.array([self._index[int(g)] for g in gids.ravel()], dtype=np.int64).reshape(gids.shape)
            except KeyError as e:
                raise InvalidInputError(f"global id {e.args[0]} has no slot in the layout") from None
        anchors, slot = np.divmod(gids, self.k)
        return self.slots(anchors) * self.k + slot

    def ids_at(self, layer: str = "motion"):
        """Global id stored at each flat slot (-1 for padding)."""
        rows, cols = self.grid(layer)
        out = np.full(rows * cols, -1, dtype=np.int64)
        if layer == "motion":
            out[:self.total_slots] = self.order
        else:
            out[:self.total_slots * self.k] = (self.order[:, None] * self.k + np.arange(self.k)).ravel()
        return out

    def hash(self) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<IIII", self.rows, self.cols, self.k, self.n_persistent))
        h.update(self.order.astype("<i8").tobytes())
        return h.digest()[:8]


def grid_shape(n: int):
    cols = max(8, int(np.ceil(np.sqrt(max(n, 1)))))
    cols = -(-cols // 8) * 8
    rows = max(1, -(-n // cols))
    return rows, cols


def build_layout(glut: Glut, total_frames: int, sorting: str = "combined", bits: int = 10, k: int = 9,
                 min_fraction: float = 1.0) -> LayoutPlan:
    """Slot order for every id in the lifespan table.

    sorting: "combined" (persistent by Morton, transient by birth then Morton),
    "lifespan" (persistent by id, transient by birth then id) or "morton"
    (every id by Morton code of its birth position).
    """
    if sorting not in SORTINGS:
        raise ConfigError(f"sorting must be one of {SORTINGS}")
    ids, births, _, _, pos = glut.arrays()
    pers_ids, _ = classify(glut, total_frames, min_fraction)
    is_p = np.isin(ids, pers_ids)
    if len(ids):
        bbox = (pos.min(axis=0), pos.max(axis=0))
        q, clamped = morton_quantize(pos, bbox, bits)
        codes = interleave(q, bits)
    else:
        codes, clamped = np.zeros(0, np.uint64), np.zeros(0, bool)
    if sorting == "morton":
        order = ids[np.lexsort((ids, codes))]
        n_p = 0
    else:
        key = codes if sorting == "combined" else np.zeros_like(codes)
        p_idx = np.flatnonzero(is_p)
        t_idx = np.flatnonzero(~is_p)
        p_order = p_idx[np.lexsort((ids[p_idx], key[p_idx]))]
        t_order = t_idx[np.lexsort((ids[t_idx], key[t_idx], births[t_idx]))]
        order = ids[np.concatenate([p_order, t_order])]
        n_p = len(p_idx)
    rows, cols = grid_shape(len(order))
    return LayoutPlan(order, rows, cols, n_p, k, sorting, int(clamped.sum()))


def neighbor_distance(plan: LayoutPlan, positions_by_id: dict, block: str = "persistent") -> float:
    """Mean 3D distance between horizontally or vertically adjacent grid slots."""
    lo, hi = plan.persistent_block if block == "persistent" else (0, plan.total_slots)
    ids = plan.ids_at("motion")
    ids[:lo] = -1
    ids[hi:] = -1
    grid = ids.reshape(plan.rows, plan.cols)
    d = []
    for a, b in ((grid[:, :-1], grid[:, 1:]), (grid[:-1, :], grid[1:, :])):
        m = (a >= 0) & (b >= 0)
        for x, y in zip(a[m], b[m]):
            d.append(np.linalg.norm(positions_by_id[int(x)] - positions_by_id[int(y)]))
    return float(np.mean(d)) if d else 0.0


# ---------------------------------------------------------------------------
# attribute maps

@dataclass
class AttributeMaps:
    frame: int
    plan_hash: bytes
    groups: dict  # name -> uint16 array (channels, rows, cols)
    ranges: dict  # name -> float64 array (channels, 2): min, max
    clamped: int = 0

    @property
    def shape(self):
        g = next(iter(self.groups.values()))
        return g.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, AttributeMaps):
            return False
        return (self.frame == other.frame and self.plan_hash == other.plan_hash
                and list(self.groups) == list(other.groups)
                and all(np.array_equal(self.groups[k], other.groups[k]) for k in self.groups)
                and all(np.array_equal(self.ranges[k], other.ranges[k]) for k in self.ranges))


def _split_groups(sh_degree):
    out, off = [], 0
    for name, c in channel_groups(sh_degree):
        out.append((name, off, off + c))
        off += c
    return out


def quantize(vals, lo, hi):
    """Values (..., C) -> uint16 codes and the number of clamped samples."""
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(span > 0, (vals - lo) / np.where(span > 0, span, 1.0), 0.0)
    clamped = int(np.sum((f < 0) | (f > 1)))
    return np.rint(np.clip(f, 0.0, 1.0) * QMAX).astype(np.uint16), clamped


def dequantize(codes, lo, hi):
    return lo + codes.astype(np.float64) / QMAX * (hi - lo)


def compute_ranges(frames, sh_degree: int):
    """Per-channel (min, max) over every live Gaussian in the sequence."""
    vals = np.concatenate([_flatten(g) for g in frames if len(g)]) if any(len(g) for g in frames) else \
        np.zeros((1, sum(c for _, c in channel_groups(sh_degree))))
    lo, hi = vals.min(axis=0), vals.max(axis=0)
    return {name: np.stack([lo[a:b], hi[a:b]], axis=1) for name, a, b in _split_groups(sh_degree)}


def pack_frame(t: int, live: GaussianSet, plan: LayoutPlan, prior: AttributeMaps | None, ranges: dict,
               layer: str = "motion", fill: np.ndarray | None = None) -> AttributeMaps:
    """Quantized maps for frame t.

    Live Gaussians write their slots; every other slot copies `prior`
    (frame t-1). Without a prior, non-live slots take `fill` (float,
    (slots, C)), which the sequence packer sets to each entry's birth-frame
    values.
    """
    rows, cols = plan.grid(layer)
    S = rows * cols
    sh_degree = live.sh_degree
    C = sum(c for _, c in channel_groups(sh_degree))
    live_vals = _flatten(live)
    slots = plan.slots(live.global_ids, layer)
    groups, clamped = {}, 0
    for name, a, b in _split_groups(sh_degree):
        lo, hi = ranges[name][:, 0], ranges[name][:, 1]
        if prior is not None:
            if prior.groups[name].shape != (b - a, rows, cols):
                raise FormatError("prior maps do not match the layout")
            flat = prior.groups[name].reshape(b - a, S).T.copy()
        else:
            base = np.zeros((S, C)) if fill is None else fill
            flat, c0 = quantize(base[:, a:b], lo, hi)
            clamped += c0
        q, c1 = quantize(live_vals[:, a:b], lo, hi)
        clamped += c1
        flat[slots] = q
        groups[name] = np.ascontiguousarray(flat.T.reshape(b - a, rows, cols))
    return AttributeMaps(t, plan.hash(), groups, {k: v.copy() for k, v in ranges.items()}, clamped)


def _birth_fill(frames, plan: LayoutPlan, layer: str, C: int):
    """Per-slot values at each id's first live frame (zeros for padding)."""
    rows, cols = plan.grid(layer)
    fill = np.zeros((rows * cols, C))
    done = np.zeros(rows * cols, dtype=bool)
    for gs in frames:
        if len(gs) == 0:
            continue
        s = plan.slots(gs.global_ids, layer)
        new = ~done[s]
        fill[s[new]] = _flatten(gs)[new]
        done[s[new]] = True
    return fill


def pack_sequence(frames, plan: LayoutPlan, layer: str = "motion", ranges: dict | None = None):
    """Pack live sets (index 0 = frame 1) into one AttributeMaps per frame."""
    if not frames:
        return []
    sh_degree = frames[0].sh_degree
    C = sum(c for _, c in channel_groups(sh_degree))
    ranges = ranges or compute_ranges(frames, sh_degree)
    fill = _birth_fill(frames, plan, layer, C)
    out, prior = [], None
    for t, gs in enumerate(frames, start=1):
        prior = pack_frame(t, gs, plan, prior, ranges, layer, fill)
        out.append(prior)
    return out


@dataclass
class UnpackedFrame:
    ids: np.ndarray  # id per flat slot, -1 for padding
    values: np.ndarray  # (slots, C) dequantized
    live: np.ndarray  # bool per slot
    sh_degree: int

    def live_set(self) -> GaussianSet:
        m = self.live
        return _unflatten(self.values[m], self.ids[m], self.sh_degree)


def alive_mask(ids, glut: Glut, t: int, layer: str = "motion", k: int = 9) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    anchors = ids if layer == "motion" else ids // k
    out = np.zeros(len(ids), dtype=bool)
    for i, a in enumerate(anchors):
        if a >= 0 and a in glut:
            out[i] = glut[a].alive(t)
    return out


def unpack_frame(maps: AttributeMaps, plan: LayoutPlan, glut: Glut, layer: str = "motion") -> UnpackedFrame:
    rows, cols = plan.grid(layer)
    if maps.plan_hash != plan.hash():
        raise FormatError("attribute maps were packed with a different layout")
    if tuple(maps.shape) != (rows, cols):
        raise FormatError(f"map grid {maps.shape} does not match layout grid {(rows, cols)}")
    cols_all = []
    for name in maps.groups:
        g = maps.groups[name]
        r = maps.ranges[name]
        cols_all.append(dequantize(g.reshape(len(g), -1).T, r[:, 0], r[:, 1]))
    vals = np.concatenate(cols_all, axis=1)
    bands3 = maps.groups["sh"].shape[0]
    sh_degree = int(round(np.sqrt(bands3 // 3))) - 1
    ids = plan.ids_at(layer)
    return UnpackedFrame(ids, vals, alive_mask(ids, glut, maps.frame, layer, plan.k), sh_degree)


# ---------------------------------------------------------------------------
# files

def maps_to_bytes(m: AttributeMaps) -> bytes:
    rows, cols = m.shape
    out = [b"TGM1", struct.pack("<I", m.frame), m.plan_hash, struct.pack("<III", rows, cols, len(m.groups))]
    for name, g in m.groups.items():
        nb = name.encode()
        out.append(struct.pack("<B", len(nb)) + nb + struct.pack("<I", g.shape[0]))
        out.append(np.ascontiguousarray(m.ranges[name], dtype="<f8").tobytes())
    for g in m.groups.values():
        out.append(np.ascontiguousarray(g, dtype="<u2").tobytes())
    return b"".join(out)


def maps_from_bytes(data: bytes) -> AttributeMaps:
    if data[:4] != b"TGM1":
        raise FormatError("bad attribute-map magic")
    try:
        (frame,) = struct.unpack_from("<I", data, 4)
        plan_hash = data[8:16]
        rows, cols, ng = struct.unpack_from("<III", data, 16)
        off = 28
        table = []
        for _ in range(ng):
            (ln,) = struct.unpack_from("<B", data, off)
            name = data[off + 1:off + 1 + ln].decode()
            (c,) = struct.unpack_from("<I", data, off + 1 + ln)
            off += 5 + ln
            rng = np.frombuffer(data, "<f8", 2 * c, off).reshape(c, 2).copy()
            off += 16 * c
            table.append((name, c, rng))
        groups, ranges = {}, {}
        for name, c, rng in table:
            n = c * rows * cols
            groups[name] = np.frombuffer(data, "<u2", n, off).reshape(c, rows, cols).copy()
            ranges[name] = rng
            off += 2 * n
    except (struct.error, ValueError) as e:
        raise FormatError(f"truncated attribute-map file: {e}") from None
    if off != len(data):
        raise FormatError("trailing bytes in attribute-map file")
    return AttributeMaps(frame, plan_hash, groups, ranges)


def write_maps(path, m: AttributeMaps) -> None:
    Path(path).write_bytes(maps_to_bytes(m))


def read_maps(path) -> AttributeMaps:
    return maps_from_bytes(Path(path).read_bytes())


def raster_name(layer: str, group: str, frame: int) -> str:
    return f"{layer}_{group}_f{frame:04d}.png"


def export_rasters(maps_seq, directory, layer: str = "motion"):
    """One 16-bit grayscale PNG per (frame, channel group); channels stacked vertically."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create raster directory {d}: {e}") from e
    paths = []
    for m in maps_seq:
        for name, g in m.groups.items():
            p = d / raster_name(layer, name, m.frame)
            try:
                Image.fromarray(np.ascontiguousarray(g.reshape(-1, g.shape[2]), dtype=np.uint16)).save(p)
            except OSError as e:
                raise OSError(f"failed to write raster {p}: {e}") from e
            paths.append(p)
    return paths


def import_rasters(directory, template: AttributeMaps, frame: int, layer: str = "motion") -> AttributeMaps:
    """Rebuild maps for one frame from rasters, taking header data from `template`."""
    d = Path(directory)
    groups = {}
    for name, g in template.groups.items():
        p = d / raster_name(layer, name, frame)
        try:
            arr = np.array(Image.open(p), dtype=np.uint16)
        except OSError as e:
            raise OSError(f"failed to read raster {p}: {e}") from e
        groups[name] = arr.reshape(g.shape)
    return AttributeMaps(frame, template.plan_hash, groups, {k: v.copy() for k, v in template.ranges.items()})
