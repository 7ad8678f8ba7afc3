"""Frame-to-frame motion registration.

First-frame initialization from triangulated matches, then per-frame
tracking under ARAP + photometric loss with candidate insertion,
densification, pruning, local graph updates and lifespan bookkeeping.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (ConfigError, DeformGraph, DivergenceError, FormatError, GaussianSet,
                   InitializationError, InvalidInputError, knn_build, local_knn_update, read_gaussians,
                   read_graph, write_gaussians, write_graph, rotmat_normalized)
from .energy import LossWeights, arap_terms, color_loss, iso_size_energy, laplacian_energy
from .optim import Adam
from .scenegen import oracle_spatial_match, oracle_temporal_track
from .splat import SplatGrads, error_map, splat, splat_backward
from .triangulation import pair_cameras, triangulate

ORIGINS = ("initial", "candidate", "densified")
_OPEN = 0xFFFFFFFF


# ---------------------------------------------------------------------------
# lifespan table

@dataclass
class GlutEntry:
    birth: int
    death: int | None  # None = still alive (open interval)
    birth_position: np.ndarray
    origin: str

    def alive(self, t: int) -> bool:
        return self.birth <= t and (self.death is None or t < self.death)


class Glut:
    """global id -> lifespan [birth, death). Ids are allocated monotonically."""

    def __init__(self):
        self.entries: dict[int, GlutEntry] = {}
        self.next_id = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, gid):
        return int(gid) in self.entries

    def __getitem__(self, gid) -> GlutEntry:
        return self.entries[int(gid)]

    def allocate(self, n: int) -> np.ndarray:
        ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += int(n)
        return ids

    def add(self, gid: int, birth: int, position, origin: str):
        gid = int(gid)
        if gid in self.entries:
            raise InvalidInputError(f"global id {gid} already has a lifespan")
        if origin not in ORIGINS:
            raise InvalidInputError(f"unknown origin {origin!r}")
        self.entries[gid] = GlutEntry(int(birth), None, np.asarray(position, dtype=np.float64).copy(), origin)
        self.next_id = max(self.next_id, gid + 1)

    def kill(self, gid: int, t: int):
        e = self.entries[int(gid)]
        if e.death is not None:
            raise InvalidInputError(f"global id {gid} already dead at {e.death}")
        if t <= e.birth:
            raise InvalidInputError(f"death {t} must come after birth {e.birth}")
        e.death = int(t)

    def ids(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def alive_ids(self, t: int) -> np.ndarray:
        return np.array(sorted(g for g, e in self.entries.items() if e.alive(t)), dtype=np.int64)

    def copy(self) -> "Glut":
        g = Glut()
        g.next_id = self.next_id
        g.entries = {k: GlutEntry(e.birth, e.death, e.birth_position.copy(), e.origin)
                     for k, e in self.entries.items()}
        return g

    def arrays(self):
        """(ids, births, deaths with -1 for open, origin codes, birth positions), id-sorted."""
        ids = self.ids()
        es = [self.entries[int(i)] for i in ids]
        births = np.array([e.birth for e in es], dtype=np.int64)
        deaths = np.array([-1 if e.death is None else e.death for e in es], dtype=np.int64)
        origins = np.array([ORIGINS.index(e.origin) for e in es], dtype=np.int64)
        pos = np.array([e.birth_position for e in es], dtype=np.float64).reshape(-1, 3)
        return ids, births, deaths, origins, pos

    def __eq__(self, other):
        if not isinstance(other, Glut) or self.next_id != other.next_id:
            return False
        a, b = self.arrays(), other.arrays()
        return all(np.array_equal(x, y) for x, y in zip(a, b))

    def to_bytes(self) -> bytes:
        ids, births, deaths, origins, pos = self.arrays()
        out = [b"TGL1", struct.pack("<II", len(ids), self.next_id)]
        rec = np.zeros(len(ids), dtype=[("id", "<u4"), ("birth", "<u4"), ("death", "<u4"),
                                         ("origin", "u1"), ("pos", "<f8", (3,))])
        rec["id"], rec["birth"], rec["origin"], rec["pos"] = ids, births, origins, pos
        rec["death"] = np.where(deaths < 0, _OPEN, deaths)
        out.append(rec.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["Glut", int]:
        if data[offset:offset + 4] != b"TGL1":
            raise FormatError("bad lifespan-table magic")
        n, next_id = struct.unpack_from("<II", data, offset + 4)
        dt = np.dtype([("id", "<u4"), ("birth", "<u4"), ("death", "<u4"), ("origin", "u1"), ("pos", "<f8", (3,))])
        start = offset + 12
        if len(data) < start + n * dt.itemsize:
            raise FormatError("truncated lifespan table")
        rec = np.frombuffer(data, dt, n, start)
        g = cls()
        for r in rec:
            g.add(int(r["id"]), int(r["birth"]), r["pos"], ORIGINS[int(r["origin"])])
            if int(r["death"]) != _OPEN:
                g.entries[int(r["id"])].death = int(r["death"])
        g.next_id = int(next_id)
        return g, start + n * dt.itemsize


def write_glut(path, glut: Glut) -> None:
    Path(path).write_bytes(glut.to_bytes())


def read_glut(path) -> Glut:
    return Glut.from_bytes(Path(path).read_bytes())[0]


# ---------------------------------------------------------------------------
# configuration

DEFAULT_LR = {
    "position": 1.6e-4,
    "position_final": 1.6e-6,
    "rotation": 1e-3,
    "scale": 5e-3,
    "opacity": 5e-2,
    "sh": 2.5e-3,  # DC band; higher bands use sh / 20
}


@dataclass
class TrainSchedule:
    init_iters: int = 6000
    track_iters: int = 6000
    candidate_insert_iter: int = 3000
    maintenance_period: int = 300
    divergence_window: int = 500
    views_per_iter: int = 0  # 0 = every view each iteration
    log_every: int = 50
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))

    def __post_init__(self):
        for name in ("init_iters", "track_iters", "candidate_insert_iter", "maintenance_period",
                     "divergence_window", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"schedule.{name} must be >= 1")
        if not self.candidate_insert_iter < self.track_iters:
            raise ConfigError("candidate_insert_iter must be smaller than track_iters")
        if (self.track_iters - self.candidate_insert_iter) % self.maintenance_period:
            raise ConfigError("maintenance_period must divide track_iters - candidate_insert_iter")
        lr = dict(DEFAULT_LR)
        unknown = set(self.lr) - set(lr)
        if unknown:
            raise ConfigError(f"unknown learning-rate keys {sorted(unknown)}")
        lr.update(self.lr)
        self.lr = lr


@dataclass
class RegistrationConfig:
    k: int = 9
    budget: int = 2000
    tau_op: float = 0.05
    tau_grad: float = 2e-4
    epsilon: float = 0.46
    init_density: float = 0.1
    candidate_density: float = 0.05
    max_reproj: float = 1.0
    radius_factor: float = 2.0
    s_max_ratio: float = 0.05
    percent_dense: float = 0.01
    sh_degree: int = 3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)


@dataclass
class MotionState:
    gaussians: GaussianSet
    graph: DeformGraph
    glut: Glut
    frame: int


# ---------------------------------------------------------------------------
# shared helpers

def _sh_lr(lr, sh_degree):
    bands = (sh_degree + 1) ** 2
    v = np.full((bands, 1), lr["sh"] / 20.0)
    v[0] = lr["sh"]
    return v


def _adam_lrs(lr, sh_degree, position_lr):
    return {"positions": position_lr, "rotations": lr["rotation"], "log_scales": lr["scale"],
            "opacity_logits": lr["opacity"], "sh": _sh_lr(lr, sh_degree)}


def _position_lr(lr, it, total):
    # log-linear decay from position to position_final over the run
    f = (it - 1) / max(total - 1, 1)
    return float(np.exp((1 - f) * np.log(lr["position"]) + f * np.log(lr["position_final"])))


def _views_for(it, n_views, per_iter):
    if per_iter <= 0 or per_iter >= n_views:
        return list(range(n_views))
    return [((it - 1) * per_iter + j) % n_views for j in range(per_iter)]


def photometric(gs: GaussianSet, cameras, images, views, lambda_dssim: float = 0.2):
    """Mean color loss over the given views and its gradient."""
    grads = SplatGrads.zeros_like(gs)
    total = 0.0
    for v in views:
        r = splat(gs, cameras[v])
        loss, g = color_loss(r.color, images[v], lambda_dssim)
        grads += splat_backward(gs, cameras[v], g, forward=r)
        total += loss
    n = max(len(views), 1)
    return total / n, grads.scaled(1.0 / n)


class DivergenceGuard:
    """Raise if the (cycle-smoothed) color loss grows by more than `ratio` over `window` iterations."""

    def __init__(self, window: int, cycle: int = 1, ratio: float = 1.5, label: str = ""):
        self.window, self.cycle, self.ratio, self.label = window, max(cycle, 1), ratio, label
        self.raw = []
        self.smooth = []

    def push(self, it: int, loss: float):
        if not np.isfinite(loss):
            raise DivergenceError(f"{self.label}non-finite color loss at iteration {it}")
        self.raw.append(loss)
        self.smooth.append(float(np.mean(self.raw[-self.cycle:])))
        if len(self.smooth) > self.window:
            old = self.smooth[-1 - self.window]
            if self.smooth[-1] > self.ratio * old:
                raise DivergenceError(
                    f"{self.label}color loss rose from {old:.5g} to {self.smooth[-1]:.5g} "
                    f"within {self.window} iterations (iteration {it})")


def _sample(img, px):
    H, W = img.shape[:2]
    ij = np.rint(px).astype(np.int64)
    ij[:, 0] = np.clip(ij[:, 0], 0, W - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, H - 1)
    return img[ij[:, 1], ij[:, 0]]


def _triangulate_frame(seq, t, density, max_reproj):
    """Triangulated matches over all camera pairs, exact duplicates removed."""
    cams = seq.cameras
    pts, cols, views, pix = [], [], [], []
    for a, b in pair_cameras(cams):
        corr = oracle_spatial_match(seq, t, (a, b), density)
        if len(corr.pairs) == 0:
            continue
        X, keep, _ = triangulate(cams[a], cams[b], corr.pairs[:, 0], corr.pairs[:, 1], max_reproj)
        pr = corr.pairs[keep]
        c = 0.5 * (_sample(seq.image(t, a), pr[:, 0]) + _sample(seq.image(t, b), pr[:, 1]))
        pts.append(X[keep])
        cols.append(c)
        views.append(np.tile([a, b], (len(pr), 1)))
        pix.append(pr)
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), np.int64), np.zeros((0, 2, 2))
    X = np.concatenate(pts)
    C = np.concatenate(cols)
    V = np.concatenate(views)
    P = np.concatenate(pix)
    _, first = np.unique(np.round(X * 1e6), axis=0, return_index=True)
    first = np.sort(first)
    return X[first], C[first], V[first], P[first]


def _local_spacing(points, ref=None, k=3):
    """Mean distance to the k nearest other points (of `ref`, default `points`)."""
    if ref is None:
        ref = points
        skip = 1
    else:
        skip = 0
    if len(ref) <= skip:
        return np.full(len(points), 0.01)
    kk = min(k + skip, len(ref))
    d, _ = cKDTree(ref).query(points, kk)
    d = np.asarray(d).reshape(len(points), kk)[:, skip:]
    return d.mean(axis=1)


def _grad_norm_of(grads: SplatGrads):
    return np.linalg.norm(grads.positions, axis=1)


# ---------------------------------------------------------------------------
# first frame

def init_first_frame(seq, config: RegistrationConfig, log=None) -> MotionState:
    """Triangulate, optimize the init energy, prune to budget, build graph and Glut."""
    cams = seq.cameras
    if len(cams) < 2:
        raise InitializationError("initialization needs at least two views")
    X, C, _, _ = _triangulate_frame(seq, 1, config.init_density, config.max_reproj)
    if len(X) < max(8, config.k + 1):
        raise InitializationError(f"only {len(X)} points triangulated on frame 1 (need >= 8)")
    scale = _local_spacing(X)
    gs = GaussianSet.from_points(X, C, scale, np.arange(len(X)), opacity=0.5, sh_degree=config.sh_degree)
    graph = knn_build(X, config.k, radius_factor=config.radius_factor)
    s_max = config.s_max_ratio * float(np.linalg.norm(X.max(0) - X.min(0)))
    sched, w = config.schedule, config.weights
    images = [seq.image(1, v) for v in range(len(cams))]
    opt = Adam(gs, _adam_lrs(sched.lr, config.sh_degree, sched.lr["position"]))
    cycle = len(_views_for(1, len(cams), sched.views_per_iter))
    guard = DivergenceGuard(sched.divergence_window, max(1, len(cams) // cycle), label="init: ")
    for it in range(1, sched.init_iters + 1):
        opt.lrs["positions"] = _position_lr(sched.lr, it, sched.init_iters)
        views = _views_for(it, len(cams), sched.views_per_iter)
        Ec, g = photometric(gs, cams, images, views, w.lambda_dssim)
        El, gl = laplacian_energy(gs.positions, graph)
        (Ei, Es), (gi, gsz) = iso_size_energy(gs.log_scales, s_max)
        g.positions += w.lambda_lap * gl
        g.log_scales += w.lambda_iso * gi + w.lambda_size * gsz
        opt.step(gs, g)
        guard.push(it, Ec)
        if log is not None and (it % sched.log_every == 0 or it == sched.init_iters):
            log.write({"frame": 1, "iter": it, "color": Ec, "lap": El, "iso": Ei, "size": Es, "n": len(gs)})

    op = gs.opacities
    idx = np.flatnonzero(op >= config.tau_op)
    if len(idx) > config.budget:
        order = np.lexsort((idx, -op[idx]))[:config.budget]
        idx = np.sort(idx[order])
    if len(idx) < config.k + 1:
        raise InitializationError(f"only {len(idx)} Gaussians survive initial pruning")
    gs = gs.subset(idx)
    glut = Glut()
    gs.global_ids = glut.allocate(len(gs))
    for gid, p in zip(gs.global_ids, gs.positions):
        glut.add(gid, 1, p, "initial")
    graph = knn_build(gs.positions, config.k, radius_factor=config.radius_factor)
    if log is not None:
        log.write({"frame": 1, "event": "init", "triangulated": int(len(X)), "kept": int(len(gs))})
    return MotionState(gs, graph, glut, 1)


# ---------------------------------------------------------------------------
# candidates

@dataclass
class CandidateSet:
    gaussians: GaussianSet  # ids are placeholders (row numbers)
    views: np.ndarray  # (M, 2) source view indices
    pixels: np.ndarray  # (M, 2, 2) source pixel (x, y) in each view
    out_of_bounds: int = 0

    def __len__(self):
        return len(self.gaussians)

    def subset(self, mask) -> "CandidateSet":
        mask = np.asarray(mask, dtype=bool)
        gs = self.gaussians.subset(mask)
        gs.global_ids = np.arange(len(gs))
        return CandidateSet(gs, self.views[mask], self.pixels[mask], self.out_of_bounds)


def propose_candidates(seq, t: int, ref: GaussianSet, config: RegistrationConfig) -> CandidateSet:
    """Triangulated proposals for frame t, before any filtering."""
    X, C, V, P = _triangulate_frame(seq, t, config.candidate_density, config.max_reproj)
    if len(X) == 0:
        return CandidateSet(GaussianSet.empty(config.sh_degree), V, P)
    if len(ref) > 3:
        base = float(np.mean(_local_spacing(ref.positions, k=1)))
        scale = np.clip(_local_spacing(X, ref.positions), 0.5 * base, 2.0 * base)
    else:
        scale = _local_spacing(X)
    gs = GaussianSet.from_points(X, C, scale, np.arange(len(X)), opacity=0.5, sh_degree=config.sh_degree)
    return CandidateSet(gs, V, P)


def _lookup(cands: CandidateSet, maps):
    """Per-candidate values of a per-view map at both source pixels, plus an in-bounds mask."""
    M = len(cands)
    vals = np.zeros((M, 2))
    inb = np.ones(M, dtype=bool)
    for j in range(2):
        for v in np.unique(cands.views[:, j]) if M else []:
            rows = np.flatnonzero(cands.views[:, j] == v)
            m = np.asarray(maps[int(v)])
            H, W = m.shape[:2]
            ij = np.rint(cands.pixels[rows, j]).astype(np.int64)
            ok = (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
            inb[rows[~ok]] = False
            good = rows[ok]
            vals[good, j] = m[ij[ok, 1], ij[ok, 0]]
    return vals, inb


def filter_w1(cands: CandidateSet, masks) -> CandidateSet:
    """Keep candidates whose source pixels have no temporal correspondence in both views.

    masks: mapping view -> (H, W) array with 1 where a pixel has a track to t-1.
    """
    vals, inb = _lookup(cands, masks)
    w1 = (1 - vals[:, 0]) * (1 - vals[:, 1])
    out = cands.subset(inb & (w1 == 1))
    out.out_of_bounds = cands.out_of_bounds + int(np.sum(~inb))
    return out


def filter_w2(cands: CandidateSet, errors, epsilon: float = 0.46) -> CandidateSet:
    """Keep candidates whose summed source-pixel photometric error is at least epsilon."""
    vals, inb = _lookup(cands, errors)
    w2 = vals[:, 0] + vals[:, 1]
    out = cands.subset(inb & (w2 >= epsilon))
    out.out_of_bounds = cands.out_of_bounds + int(np.sum(~inb))
    return out


# ---------------------------------------------------------------------------
# per-frame tracking

@dataclass
class FrameWork:
    """Mutable optimization state for one frame."""
    frame: int
    gaussians: GaussianSet
    graph: DeformGraph
    glut: Glut
    prev_positions: np.ndarray
    prev_rotations: np.ndarray
    origin: np.ndarray  # 0 reference, 1 candidate, 2 densified
    optimizer: Adam
    grad_accum: np.ndarray
    grad_count: int = 0
    rng: np.random.Generator | None = None

    @property
    def is_new(self):
        return self.origin > 0


@dataclass
class FrameReport:
    frame: int
    proposed: int = 0
    after_w1: int = 0
    after_w2: int = 0
    out_of_bounds: int = 0
    inserted: int = 0
    densified: int = 0
    pruned: int = 0  # reference Gaussians that died this frame
    pruned_new: int = 0  # candidates removed before frame end
    born: int = 0
    alive: int = 0
    color_loss: float = 0.0
    smooth_first: float = 0.0
    smooth_last: float = 0.0
    inserted_positions: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("inserted_positions")
        return d


def _append_rows(work: FrameWork, new: GaussianSet, origin_code: int):
    n = len(new)
    if n == 0:
        return
    work.gaussians = GaussianSet.concat([work.gaussians, new])
    work.prev_positions = np.concatenate([work.prev_positions, new.positions])
    work.prev_rotations = np.concatenate([work.prev_rotations, new.rotations])
    work.origin = np.concatenate([work.origin, np.full(n, origin_code, dtype=np.int8)])
    work.optimizer.append(n, new)
    work.grad_accum = np.concatenate([work.grad_accum, np.zeros(n)])
    g = work.graph
    work.graph = DeformGraph(np.concatenate([g.neighbors, np.full((n, g.k), -1, dtype=np.int64)]),
                             np.concatenate([g.weights, np.zeros((n, g.k))]), g.influence_radius, g.k)


def _keep_rows(work: FrameWork, keep):
    work.gaussians = work.gaussians.subset(keep)
    work.prev_positions = work.prev_positions[keep]
    work.prev_rotations = work.prev_rotations[keep]
    work.origin = work.origin[keep]
    work.optimizer.keep(keep)
    work.grad_accum = work.grad_accum[keep]
    work.graph = work.graph.remap(keep)


def _relink_new(work: FrameWork):
    """Recompute neighbour lists of new nodes and their 2-ring."""
    new = np.flatnonzero(work.is_new)
    if len(new) == 0:
        return
    g = local_knn_update(work.graph, work.gaussians.positions, work.is_new)
    work.graph = local_knn_update(g, work.gaussians.positions, g.ring(new, 2))


def insert_candidates(work: FrameWork, cands: CandidateSet):
    """Give the retained candidates fresh ids and connect them to the graph."""
    if len(cands) == 0:
        return 0
    new = cands.gaussians.copy()
    new.global_ids = work.glut.allocate(len(new))
    _append_rows(work, new, 1)
    _relink_new(work)
    return len(new)


def densify_prune_update(work: FrameWork, config: RegistrationConfig) -> dict:
    """Clone/split high-gradient new Gaussians, prune transparent ones, relink locally."""
    gs = work.gaussians
    n0 = len(gs)
    mean_grad = work.grad_accum / max(work.grad_count, 1)
    sel = work.is_new & (mean_grad > config.tau_grad)
    extent = 0.5 * float(np.linalg.norm(gs.positions.max(0) - gs.positions.min(0))) if n0 else 0.0
    small = gs.scales.max(axis=1) <= config.percent_dense * extent
    clone = np.flatnonzero(sel & small)
    split = np.flatnonzero(sel & ~small)

    parts = []
    if len(clone):
        parts.append(gs.subset(clone))
    if len(split):
        rows = np.repeat(split, 2)
        src = GaussianSet(gs.positions[rows], gs.rotations[rows], gs.log_scales[rows],
                          gs.opacity_logits[rows], gs.sh[rows], np.arange(len(rows)))
        R = rotmat_normalized(src.rotations)
        z = work.rng.standard_normal((len(src), 3)) * src.scales
        src.positions = src.positions + np.einsum("nij,nj->ni", R, z)
        src.log_scales = src.log_scales - np.log(1.6)
        parts.append(src)
    n_new = 0
    if parts:
        ids = work.glut.allocate(sum(len(p) for p in parts))
        off = 0
        for p in parts:
            p.global_ids = ids[off:off + len(p)]
            off += len(p)
        new = GaussianSet.concat(parts)
        n_new = len(new)
        _append_rows(work, new, 2)

    keep = work.gaussians.opacities >= config.tau_op
    keep[split] = False
    dead_ref = np.flatnonzero(~keep & (work.origin == 0))
    for gid in work.gaussians.global_ids[dead_ref]:
        work.glut.kill(gid, work.frame)
    if not keep.any():
        raise InvalidInputError(f"frame {work.frame}: pruning would leave an empty deformation graph")
    n_pruned_new = int(np.sum(~keep & work.is_new)) - len(split)
    changed = n_new > 0 or not keep.all()
    if not keep.all():
        _keep_rows(work, keep)
    if changed:
        _relink_new(work)
    work.grad_accum[:] = 0.0
    work.grad_count = 0
    return {"densified": n_new, "split": len(split), "pruned": len(dead_ref), "pruned_new": n_pruned_new}


def _error_maps(gs, cams, images):
    return {v: error_map(splat(gs, cams[v]), images[v]) for v in range(len(cams))}


def _temporal_masks(seq, t, views):
    return {int(v): oracle_temporal_track(seq, t, int(v)).mask for v in views}


def select_candidates(seq, t, gs: GaussianSet, config: RegistrationConfig):
    """Propose, then apply the w1 and w2 gates. Returns (proposed, after_w1, after_w2)."""
    cams = seq.cameras
    proposed = propose_candidates(seq, t, gs, config)
    if len(proposed) == 0:
        return proposed, proposed, proposed
    masks = _temporal_masks(seq, t, np.unique(proposed.views))
    c1 = filter_w1(proposed, masks)
    if len(c1) == 0:
        return proposed, c1, c1
    images = {v: seq.image(t, v) for v in np.unique(c1.views)}
    errors = {int(v): error_map(splat(gs, cams[v]), images[v]) for v in images}
    c2 = filter_w2(c1, errors, config.epsilon)
    return proposed, c1, c2


def track_frame(state: MotionState, t: int, seq, config: RegistrationConfig, log=None):
    """Solve frame t from the state at t-1. Returns (MotionState, FrameReport)."""
    if t != state.frame + 1:
        raise InvalidInputError(f"track_frame expects frame {state.frame + 1}, got {t}")
    sched, w = config.schedule, config.weights
    cams = seq.cameras
    images = [seq.image(t, v) for v in range(len(cams))]
    gs = state.gaussians.copy()
    work = FrameWork(
        frame=t, gaussians=gs, graph=state.graph.copy(), glut=state.glut.copy(),
        prev_positions=gs.positions.copy(), prev_rotations=gs.rotations.copy(),
        origin=np.zeros(len(gs), dtype=np.int8),
        optimizer=Adam(gs, _adam_lrs(sched.lr, gs.sh_degree, sched.lr["position"])),
        grad_accum=np.zeros(len(gs)),
        rng=np.random.default_rng([config.seed, t]),
    )
    report = FrameReport(frame=t)
    n_views = len(cams)
    per = len(_views_for(1, n_views, sched.views_per_iter))
    guard = DivergenceGuard(sched.divergence_window, max(1, n_views // per), label=f"frame {t}: ")
    for it in range(1, sched.track_iters + 1):
        gs = work.gaussians
        work.optimizer.lrs["positions"] = _position_lr(sched.lr, it, sched.track_iters)
        views = _views_for(it, n_views, sched.views_per_iter)
        Ec, g = photometric(gs, cams, images, views, w.lambda_dssim)
        Es, gp, gq = arap_terms(work.prev_positions, work.prev_rotations, gs.positions, gs.rotations, work.graph)
        if it == 1:
            report.smooth_first = Es
        new = work.is_new
        if new.any():
            work.grad_accum += np.where(new, _grad_norm_of(g), 0.0)
            work.grad_count += 1
        g.positions += w.lambda_smooth * gp
        g.rotations += w.lambda_smooth * gq
        ones = np.ones(len(gs), dtype=bool)
        trainable = {"positions": ones, "rotations": ones, "opacity_logits": ones,
                     "log_scales": new, "sh": new}
        work.optimizer.step(gs, g, trainable)
        guard.push(it, Ec)
        report.color_loss = Ec
        if log is not None and (it % sched.log_every == 0 or it == sched.track_iters):
            log.write({"frame": t, "iter": it, "color": Ec, "smooth": Es, "n": len(gs)})

        if it == sched.candidate_insert_iter:
            proposed, c1, c2 = select_candidates(seq, t, work.gaussians, config)
            report.proposed, report.after_w1, report.after_w2 = len(proposed), len(c1), len(c2)
            report.out_of_bounds = c2.out_of_bounds
            report.inserted_positions = c2.gaussians.positions.copy()
            report.inserted = insert_candidates(work, c2)
            if log is not None:
                log.write({"frame": t, "iter": it, "event": "insert", "proposed": len(proposed),
                           "after_w1": len(c1), "after_w2": len(c2), "out_of_bounds": c2.out_of_bounds})
        elif it > sched.candidate_insert_iter and (it - sched.candidate_insert_iter) % sched.maintenance_period == 0:
            info = densify_prune_update(work, config)
            report.densified += info["densified"]
            report.pruned += info["pruned"]
            report.pruned_new += info["pruned_new"]
            if log is not None:
                log.write({"frame": t, "iter": it, "event": "maintenance", **info})

    gs = work.gaussians
    report.smooth_last = arap_terms(work.prev_positions, work.prev_rotations, gs.positions, gs.rotations,
                                    work.graph)[0]
    for row in np.flatnonzero(work.is_new):
        work.glut.add(gs.global_ids[row], t, gs.positions[row], ORIGINS[int(work.origin[row])])
    report.born = int(work.is_new.sum())
    if len(gs) < config.k + 1:
        raise InvalidInputError(f"frame {t}: only {len(gs)} Gaussians left, cannot rebuild the graph")
    graph = knn_build(gs.positions, config.k, radius_factor=config.radius_factor)
    report.alive = len(gs)
    if log is not None:
        log.write({"frame": t, "event": "frame_end", **report.to_dict()})
    return MotionState(gs, graph, work.glut, t), report


# ---------------------------------------------------------------------------
# checkpoints and logs

class JsonLog:
    """Append-only JSON-lines log; also keeps records in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict):
        rec = {k: (v.item() if isinstance(v, np.generic) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def save_state(directory, state: MotionState) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_gaussians(d / "gaussians.tgs", state.gaussians)
    write_graph(d / "graph.tdg", state.graph)
    write_glut(d / "glut.tgl", state.glut)
    (d / "frame.txt").write_text(f"{state.frame}\n")


def load_state(directory) -> MotionState:
    d = Path(directory)
    for name in ("gaussians.tgs", "graph.tdg", "glut.tgl", "frame.txt"):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing checkpoint file {d / name}")
    return MotionState(read_gaussians(d / "gaussians.tgs"), read_graph(d / "graph.tdg"),
                       read_glut(d / "glut.tgl"), int((d / "frame.txt").read_text()))


def track_sequence(seq, config: RegistrationConfig, out_dir=None, frames: int | None = None,
                   log=None, progress=None):
    """Init on frame 1 and track through `frames` (default all). Returns (states, reports)."""
    T = seq.n_frames if frames is None else min(frames, seq.n_frames)
    state = init_first_frame(seq, config, log)
    states, reports = [state], []
    if out_dir is not None:
        save_state(Path(out_dir) / "frame_0001", state)
    for t in range(2, T + 1):
        state, rep = track_frame(state, t, seq, config, log)
        states.append(state)
        reports.append(rep)
        if out_dir is not None:
            save_state(Path(out_dir) / f"frame_{t:04d}", state)
        if progress:
            progress(t, rep)
    return states, reports


# ---------------------------------------------------------------------------
# evaluation against ground truth identities

def associate_identities(state_at_birth: dict, glut: Glut, seq) -> dict:
    """Map each motion id to the nearest ground-truth identity at its birth frame.

    state_at_birth: frame -> GaussianSet solved at that frame.
    """
    out = {}
    by_birth = {}
    for gid, e in glut.entries.items():
        by_birth.setdefault(e.birth, []).append(gid)
    for t, gids in by_birth.items():
        gt = seq.frame(t)
        tree = cKDTree(gt.positions)
        gs = state_at_birth[t]
        pos = gs.positions[gs.index_of(gids)]
        _, idx = tree.query(pos)
        for gid, i in zip(gids, np.atleast_1d(idx)):
            out[int(gid)] = int(gt.global_ids[i])
    return out


def position_error(gs: GaussianSet, assoc: dict, seq, t: int) -> float:
    """Mean distance between motion Gaussians and their associated identities at frame t."""
    gt = seq.frame(t)
    ids = np.array([assoc[int(g)] for g in gs.global_ids], dtype=np.int64)
    ok = gt.contains(ids)
    if not ok.any():
        return 0.0
    d = np.linalg.norm(gs.positions[ok] - gt.positions[gt.index_of(ids[ok])], axis=1)
    return float(d.mean())
