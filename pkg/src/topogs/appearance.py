"""Appearance Gaussians anchored to motion Gaussians.

Each motion Gaussian spawns K appearance Gaussians, one per outgoing graph
edge. They live exactly as long as their anchor, follow it rigidly, and are
fine-tuned per frame for texture detail.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (ConfigError, DeformGraph, FormatError, GaussianSet, InvalidInputError, logit, quat_conj,
                   quat_mul, quat_normalize, sigmoid, rotmat_normalized, read_gaussians, write_gaussians)
from .energy import anchor_rigidity, temporal_attr_reg
from .optim import Adam
from .registration import DivergenceGuard, Glut, _views_for, photometric

K_SLOTS = 9
BETA = 0.5

APPEARANCE_LR = {
    "position": 2e-4,
    "rotation": 1e-3,
    "scale": 5e-3,
    "opacity": 5e-2,
    "sh": 5e-3,
}


@dataclass
class AnchorLinks:
    """Struct-of-arrays link table, sorted by appearance id."""
    appearance_ids: np.ndarray
    anchor_ids: np.ndarray
    slots: np.ndarray
    offsets: np.ndarray  # (N, 3) in the anchor's local frame at creation
    rotations: np.ndarray  # (N, 4) rotation relative to the anchor at creation

    @classmethod
    def empty(cls) -> "AnchorLinks":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros((0, 3)), np.zeros((0, 4)))

    def __len__(self):
        return len(self.appearance_ids)

    def extend(self, other: "AnchorLinks") -> "AnchorLinks":
        cat = lambda a, b: np.concatenate([a, b])
        out = AnchorLinks(cat(self.appearance_ids, other.appearance_ids), cat(self.anchor_ids, other.anchor_ids),
                          cat(self.slots, other.slots), cat(self.offsets, other.offsets),
                          cat(self.rotations, other.rotations))
        order = np.argsort(out.appearance_ids, kind="stable")
        if np.any(np.diff(out.appearance_ids[order]) == 0):
            raise InvalidInputError("duplicate appearance ids in link table")
        return out.take(order)

    def take(self, index) -> "AnchorLinks":
        return AnchorLinks(self.appearance_ids[index], self.anchor_ids[index], self.slots[index],
                           self.offsets[index], self.rotations[index])

    def __eq__(self, other):
        return isinstance(other, AnchorLinks) and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("appearance_ids", "anchor_ids", "slots", "offsets", "rotations"))


def appearance_id(anchor_id, slot, k: int = K_SLOTS):
    return np.asarray(anchor_id, dtype=np.int64) * k + np.asarray(slot, dtype=np.int64)


def sample_u(seed: int, anchor_id: int, slot: int) -> float:
    """Edge fraction in [1/3, 1/2], reproducible per (seed, anchor, slot)."""
    return float(np.random.default_rng([int(seed), int(anchor_id), int(slot)]).uniform(1 / 3, 1 / 2))


def derive(anchors: GaussianSet, graph: DeformGraph, rows=None, seed: int = 0, k: int = K_SLOTS,
           beta: float = BETA, u=None):
    """Spawn k appearance Gaussians per anchor row, one along each outgoing edge.

    rows: anchor rows to derive (default all). u: optional fixed edge fraction
    (overrides the sampler; used for tests).
    Returns (appearance GaussianSet, AnchorLinks).
    """
    rows = np.arange(len(anchors)) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        return GaussianSet.empty(anchors.sh_degree), AnchorLinks.empty()
    n = len(rows) * k
    pos = np.zeros((n, 3))
    scale = np.zeros(n)
    anchor_row = np.repeat(rows, k)
    slots = np.tile(np.arange(k), len(rows))
    for i, r in enumerate(rows):
        nb = graph.neighbors[r]
        nb = nb[nb >= 0]
        if len(nb) == 0:
            raise InvalidInputError(f"anchor {int(anchors.global_ids[r])} has no graph edges")
        gid = int(anchors.global_ids[r])
        for s in range(k):
            uu = sample_u(seed, gid, s) if u is None else float(u)
            step = uu * (anchors.positions[nb[s % len(nb)]] - anchors.positions[r])
            pos[i * k + s] = anchors.positions[r] + step
            scale[i * k + s] = beta * np.linalg.norm(step)
    scale = np.maximum(scale, 1e-6)
    rot = anchors.rotations[anchor_row].copy()
    app = GaussianSet(pos, rot, np.repeat(np.log(scale)[:, None], 3, axis=1),
                      anchors.opacity_logits[anchor_row].copy(), anchors.sh[anchor_row].copy(),
                      appearance_id(anchors.global_ids[anchor_row], slots, k))
    Rq = rotmat_normalized(anchors.rotations[anchor_row])
    local = np.einsum("nji,nj->ni", Rq, pos - anchors.positions[anchor_row])
    local_rot = quat_mul(quat_conj(quat_normalize(anchors.rotations[anchor_row])), rot)
    links = AnchorLinks(app.global_ids.copy(), anchors.global_ids[anchor_row].copy(), slots, local, local_rot)
    return app, links


def warp_positions(anchors: GaussianSet, links: AnchorLinks):
    """World positions and rotations of linked appearance Gaussians for the given anchor state."""
    if not np.all(anchors.contains(links.anchor_ids)):
        raise InvalidInputError("link references an anchor that is not in the motion state")
    rows = anchors.index_of(links.anchor_ids)
    R = rotmat_normalized(anchors.rotations[rows])
    pos = anchors.positions[rows] + np.einsum("nij,nj->ni", R, links.offsets)
    rot = quat_normalize(quat_mul(anchors.rotations[rows], links.rotations))
    return pos, rot


def activate_and_warp(t: int, motion: GaussianSet, glut: Glut, links: AnchorLinks,
                      attributes: GaussianSet) -> GaussianSet:
    """Active appearance set at frame t.

    attributes holds the latest non-positional values of every derived
    appearance Gaussian (its positions/rotations are ignored).
    """
    unknown = [a for a in np.unique(links.anchor_ids) if a not in glut]
    if unknown:
        raise InvalidInputError(f"link to unknown anchor id {int(unknown[0])}")
    alive = np.array([glut[a].alive(t) for a in links.anchor_ids], dtype=bool)
    act = links.take(alive)
    pos, rot = warp_positions(motion, act)
    rows = attributes.index_of(act.appearance_ids)
    return GaussianSet(pos, rot, attributes.log_scales[rows].copy(), attributes.opacity_logits[rows].copy(),
                       attributes.sh[rows].copy(), act.appearance_ids.copy())


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class AppearanceConfig:
    k: int = K_SLOTS
    beta: float = BETA
    iters: int = 6000
    warmup_iters: int | None = None  # used at frames whose active set changed (None -> iters)
    lambda_smooth: float = 0.0002
    lambda_temporal: float = 0.01
    lambda_dssim: float = 0.2
    views_per_iter: int = 0
    divergence_window: int = 500
    seed: int = 0
    carry_pose: bool = True  # fold optimized pose back into the link offsets after each frame
    carry_optimizer: bool = True  # keep Adam moments per Gaussian across frames
    follow_anchor_opacity: bool = True  # scale opacity by the anchor's frame-to-frame opacity ratio
    lr: dict = field(default_factory=lambda: dict(APPEARANCE_LR))

    def __post_init__(self):
        if self.k < 1 or self.iters < 1 or (self.warmup_iters is not None and self.warmup_iters < 1):
            raise ConfigError("appearance k and iters must be >= 1")
        if not self.beta > 0:
            raise ConfigError("appearance beta must be positive")
        lr = dict(APPEARANCE_LR)
        unknown = set(self.lr) - set(lr)
        if unknown:
            raise ConfigError(f"unknown appearance learning-rate keys {sorted(unknown)}")
        lr.update(self.lr)
        self.lr = lr


def _lrs(lr, sh_degree):
    bands = (sh_degree + 1) ** 2
    sh = np.full((bands, 1), lr["sh"] / 20.0)
    sh[0] = lr["sh"]
    return {"positions": lr["position"], "rotations": lr["rotation"], "log_scales": lr["scale"],
            "opacity_logits": lr["opacity"], "sh": sh}


def finetune_frame(active: GaussianSet, anchors: GaussianSet, anchors_prev: GaussianSet,
                   app_prev_positions, prev_attrs: GaussianSet, cameras, images, config: AppearanceConfig,
                   temporal_rows=None, iters: int | None = None, label: str = "", optimizer: Adam | None = None):
    """Optimize every attribute of the active set; anchors stay frozen.

    anchors_prev / app_prev_positions define the rigidity reference (the t-1
    state, or the current warp on first activation). prev_attrs is the
    temporal-regularizer reference, row-aligned with `active`; the term only
    covers `temporal_rows` (default all), i.e. Gaussians that had a previous frame.
    optimizer: row-aligned Adam state to continue from (updated in place).
    Returns (optimized set, info dict).
    """
    gs = active.copy()
    if len(gs) == 0:
        return gs, {"color": 0.0, "rigidity": 0.0, "temporal": 0.0}
    rows = anchors.index_of(gs.global_ids // config.k)
    a_pos, a_rot = anchors.positions, anchors.rotations
    ap_pos, ap_rot = anchors_prev.positions, anchors_prev.rotations
    if len(anchors_prev) != len(anchors) or np.any(anchors_prev.global_ids != anchors.global_ids):
        raise InvalidInputError("anchor states are not aligned")
    app_prev_positions = np.asarray(app_prev_positions, dtype=np.float64)
    trows = np.ones(len(gs), bool) if temporal_rows is None else np.asarray(temporal_rows, dtype=bool)
    prev_sub = prev_attrs.subset(trows)
    opt = optimizer if optimizer is not None else Adam(gs, _lrs(config.lr, gs.sh_degree))
    per = len(_views_for(1, len(cameras), config.views_per_iter))
    guard = DivergenceGuard(config.divergence_window, max(1, len(cameras) // per), label=label)
    info = {}
    for it in range(1, (iters or config.iters) + 1):
        views = _views_for(it, len(cameras), config.views_per_iter)
        Ec, g = photometric(gs, cameras, images, views, config.lambda_dssim)
        Er, g_app, _, _ = anchor_rigidity(ap_pos, ap_rot, a_pos, a_rot, app_prev_positions, gs.positions, rows)
        g.positions += config.lambda_smooth * g_app
        Et = 0.0
        if trows.any():
            Et, gt = temporal_attr_reg(gs.subset(trows), prev_sub, config.lambda_temporal)
            for name, v in gt.items():
                getattr(g, name)[trows] += v
        opt.step(gs, g)
        guard.push(it, Ec)
        info = {"color": Ec, "rigidity": Er, "temporal": Et}
    return gs, info


@dataclass
class AppearanceResult:
    links: AnchorLinks  # offsets after the last frame each Gaussian was active
    creation_links: AnchorLinks  # offsets at derivation
    frames: list  # optimized active GaussianSet per frame (index 0 = frame 1)
    info: list


def run_appearance(seq, motion_states, config: AppearanceConfig, glut: Glut | None = None,
                   out_dir=None, log=None, progress=None) -> AppearanceResult:
    """Derive, activate, warp and fine-tune appearance Gaussians over all tracked frames.

    motion_states: MotionState per frame (index 0 = frame 1). glut defaults to
    the last state's table (complete lifespans).
    """
    glut = glut or motion_states[-1].glut
    cams = seq.cameras
    links = AnchorLinks.empty()
    creation = AnchorLinks.empty()
    attrs = None
    adam = None
    frames, infos = [], []
    prev_active = None
    prev_motion = None
    for idx, st in enumerate(motion_states):
        t = st.frame
        motion = st.gaussians
        alive = glut.alive_ids(t)
        if not np.array_equal(alive, motion.global_ids):
            raise InvalidInputError(f"frame {t}: motion state and lifespan table disagree")
        births = np.array([glut[g].birth for g in motion.global_ids])
        newborn = np.flatnonzero(births == t)
        app_new, links_new = derive(motion, st.graph, newborn, config.seed, config.k, config.beta)
        if len(links_new):
            links = links.extend(links_new)
            creation = creation.extend(links_new)
            attrs = app_new if attrs is None else GaussianSet.concat([attrs, app_new])
            if adam is None:
                adam = Adam(app_new, _lrs(config.lr, app_new.sh_degree))
            else:
                adam.append(len(app_new), app_new)
        if config.follow_anchor_opacity and prev_motion is not None:
            _follow_opacity(attrs, links, prev_motion, motion)
        active = activate_and_warp(t, motion, glut, links, attrs)

        # rigidity and temporal references
        anchors_prev = motion.copy()
        app_prev = active.positions.copy()
        prev_attrs = active.copy()
        had_prev = np.zeros(len(active), dtype=bool)
        if prev_active is not None:
            old = prev_motion.contains(motion.global_ids)
            rows_old = prev_motion.index_of(motion.global_ids[old])
            anchors_prev.positions[old] = prev_motion.positions[rows_old]
            anchors_prev.rotations[old] = prev_motion.rotations[rows_old]
            was = prev_active.contains(active.global_ids)
            r = prev_active.index_of(active.global_ids[was])
            app_prev[was] = prev_active.positions[r]
            had_prev = was
        images = [seq.image(t, v) for v in range(len(cams))]
        iters = config.iters
        changed = not had_prev.all() or (prev_active is not None and len(prev_active) != int(had_prev.sum()))
        if config.warmup_iters and changed:
            iters = config.warmup_iters
        rows = attrs.index_of(active.global_ids)
        sub = adam.take(rows) if config.carry_optimizer else None
        opt, info = finetune_frame(active, motion, anchors_prev, app_prev, prev_attrs, cams, images, config,
                                   temporal_rows=had_prev, iters=iters, label=f"appearance frame {t}: ",
                                   optimizer=sub)
        if sub is not None:
            adam.put(rows, sub)
        attrs.log_scales[rows] = opt.log_scales
        attrs.opacity_logits[rows] = opt.opacity_logits
        attrs.sh[rows] = opt.sh
        if config.carry_pose:
            links = _fold_pose(links, motion, opt, active)
        frames.append(opt)
        infos.append({"frame": t, "active": len(opt), "iters": iters, **info})
        if log is not None:
            log.write(infos[-1])
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_gaussians(d / f"frame_{t:04d}.tgs", opt)
        if progress:
            progress(t, infos[-1])
        prev_active, prev_motion = opt, motion
    if out_dir is not None:
        write_links(Path(out_dir) / "links.tal", links)
        write_links(Path(out_dir) / "links_creation.tal", creation)
    return AppearanceResult(links, creation, frames, infos)


def _follow_opacity(attrs: GaussianSet, links: AnchorLinks, prev_motion: GaussianSet, motion: GaussianSet):
    """In place: a_j <- a_j * a_anchor(t) / a_anchor(t-1) in activated opacity.

    Lets appearance Gaussians fade with an anchor the tracker is fading out
    (for example just before a disappearance is pruned).
    """
    both = prev_motion.contains(links.anchor_ids) & motion.contains(links.anchor_ids)
    if not both.any():
        return
    aid = links.anchor_ids[both]
    ratio = motion.opacities[motion.index_of(aid)] / prev_motion.opacities[prev_motion.index_of(aid)]
    rows = attrs.index_of(links.appearance_ids[both])
    keep = ratio != 1.0  # logit(sigmoid(x)) is not bitwise x
    rows, ratio = rows[keep], ratio[keep]
    a = np.clip(sigmoid(attrs.opacity_logits[rows]) * ratio, 1e-4, 1 - 1e-4)
    attrs.opacity_logits[rows] = logit(a)


def _fold_pose(links: AnchorLinks, motion: GaussianSet, opt: GaussianSet, start: GaussianSet) -> AnchorLinks:
    """Re-express optimized positions/rotations in their anchors' frames.

    The next activation then warps the optimized Gaussians instead of the
    derivation-time ones; the warp formula itself is unchanged. Rows the
    optimizer left bit-identical to their warped start keep the stored link,
    so an unchanged pose does not pick up unwarp/warp roundoff.
    """
    out = links.take(np.arange(len(links)))
    li = np.searchsorted(links.appearance_ids, opt.global_ids)
    rows = motion.index_of(links.anchor_ids[li])
    out.offsets = out.offsets.copy()
    out.rotations = out.rotations.copy()
    mp = np.any(opt.positions != start.positions, axis=1)
    R = rotmat_normalized(motion.rotations[rows[mp]])
    out.offsets[li[mp]] = np.einsum("nji,nj->ni", R, opt.positions[mp] - motion.positions[rows[mp]])
    mr = np.any(opt.rotations != start.rotations, axis=1)
    out.rotations[li[mr]] = quat_mul(quat_conj(quat_normalize(motion.rotations[rows[mr]])),
                                     quat_normalize(opt.rotations[mr]))
    return out


# ---------------------------------------------------------------------------
# links file

_LINK_DT = np.dtype([("appearance_id", "<u4"), ("anchor_id", "<u4"), ("slot", "<u4"),
                     ("offset", "<f8", (3,)), ("rotation", "<f8", (4,))])


def write_links(path, links: AnchorLinks) -> None:
    rec = np.zeros(len(links), _LINK_DT)
    rec["appearance_id"], rec["anchor_id"], rec["slot"] = links.appearance_ids, links.anchor_ids, links.slots
    rec["offset"], rec["rotation"] = links.offsets, links.rotations
    Path(path).write_bytes(b"TAL1" + struct.pack("<I", len(links)) + rec.tobytes())


def read_links(path) -> AnchorLinks:
    data = Path(path).read_bytes()
    if data[:4] != b"TAL1":
        raise FormatError(f"{path}: bad link-file magic")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + n * _LINK_DT.itemsize:
        raise FormatError(f"{path}: truncated link file")
    rec = np.frombuffer(data, _LINK_DT, n, 8)
    return AnchorLinks(rec["appearance_id"].astype(np.int64), rec["anchor_id"].astype(np.int64),
                       rec["slot"].astype(np.int64), rec["offset"].copy(), rec["rotation"].copy())


def load_appearance_frames(directory, n_frames: int):
    d = Path(directory)
    return [read_gaussians(d / f"frame_{t:04d}.tgs") for t in range(1, n_frames + 1)]
