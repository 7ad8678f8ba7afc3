"""Synthetic multi-view sequences with scripted topology events.

The oracles here stand in for a dense matcher and a temporal tracker:
they read ground-truth identities straight out of the splatter's
surface-id buffer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, ConfigError, GaussianSet, axis_angle_quat, logit, \
    read_cameras, read_gaussians, rgb_to_sh0, write_cameras, write_gaussians
from .splat import RenderedFrame, splat

TEMPLATES = ("sheet", "two_link", "sphere_cap", "sphere", "occluder")


@dataclass
class TopologyEvent:
    frame: int
    kind: str  # "appear" | "disappear"
    region: list  # identity ids (resolved)

    def to_dict(self):
        return {"frame": self.frame, "kind": self.kind, "region": [int(i) for i in self.region]}


@dataclass
class SceneConfig:
    template: str = "sheet"
    frames: int = 20
    views: int = 8
    resolution: tuple = (128, 128)
    events: list = field(default_factory=list)
    seed: int = 0
    jitter_px: float = 0.0
    mask_flip: float = 0.0
    motion: dict = field(default_factory=dict)
    grid: int = 0  # 0 -> template default
    fov_deg: float = 45.0
    camera_distance: float = 2.8

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        noise = d.pop("noise", {}) or {}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        bad_noise = set(noise) - {"jitter_px", "mask_flip"}
        if bad_noise:
            raise ConfigError(f"unknown noise keys: {sorted(bad_noise)}")
        cfg = cls(**d, **noise)
        res = cfg.resolution
        if isinstance(res, (int, np.integer)):
            res = (int(res), int(res))
        cfg.resolution = (int(res[0]), int(res[1]))
        if cfg.template not in TEMPLATES:
            raise ConfigError(f"unknown template {cfg.template!r}; choose from {TEMPLATES}")
        if cfg.frames < 1 or cfg.views < 2:
            raise ConfigError("need frames >= 1 and views >= 2")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["noise"] = {"jitter_px": d.pop("jitter_px"), "mask_flip": d.pop("mask_flip")}
        return d


# ---------------------------------------------------------------------------
# templates: each returns rest positions, colors, scales, groups, optional groups
# and a motion function (frame index from 0, rest positions) -> (positions, rotation quats)

def _texture(rng, n, base, spread=0.25):
    c = np.asarray(base) + rng.uniform(-spread, spread, (n, 3))
    return np.clip(c, 0.03, 0.97)


def _grid(n, size, center=(0.0, 0.0)):
    xs = np.linspace(-size / 2, size / 2, n)
    X, Y = np.meshgrid(xs + center[0], xs + center[1])
    return np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)


def _sheet_motion(m):
    amp = m.get("wave_amplitude", 0.06)
    wl = m.get("wave_length", 1.2)
    speed = m.get("wave_speed", 0.25)
    trans = np.asarray(m.get("translate", [0.0, 0.0, 0.0]), dtype=np.float64)
    rot = np.radians(m.get("rotate_deg", 0.0))

    def motion(t, rest):
        p = rest.copy()
        p[:, 2] += amp * np.sin(2 * np.pi * rest[:, 0] / wl + speed * t) * (rest[:, 1] + 1.2) / 2.0
        q = np.tile(axis_angle_quat([0, 1, 0], rot * t), (len(p), 1))
        c, s = np.cos(rot * t), np.sin(rot * t)
        Ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        return p @ Ry.T + trans * t, q

    return motion


def _build_sheet(cfg, rng):
    n = cfg.grid or 64
    size = 1.6
    rest = _grid(n, size)
    colors = _texture(rng, len(rest), (0.15, 0.35, 0.75))
    spacing = size / (n - 1)
    pn = max(4, int(round(0.4 / spacing)))
    patch = _grid(pn, 0.4, center=(0.25, -0.25))
    patch[:, 2] = -0.06
    patch_colors = _texture(rng, len(patch), (0.9, 0.85, 0.15), 0.1)
    ids = np.arange(len(rest) + len(patch))
    hole = np.flatnonzero((rest[:, 0] > -0.8) & (rest[:, 0] < -0.1) & (rest[:, 1] > -0.1) & (rest[:, 1] < 0.8))
    groups = {"sheet": ids[:len(rest)], "patch": ids[len(rest):], "hole": hole}
    return (np.vstack([rest, patch]), np.vstack([colors, patch_colors]),
            np.full(len(ids), 0.6 * spacing), groups, {"patch"}, _sheet_motion(cfg.motion))


def _build_two_link(cfg, rng):
    n = cfg.grid or 40
    w, h = 0.8, 0.5
    xs = np.linspace(0, w, n)
    ys = np.linspace(-h / 2, h / 2, max(2, int(n * h / w)))
    X, Y = np.meshgrid(xs, ys)
    link = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    a = link - [w, 0, 0]
    b = link[X.ravel() > 0] + [0.0, 0.0, -0.01]
    rest = np.vstack([a, b])
    colors = np.vstack([_texture(rng, len(a), (0.8, 0.3, 0.2)), _texture(rng, len(b), (0.2, 0.7, 0.3))])
    ids = np.arange(len(rest))
    groups = {"link1": ids[:len(a)], "link2": ids[len(a):]}
    m = cfg.motion
    max_angle = np.radians(m.get("hinge_deg", 30.0))
    per_frame = np.radians(m.get("hinge_deg_per_frame", 2.0))
    trans = np.asarray(m.get("translate", [0.0, 0.0, 0.0]), dtype=np.float64)
    n_a = len(a)

    def motion(t, r):
        ang = min(max_angle, per_frame * t)
        c, s = np.cos(ang), np.sin(ang)
        Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        p = r.copy()
        p[n_a:] = r[n_a:] @ Rz.T
        q = np.tile([1.0, 0, 0, 0], (len(r), 1))
        q[n_a:] = axis_angle_quat([0, 0, 1], ang)
        return p + trans * t, q

    spacing = w / (n - 1)
    return rest, colors, np.full(len(rest), 0.6 * spacing), groups, set(), motion


def _fibonacci_sphere(n, r):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return r * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _build_sphere(cfg, rng, with_cap=True):
    n = cfg.grid or 3000
    r = 0.6
    shell = _fibonacci_sphere(n, r)
    core_n = max(50, n // 3)
    core = _fibonacci_sphere(core_n, 0.35)
    rest = np.vstack([shell, core])
    colors = np.vstack([_texture(rng, n, (0.7, 0.7, 0.75)), _texture(rng, core_n, (0.95, 0.2, 0.2), 0.05)])
    ids = np.arange(len(rest))
    cap = ids[:n][shell[:, 2] < -0.35]
    groups = {"shell": ids[:n], "cap": cap, "core": ids[n:]}
    spacing = r * np.sqrt(4 * np.pi / n)
    m = cfg.motion
    detach = int(m.get("cap_detach_frame", 0))
    speed = float(m.get("cap_speed", 0.03 if with_cap else 0.0))
    cap_mask = np.zeros(len(rest), bool)
    cap_mask[cap] = True

    def motion(t, rp):
        p = rp.copy()
        if with_cap and detach and t + 1 >= detach:
            p[cap_mask] += np.array([0.8, 0.0, -0.6]) * speed * (t + 2 - detach)
        return p, np.tile([1.0, 0, 0, 0], (len(rp), 1))

    return rest, colors, np.full(len(rest), 0.6 * spacing), groups, {"core"}, motion


def _build_occluder(cfg, rng):
    n = cfg.grid or 56
    size = 1.6
    bg = _grid(n, size)
    bg[:, 2] = 0.3
    spacing = size / (n - 1)
    fn = max(4, int(round(0.5 / spacing)))
    fg = _grid(fn, 0.5, center=(-0.3, 0.0))
    fg[:, 2] = -0.3
    rest = np.vstack([bg, fg])
    colors = np.vstack([_texture(rng, len(bg), (0.3, 0.6, 0.4)), _texture(rng, len(fg), (0.8, 0.5, 0.2))])
    ids = np.arange(len(rest))
    groups = {"background": ids[:len(bg)], "foreground": ids[len(bg):]}
    speed = float(cfg.motion.get("occluder_speed", 0.03))
    fg_mask = np.zeros(len(rest), bool)
    fg_mask[len(bg):] = True

    def motion(t, rp):
        p = rp.copy()
        p[fg_mask, 0] += speed * t
        return p, np.tile([1.0, 0, 0, 0], (len(rp), 1))

    return rest, colors, np.full(len(rest), 0.6 * spacing), groups, set(), motion


def _template(cfg, rng):
    if cfg.template == "sheet":
        return _build_sheet(cfg, rng)
    if cfg.template == "two_link":
        return _build_two_link(cfg, rng)
    if cfg.template == "sphere_cap":
        return _build_sphere(cfg, rng, True)
    if cfg.template == "sphere":
        return _build_sphere(cfg, rng, False)
    return _build_occluder(cfg, rng)


def make_cameras(n_views: int, resolution, distance: float = 2.8, fov_deg: float = 45.0):
    """Cameras on a frontal arc (azimuth within +-35 deg, alternating elevation)."""
    w, h = resolution
    az = np.radians(np.linspace(-35, 35, n_views))
    el = np.radians(np.where(np.arange(n_views) % 2 == 0, 10.0, -10.0))
    cams = []
    for a, e in zip(az, el):
        eye = distance * np.array([np.sin(a) * np.cos(e), np.sin(e), -np.cos(a) * np.cos(e)])
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 1, 0], fov_deg, w, h))
    return cams


# ---------------------------------------------------------------------------

@dataclass
class SyntheticSequence:
    frames: list  # ground-truth GaussianSet per frame (index 0 is frame 1)
    cameras: list
    events: list
    seed: int
    config: SceneConfig | None = None
    groups: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> GaussianSet:
        """Ground truth at 1-based frame t."""
        return self.frames[t - 1]

    def render(self, t: int, view: int) -> RenderedFrame:
        key = (t, view)
        if key not in self._cache:
            self._cache[key] = splat(self.frame(t), self.cameras[view])
        return self._cache[key]

    def image(self, t: int, view: int) -> np.ndarray:
        return self.render(t, view).color

    def bbox(self):
        allp = np.vstack([f.positions for f in self.frames if len(f)])
        return allp.min(axis=0), allp.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    @property
    def noise(self):
        cfg = self.config or SceneConfig()
        return cfg.jitter_px, cfg.mask_flip


def _resolve_region(region, groups, n_ids):
    if isinstance(region, str):
        if region not in groups:
            raise ConfigError(f"event references unknown region {region!r}")
        return np.asarray(groups[region], dtype=np.int64)
    ids = np.asarray(region, dtype=np.int64)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= n_ids:
        raise ConfigError("event references nonexistent identities")
    return ids


def _f32(gs: GaussianSet) -> GaussianSet:
    # match the on-disk float32 precision so saved and in-memory sequences agree
    r = lambda a: a.astype(np.float32).astype(np.float64)
    return GaussianSet(r(gs.positions), r(gs.rotations), r(gs.log_scales), r(gs.opacity_logits),
                       r(gs.sh), gs.global_ids)


def generate(config) -> SyntheticSequence:
    cfg = config if isinstance(config, SceneConfig) else SceneConfig.from_dict(config)
    rng = np.random.default_rng(cfg.seed)
    rest, colors, scale, groups, optional, motion = _template(cfg, rng)
    n_ids = len(rest)
    T = cfg.frames
    alive = np.ones((T, n_ids), dtype=bool)
    events = []
    referenced = set()
    for ev in sorted(cfg.events, key=lambda e: int(e["frame"])):
        kind = ev.get("kind")
        frame = int(ev.get("frame", 0))
        if kind not in ("appear", "disappear"):
            raise ConfigError(f"event kind must be appear|disappear, got {kind!r}")
        if not 1 <= frame <= T:
            raise ConfigError(f"event frame {frame} outside 1..{T}")
        region = ev.get("region")
        if isinstance(region, str):
            referenced.add(region)
        ids = _resolve_region(region, groups, n_ids)
        if kind == "appear":
            if frame == 1:
                raise ConfigError("appear events must be after frame 1")
            if np.any(~alive[frame - 1:, ids]):
                raise ConfigError("appear event overlaps a disappearance (no reactivation)")
            alive[:frame - 1, ids] = False
        else:
            alive[frame - 1:, ids] = False
        events.append(TopologyEvent(frame, kind, [int(i) for i in ids]))
    for name in optional - referenced:
        alive[:, groups[name]] = False

    sh = np.zeros((n_ids, 16, 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
    op = np.full(n_ids, float(logit(0.95)))
    frames = []
    prev = None
    diag_est = np.linalg.norm(rest.max(0) - rest.min(0))
    for t in range(T):
        pos, quat = motion(t, rest)
        if prev is not None:
            step = np.linalg.norm(pos - prev, axis=1).max()
            if step >= 0.02 * diag_est:
                raise ConfigError(f"motion too fast: per-frame displacement {step:.4f} exceeds 2% of bbox diagonal")
        prev = pos
        sel = np.flatnonzero(alive[t])
        gs = GaussianSet(pos[sel], quat[sel], log_scales[sel], op[sel], sh[sel], sel)
        frames.append(_f32(gs))
    cams = make_cameras(cfg.views, cfg.resolution, cfg.camera_distance, cfg.fov_deg)
    seq = SyntheticSequence(frames, cams, events, cfg.seed, cfg, {k: np.asarray(v) for k, v in groups.items()})
    return seq


# ---------------------------------------------------------------------------
# oracles

@dataclass
class Correspondences:
    pairs: np.ndarray  # (M, 2, 2): [:, 0] pixel in view A, [:, 1] pixel in view B
    views: tuple
    identities: np.ndarray  # ground-truth id behind each pair (diagnostics only)


@dataclass
class TemporalWarp:
    warp: np.ndarray  # (H, W, 2) pixel (x, y) in frame t-1
    mask: np.ndarray  # (H, W) uint8, 1 = has correspondence


def _pixel_rng(seq, *key):
    return np.random.default_rng([int(seq.seed), *[int(k) for k in key]])


def oracle_spatial_match(seq: SyntheticSequence, frame: int, view_pair, density: float,
                         jitter_px: float | None = None) -> Correspondences:
    a, b = view_pair
    ra, rb = seq.render(frame, a), seq.render(frame, b)
    gt = seq.frame(frame)
    visible_b = np.unique(rb.surface_id[rb.surface_id >= 0])
    ida = ra.surface_id
    eligible = np.flatnonzero((ida.ravel() >= 0) & np.isin(ida.ravel(), visible_b))
    n = int(round(density * len(eligible)))
    rng = _pixel_rng(seq, 1, frame, a, b)
    if n == 0:
        return Correspondences(np.zeros((0, 2, 2)), (a, b), np.zeros(0, dtype=np.int64))
    pick = np.sort(rng.choice(eligible, size=min(n, len(eligible)), replace=False))
    ids = ida.ravel()[pick]
    pts = gt.positions[gt.index_of(ids)]
    pa, _ = seq.cameras[a].project_points(pts)
    pb, _ = seq.cameras[b].project_points(pts)
    pairs = np.stack([pa, pb], axis=1)
    sigma = seq.noise[0] if jitter_px is None else jitter_px
    if sigma > 0:
        pairs = pairs + rng.normal(0.0, sigma, pairs.shape)
    return Correspondences(pairs, (a, b), ids)


def oracle_temporal_track(seq: SyntheticSequence, frame: int, view: int,
                          mask_flip: float | None = None) -> TemporalWarp:
    if frame < 2:
        raise ValueError("temporal tracking needs frame >= 2")
    cam = seq.cameras[view]
    H, W = cam.height, cam.width
    cur = seq.render(frame, view).surface_id
    prv = seq.render(frame - 1, view).surface_id
    ys, xs = np.mgrid[0:H, 0:W]
    warp = np.stack([xs, ys], axis=-1).astype(np.float64)
    mask = np.zeros((H, W), dtype=np.uint8)

    bg = cur < 0
    mask[bg & (prv < 0)] = 1

    visible_prev = np.unique(prv[prv >= 0])
    fg = ~bg & np.isin(cur, visible_prev)
    if fg.any():
        g_now, g_prev = seq.frame(frame), seq.frame(frame - 1)
        ids = cur[fg]
        p_now, _ = cam.project_points(g_now.positions[g_now.index_of(ids)])
        p_prev, _ = cam.project_points(g_prev.positions[g_prev.index_of(ids)])
        target = np.stack([xs[fg], ys[fg]], axis=1) + (p_prev - p_now)
        ti = np.clip(np.rint(target).astype(np.int64), [0, 0], [W - 1, H - 1])
        ok = prv[ti[:, 1], ti[:, 0]] == ids
        # fall back to the nearest t-1 pixel of the same identity
        bad = np.flatnonzero(~ok)
        if len(bad):
            flat = prv.ravel()
            order = np.argsort(flat, kind="stable")
            sorted_ids = flat[order]
            for j in bad:
                lo, hi = np.searchsorted(sorted_ids, [ids[j], ids[j] + 1])
                cand = order[lo:hi]
                cx, cy = cand % W, cand // W
                d2 = (cx - target[j, 0]) ** 2 + (cy - target[j, 1]) ** 2
                k = int(np.argmin(d2))
                target[j] = (cx[k], cy[k])
        warp[fg] = target
        mask[fg] = 1

    flip = seq.noise[1] if mask_flip is None else mask_flip
    if flip > 0:
        rng = _pixel_rng(seq, 2, frame, view)
        mask ^= (rng.random((H, W)) < flip).astype(np.uint8)
    return TemporalWarp(warp, mask)


# ---------------------------------------------------------------------------
# persistence

def save_sequence(seq: SyntheticSequence, directory) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for t, gs in enumerate(seq.frames, start=1):
        write_gaussians(d / "frames" / f"frame_{t:04d}.tgs", gs)
    write_cameras(d / "cameras.bin", seq.cameras)
    manifest = {
        "seed": int(seq.seed),
        "frames": seq.n_frames,
        "events": [e.to_dict() for e in seq.events],
        "groups": {k: [int(i) for i in v] for k, v in seq.groups.items()},
        "config": seq.config.to_dict() if seq.config else None,
    }
    (d / "events.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_sequence(directory) -> SyntheticSequence:
    d = Path(directory)
    manifest = json.loads((d / "events.json").read_text())
    frames = [read_gaussians(d / "frames" / f"frame_{t:04d}.tgs") for t in range(1, manifest["frames"] + 1)]
    cams = read_cameras(d / "cameras.bin")
    events = [TopologyEvent(**e) for e in manifest["events"]]
    cfg = SceneConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    groups = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["groups"].items()}
    return SyntheticSequence(frames, cams, events, manifest["seed"], cfg, groups)
