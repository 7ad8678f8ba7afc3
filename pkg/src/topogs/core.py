"""Domain types, camera geometry, quaternion math and KNN graphs."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

NEAR_PLANE = 1e-4
SH_C0 = 0.28209479177387814


class TopoGSError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TopoGSError, ValueError):
    pass


class ConfigError(TopoGSError, ValueError):
    pass


class FormatError(TopoGSError, ValueError):
    pass


class StageOrderError(TopoGSError):
    pass


class DivergenceError(TopoGSError, RuntimeError):
    pass


class InitializationError(TopoGSError, RuntimeError):
    pass


class BehindCameraError(TopoGSError, ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def n_sh_bands(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z) convention

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_right_matrix(b):
    """Matrix M(b) with quat_mul(a, b) == M(b) @ a."""
    b = np.asarray(b, dtype=np.float64)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _rotmat_unit(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion (or a stack of them)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise InvalidInputError(f"quaternion must have 4 components, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion has non-finite components")
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise InvalidInputError("quaternion is not unit-norm")
    return _rotmat_unit(q / n[..., None])


def rotmat_normalized(q):
    """R(q / |q|); used wherever raw optimizer quaternions are consumed."""
    return _rotmat_unit(quat_normalize(q))


def rotmat_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[n] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[n] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[n] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[n] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    out *= np.where(out[:, :1] < 0, -1.0, 1.0)
    return out.reshape(R.shape[:-2] + (4,))


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotmat_grad_to_quat(q, grad_R):
    """Pull dL/dR back to dL/dq through R(q / |q|)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = np.moveaxis(qh, -1, 0)
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    gh = np.stack([gw, gx, gy, gz], axis=-1)
    return (gh - qh * np.sum(qh * gh, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# Gaussians

@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussians, kept in ascending global_id order."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray  # (N, bands, 3)
    global_ids: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise InvalidInputError(f"sh must be (N, bands, 3), got {self.sh.shape}")
        bands = self.sh.shape[1]
        if int(round(np.sqrt(bands))) ** 2 != bands:
            raise InvalidInputError(f"sh band count {bands} is not a square")
        self.global_ids = np.asarray(self.global_ids, dtype=np.int64).reshape(n)
        if n and np.any(np.diff(self.global_ids) <= 0):
            order = np.argsort(self.global_ids, kind="stable")
            if np.any(np.diff(self.global_ids[order]) == 0):
                raise InvalidInputError("global_ids must be unique")
            for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh", "global_ids"):
                setattr(self, name, getattr(self, name)[order])

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls, sh_degree: int = 3) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, n_sh_bands(sh_degree), 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_points(cls, positions, colors, scale, global_ids, opacity: float = 0.5,
                    sh_degree: int = 3) -> "GaussianSet":
        """Isotropic, identity-rotation Gaussians with degree-0 color."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        sh = np.zeros((n, n_sh_bands(sh_degree), 3))
        sh[:, 0, :] = rgb_to_sh0(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
        log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
        return cls(positions, rot, log_scales, np.full(n, float(logit(opacity))), sh, global_ids)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
                           self.opacity_logits.copy(), self.sh.copy(), self.global_ids.copy())

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(self.positions[index], self.rotations[index], self.log_scales[index],
                           self.opacity_logits[index], self.sh[index], self.global_ids[index])

    def index_of(self, global_ids) -> np.ndarray:
        """Row index of each requested id; raises if any is missing."""
        global_ids = np.asarray(global_ids, dtype=np.int64)
        pos = np.searchsorted(self.global_ids, global_ids)
        pos = np.clip(pos, 0, max(len(self) - 1, 0))
        if len(self) == 0 or np.any(self.global_ids[pos] != global_ids):
            raise InvalidInputError("requested global id not present in set")
        return pos

    def contains(self, global_ids) -> np.ndarray:
        global_ids = np.asarray(global_ids, dtype=np.int64)
        if len(self) == 0:
            return np.zeros(global_ids.shape, dtype=bool)
        pos = np.clip(np.searchsorted(self.global_ids, global_ids), 0, len(self) - 1)
        return self.global_ids[pos] == global_ids

    @staticmethod
    def concat(sets) -> "GaussianSet":
        sets = list(sets)
        return GaussianSet(
            np.concatenate([s.positions for s in sets]),
            np.concatenate([s.rotations for s in sets]),
            np.concatenate([s.log_scales for s in sets]),
            np.concatenate([s.opacity_logits for s in sets]),
            np.concatenate([s.sh for s in sets]),
            np.concatenate([s.global_ids for s in sets]),
        )

    def renormalize(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)


_TGS_MAGIC = b"TGS1"


def write_gaussians(path, gs: GaussianSet) -> None:
    """TGS1 container: magic, u32 count, u32 sh degree, f32 blocks, u32 ids."""
    with open(path, "wb") as f:
        f.write(_TGS_MAGIC)
        f.write(struct.pack("<II", len(gs), gs.sh_degree))
        for arr in (gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, gs.sh):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(gs.global_ids, dtype="<u4").tobytes())


def read_gaussians(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if data[:4] != _TGS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    n, degree = struct.unpack_from("<II", data, 4)
    bands = n_sh_bands(degree)
    off = 12
    arrays = []
    for width in (3, 4, 3, 1, bands * 3):
        count = n * width
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        arrays.append(arr)
        off += 4 * count
    ids = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    if off + 4 * n != len(data):
        raise FormatError(f"{path}: trailing or missing bytes")
    pos, rot, ls, op, sh = arrays
    return GaussianSet(pos.reshape(n, 3), rot.reshape(n, 4), ls.reshape(n, 3), op,
                       sh.reshape(n, bands, 3), ids)


# ---------------------------------------------------------------------------
# cameras

@dataclass
class Camera:
    """Pinhole camera; extrinsics map world to camera: x_c = R x_w + t."""

    intrinsics: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        K = self.intrinsics
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1.0 \
                or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InvalidInputError("intrinsics must be upper-triangular with fx, fy > 0 and K[2,2] = 1")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) >= 1e-9:
            raise InvalidInputError("extrinsic rotation is not orthonormal")

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def projection_matrix(self):
        return self.intrinsics @ np.hstack([self.R, self.t[:, None]])

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        # re-orthonormalize to stay well inside the 1e-9 gate
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        K = np.array([[f, 0.0, (width - 1) / 2], [0.0, f, (height - 1) / 2], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project_points(self, points):
        """Vectorised projection: (pixels (N,2), depths (N,)); no culling."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.intrinsics[0, 1] * pc[..., 1] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, pixel, depth):
        pixel = np.asarray(pixel, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        y = (pixel[..., 1] - self.cy) / self.fy
        x = (pixel[..., 0] - self.cx - self.intrinsics[0, 1] * y) / self.fx
        pc = np.stack([x * depth, y * depth, depth], axis=-1)
        return (pc - self.t) @ self.R


def project(cam: Camera, p):
    """Project one world point; raises BehindCameraError inside the near plane."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("point is not finite")
    pix, depth = cam.project_points(p[None])
    if depth[0] <= NEAR_PLANE:
        raise BehindCameraError(f"point at depth {depth[0]:.3g} is behind the near plane")
    return pix[0], float(depth[0])


def unproject(cam: Camera, pixel, depth):
    return cam.unproject(pixel, depth)


def write_cameras(path, cams) -> None:
    with open(path, "wb") as f:
        f.write(b"TCM1")
        f.write(struct.pack("<I", len(cams)))
        for c in cams:
            f.write(struct.pack("<II", c.width, c.height))
            f.write(np.ascontiguousarray(c.intrinsics, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(c.R, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(c.t, dtype="<f8").tobytes())


def read_cameras(path):
    data = Path(path).read_bytes()
    if data[:4] != b"TCM1":
        raise FormatError(f"{path}: bad camera magic")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    cams = []
    for _ in range(n):
        w, h = struct.unpack_from("<II", data, off)
        off += 8
        K = np.frombuffer(data, "<f8", 9, off).reshape(3, 3)
        R = np.frombuffer(data, "<f8", 9, off + 72).reshape(3, 3)
        t = np.frombuffer(data, "<f8", 3, off + 144)
        off += 168
        cams.append(Camera(K.copy(), R.copy(), t.copy(), w, h))
    return cams


# ---------------------------------------------------------------------------
# deformation graph

@dataclass
class DeformGraph:
    """Directed KNN graph; neighbors are row indices, -1 marks an empty slot."""

    neighbors: np.ndarray
    weights: np.ndarray
    influence_radius: float
    k: int = field(default=9)

    def __len__(self):
        return len(self.neighbors)

    def copy(self) -> "DeformGraph":
        return replace(self, neighbors=self.neighbors.copy(), weights=self.weights.copy())

    def edges(self):
        """(src, dst, weight) arrays over all live edges."""
        src, slot = np.nonzero(self.neighbors >= 0)
        return src, self.neighbors[src, slot], self.weights[src, slot]

    def ring(self, seeds, hops: int = 2) -> np.ndarray:
        """Boolean mask of nodes within `hops` undirected steps of the seeds."""
        n = len(self)
        mark = np.zeros(n, dtype=bool)
        mark[np.asarray(seeds, dtype=np.int64)] = True
        src, dst, _ = self.edges()
        for _ in range(hops):
            nxt = mark.copy()
            nxt[dst[mark[src]]] = True
            nxt[src[mark[dst]]] = True
            mark = nxt
        return mark

    def remap(self, keep) -> "DeformGraph":
        """Restrict to the rows in boolean `keep`, dropping edges into removed rows."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.full(len(keep) + 1, -1, dtype=np.int64)
        new_index[:-1][keep] = np.arange(int(keep.sum()))
        nb = new_index[self.neighbors[keep]]
        w = np.where(nb >= 0, self.weights[keep], 0.0)
        return DeformGraph(nb, w, self.influence_radius, self.k)


def edge_weights(positions, neighbors, radius: float, rows=None):
    """exp(-d^2 / l^2) per edge; `rows` are the source nodes of `neighbors` (default all)."""
    positions = np.asarray(positions, dtype=np.float64)
    src = positions if rows is None else positions[np.asarray(rows)]
    valid = neighbors >= 0
    d2 = np.sum((positions[np.where(valid, neighbors, 0)] - src[:, None, :]) ** 2, axis=-1)
    return np.where(valid, np.exp(-d2 / radius ** 2), 0.0)


def knn_indices(positions, k: int, rows=None, candidates=None) -> np.ndarray:
    """Exact k nearest neighbours with (distance, index) ordering.

    rows: query row indices (default all). candidates: boolean mask of rows
    eligible as neighbours (default all). The self row is never returned.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    cand_idx = np.arange(n) if candidates is None else np.flatnonzero(candidates)
    out = np.full((len(rows), k), -1, dtype=np.int64)
    if len(rows) == 0 or len(cand_idx) == 0:
        return out
    pts = positions[cand_idx]
    m = min(len(cand_idx), k + 1 + 8)
    tree = cKDTree(pts)
    _, idx = tree.query(positions[rows], m)
    idx = np.asarray(idx).reshape(len(rows), m)
    gidx = cand_idx[idx]
    d2 = np.sum((positions[gidx] - positions[rows][:, None, :]) ** 2, axis=-1)
    d2 = np.where(gidx == rows[:, None], np.inf, d2)
    for r in range(len(rows)):
        order = np.lexsort((gidx[r], d2[r]))
        sel = order[:k]
        sel = sel[np.isfinite(d2[r, sel])]
        kth = d2[r, sel[-1]] if len(sel) else np.inf
        exhaustive = m == len(cand_idx)
        if exhaustive or (len(sel) == k and kth < np.max(d2[r][np.isfinite(d2[r])])):
            out[r, :len(sel)] = gidx[r, sel]
        else:
            out[r] = _brute_row(positions, rows[r], cand_idx, k)
    return out


def _brute_row(positions, row, cand_idx, k):
    d2 = np.sum((positions[cand_idx] - positions[row]) ** 2, axis=1)
    d2 = np.where(cand_idx == row, np.inf, d2)
    order = np.lexsort((cand_idx, d2))[:k]
    order = order[np.isfinite(d2[order])]
    res = np.full(k, -1, dtype=np.int64)
    res[:len(order)] = cand_idx[order]
    return res


def mean_edge_length(positions, neighbors) -> float:
    valid = neighbors >= 0
    if not valid.any():
        return 0.0
    src = np.nonzero(valid)[0]
    d = np.linalg.norm(positions[neighbors[valid]] - positions[src], axis=1)
    return float(d.mean())


def knn_build(positions, k: int = 9, influence_radius: float | None = None,
              radius_factor: float = 2.0) -> DeformGraph:
    """KNN deformation graph; radius defaults to radius_factor x mean edge length."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < k + 1:
        raise InvalidInputError(f"knn_build needs at least k+1={k + 1} points, got {len(positions)}")
    nb = knn_indices(positions, k)
    if influence_radius is None:
        influence_radius = radius_factor * mean_edge_length(positions, nb)
        if influence_radius <= 0:
            influence_radius = 1.0
    return DeformGraph(nb, edge_weights(positions, nb, influence_radius), float(influence_radius), k)


def local_knn_update(graph: DeformGraph, positions, marked) -> DeformGraph:
    """Recompute neighbour lists of the marked rows only, keeping the radius."""
    marked = np.asarray(marked, dtype=bool)
    rows = np.flatnonzero(marked)
    g = graph.copy()
    if len(rows):
        nb = knn_indices(positions, graph.k, rows)
        g.neighbors[rows] = nb
        g.weights[rows] = edge_weights(positions, nb, graph.influence_radius, rows)
    return g


def write_graph(path, g: DeformGraph) -> None:
    with open(path, "wb") as f:
        f.write(b"TDG1")
        f.write(struct.pack("<IId", len(g), g.k, g.influence_radius))
        f.write(np.ascontiguousarray(g.neighbors, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(g.weights, dtype="<f8").tobytes())


def read_graph(path) -> DeformGraph:
    data = Path(path).read_bytes()
    if data[:4] != b"TDG1":
        raise FormatError(f"{path}: bad graph magic")
    n, k, radius = struct.unpack_from("<IId", data, 4)
    off = 20
    nb = np.frombuffer(data, "<i4", n * k, off).reshape(n, k).astype(np.int64)
    w = np.frombuffer(data, "<f8", n * k, off + 4 * n * k).reshape(n, k).copy()
    return DeformGraph(nb, w, radius, k)
