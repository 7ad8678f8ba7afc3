"""Deterministic CPU splatting with analytic gradients.

Projection follows the usual EWA linearisation; compositing is front to
back over a single global depth order (ties broken by global id).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .core import NEAR_PLANE, Camera, FormatError, GaussianSet, InvalidInputError

ALPHA_MAX = 0.99
LOWPASS = 0.3
CUTOFF_POWER = -4.5  # 3 sigma in Mahalanobis units

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
      0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(dirs, degree: int):
    """Real SH basis (N, (degree+1)^2) and its gradient w.r.t. dirs (N, bands, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    zero = np.zeros(n)
    one = np.ones(n)
    Y = [C0 * one]
    dY = [np.stack([zero, zero, zero], -1)]
    if degree >= 1:
        Y += [-C1 * y, C1 * z, -C1 * x]
        dY += [np.stack([zero, -C1 * one, zero], -1), np.stack([zero, zero, C1 * one], -1),
               np.stack([-C1 * one, zero, zero], -1)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy), C2[3] * x * z, C2[4] * (xx - yy)]
        dY += [C2[0] * np.stack([y, x, zero], -1),
               C2[1] * np.stack([zero, z, y], -1),
               C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1),
               C2[3] * np.stack([z, zero, x], -1),
               C2[4] * np.stack([2 * x, -2 * y, zero], -1)]
    if degree >= 3:
        Y += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z, C3[2] * y * (4 * zz - xx - yy),
              C3[3] * z * (2 * zz - 3 * xx - 3 * yy), C3[4] * x * (4 * zz - xx - yy),
              C3[5] * z * (xx - yy), C3[6] * x * (xx - 3 * yy)]
        dY += [C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1),
               C3[1] * np.stack([y * z, x * z, x * y], -1),
               C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1),
               C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1),
               C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1),
               C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1),
               C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)]
    if degree > 3:
        raise InvalidInputError("SH degree above 3 is not supported")
    return np.stack(Y, axis=1), np.stack(dY, axis=1)


@dataclass
class RenderedFrame:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    coverage: np.ndarray  # (H, W) bool
    surface_id: np.ndarray | None = None  # (H, W) int64, -1 where not covered
    projection: object = field(default=None, repr=False, compare=False)  # reused by splat_backward


@numba.njit(cache=True)
def _sh_point(x, y, z, deg, Y, dY):
    """Real SH basis at one unit direction; fills Y[k] and dY[k, axis]."""
    for k in range(Y.shape[0]):
        Y[k] = 0.0
        dY[k, 0] = 0.0
        dY[k, 1] = 0.0
        dY[k, 2] = 0.0
    Y[0] = C0
    if deg >= 1:
        Y[1] = -C1 * y
        Y[2] = C1 * z
        Y[3] = -C1 * x
        dY[1, 1] = -C1
        dY[2, 2] = C1
        dY[3, 0] = -C1
    if deg >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y[4] = C2[0] * x * y
        Y[5] = C2[1] * y * z
        Y[6] = C2[2] * (2 * zz - xx - yy)
        Y[7] = C2[3] * x * z
        Y[8] = C2[4] * (xx - yy)
        dY[4, 0], dY[4, 1] = C2[0] * y, C2[0] * x
        dY[5, 1], dY[5, 2] = C2[1] * z, C2[1] * y
        dY[6, 0], dY[6, 1], dY[6, 2] = -2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z
        dY[7, 0], dY[7, 2] = C2[3] * z, C2[3] * x
        dY[8, 0], dY[8, 1] = 2 * C2[4] * x, -2 * C2[4] * y
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        Y[9] = C3[0] * y * (3 * xx - yy)
        Y[10] = C3[1] * x * y * z
        Y[11] = C3[2] * y * (4 * zz - xx - yy)
        Y[12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[13] = C3[4] * x * (4 * zz - xx - yy)
        Y[14] = C3[5] * z * (xx - yy)
        Y[15] = C3[6] * x * (xx - 3 * yy)
        dY[9, 0], dY[9, 1] = C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy)
        dY[10, 0], dY[10, 1], dY[10, 2] = C3[1] * y * z, C3[1] * x * z, C3[1] * x * y
        dY[11, 0], dY[11, 1], dY[11, 2] = -2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z
        dY[12, 0], dY[12, 1], dY[12, 2] = -6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)
        dY[13, 0], dY[13, 1], dY[13, 2] = C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z
        dY[14, 0], dY[14, 1], dY[14, 2] = 2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)
        dY[15, 0], dY[15, 1] = C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y


@numba.njit(cache=True)
def _gaussian_frame(pos, rot, ls, Rw, tw, fx, fy, Rq, s, cov3, T):
    """Camera-space point, rotation, scales, 3D covariance and the EWA map T = J W."""
    x = Rw[0, 0] * pos[0] + Rw[0, 1] * pos[1] + Rw[0, 2] * pos[2] + tw[0]
    y = Rw[1, 0] * pos[0] + Rw[1, 1] * pos[1] + Rw[1, 2] * pos[2] + tw[1]
    z = Rw[2, 0] * pos[0] + Rw[2, 1] * pos[1] + Rw[2, 2] * pos[2] + tw[2]
    nq = np.sqrt(rot[0] ** 2 + rot[1] ** 2 + rot[2] ** 2 + rot[3] ** 2)
    w, qx, qy, qz = rot[0] / nq, rot[1] / nq, rot[2] / nq, rot[3] / nq
    Rq[0, 0] = 1 - 2 * (qy * qy + qz * qz)
    Rq[0, 1] = 2 * (qx * qy - w * qz)
    Rq[0, 2] = 2 * (qx * qz + w * qy)
    Rq[1, 0] = 2 * (qx * qy + w * qz)
    Rq[1, 1] = 1 - 2 * (qx * qx + qz * qz)
    Rq[1, 2] = 2 * (qy * qz - w * qx)
    Rq[2, 0] = 2 * (qx * qz - w * qy)
    Rq[2, 1] = 2 * (qy * qz + w * qx)
    Rq[2, 2] = 1 - 2 * (qx * qx + qy * qy)
    for j in range(3):
        s[j] = np.exp(ls[j])
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += Rq[i, k] * s[k] * s[k] * Rq[j, k]
            cov3[i, j] = acc
    zs = z if z > NEAR_PLANE else 1.0
    j00, j02 = fx / zs, -fx * x / (zs * zs)
    j11, j12 = fy / zs, -fy * y / (zs * zs)
    for j in range(3):
        T[0, j] = j00 * Rw[0, j] + j02 * Rw[2, j]
        T[1, j] = j11 * Rw[1, j] + j12 * Rw[2, j]
    return x, y, z, nq


@numba.njit(cache=True)
def _project_kernel(pos, rot, ls, ol, sh, Rw, tw, fx, fy, cx, cy, cc, W, H, use_cutoff, deg):
    n = pos.shape[0]
    bands = sh.shape[1]
    valid = np.zeros(n, dtype=np.bool_)
    depth = np.zeros(n)
    means = np.zeros((n, 2))
    conics = np.zeros((n, 3))
    radii = np.full(n, -1, dtype=np.int64)
    colors = np.zeros((n, 3))
    opac = np.zeros(n)
    Rq = np.zeros((3, 3))
    s = np.zeros(3)
    cov3 = np.zeros((3, 3))
    T = np.zeros((2, 3))
    Y = np.zeros(16)
    dY = np.zeros((16, 3))
    lim = 4 * max(W, H)
    for g in range(n):
        x, y, z, _ = _gaussian_frame(pos[g], rot[g], ls[g], Rw, tw, fx, fy, Rq, s, cov3, T)
        depth[g] = z
        opac[g] = 1.0 / (1.0 + np.exp(-ol[g]))
        if not z > NEAR_PLANE:
            continue
        mx = fx * x / z + cx
        my = fy * y / z + cy
        A = LOWPASS
        B = 0.0
        C = LOWPASS
        for i in range(3):
            for j in range(3):
                A += T[0, i] * cov3[i, j] * T[0, j]
                B += T[0, i] * cov3[i, j] * T[1, j]
                C += T[1, i] * cov3[i, j] * T[1, j]
        det = A * C - B * B
        if not det > 0:
            continue
        if use_cutoff:
            mid = 0.5 * (A + C)
            lam = mid + np.sqrt(max(0.1, mid * mid - det))
            r = min(np.ceil(3.0 * np.sqrt(lam)), lim)
            if mx + r < 0 or mx - r > W - 1 or my + r < 0 or my - r > H - 1:
                continue
            radii[g] = int(r)
        valid[g] = True
        means[g, 0] = mx
        means[g, 1] = my
        conics[g, 0] = C / det
        conics[g, 1] = -B / det
        conics[g, 2] = A / det
        vx, vy, vz = pos[g, 0] - cc[0], pos[g, 1] - cc[1], pos[g, 2] - cc[2]
        vn = np.sqrt(vx * vx + vy * vy + vz * vz)
        if vn <= 0:
            vn = 1.0
        _sh_point(vx / vn, vy / vn, vz / vn, deg, Y, dY)
        for ch in range(3):
            acc = 0.5
            for k in range(bands):
                acc += Y[k] * sh[g, k, ch]
            colors[g, ch] = acc if acc > 0 else 0.0
    return valid, depth, means, conics, radii, colors, opac


@numba.njit(cache=True)
def _project_backward_kernel(pos, rot, ls, ol, sh, Rw, tw, fx, fy, cc, valid, deg,
                             g_mean, g_conic, g_opac, g_color):
    n = pos.shape[0]
    bands = sh.shape[1]
    gp = np.zeros((n, 3))
    gq = np.zeros((n, 4))
    gls = np.zeros((n, 3))
    gol = np.zeros(n)
    gsh = np.zeros((n, bands, 3))
    Rq = np.zeros((3, 3))
    s = np.zeros(3)
    cov3 = np.zeros((3, 3))
    T = np.zeros((2, 3))
    Y = np.zeros(16)
    dY = np.zeros((16, 3))
    G2 = np.zeros((2, 2))
    GT = np.zeros((2, 3))
    G3 = np.zeros((3, 3))
    GM = np.zeros((3, 3))
    GR = np.zeros((3, 3))
    GJ = np.zeros((2, 3))
    tmp = np.zeros((2, 3))
    for g in range(n):
        if not valid[g]:
            continue
        x, y, z, nq = _gaussian_frame(pos[g], rot[g], ls[g], Rw, tw, fx, fy, Rq, s, cov3, T)
        A = LOWPASS
        B = 0.0
        C = LOWPASS
        for i in range(3):
            for j in range(3):
                A += T[0, i] * cov3[i, j] * T[0, j]
                B += T[0, i] * cov3[i, j] * T[1, j]
                C += T[1, i] * cov3[i, j] * T[1, j]
        det = A * C - B * B
        q00, q01, q11 = C / det, -B / det, A / det
        h00, h01, h11 = g_conic[g, 0], 0.5 * g_conic[g, 1], g_conic[g, 2]
        # G2 = -Q H Q
        a00 = q00 * h00 + q01 * h01
        a01 = q00 * h01 + q01 * h11
        a10 = q01 * h00 + q11 * h01
        a11 = q01 * h01 + q11 * h11
        G2[0, 0] = -(a00 * q00 + a01 * q01)
        G2[0, 1] = -(a00 * q01 + a01 * q11)
        G2[1, 0] = -(a10 * q00 + a11 * q01)
        G2[1, 1] = -(a10 * q01 + a11 * q11)
        # GT = 2 G2 T cov3 ; G3 = T^T G2 T
        for a in range(2):
            for j in range(3):
                tmp[a, j] = G2[a, 0] * T[0, j] + G2[a, 1] * T[1, j]
        for a in range(2):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += tmp[a, k] * cov3[k, j]
                GT[a, j] = 2.0 * acc
        for i in range(3):
            for j in range(3):
                G3[i, j] = T[0, i] * tmp[0, j] + T[1, i] * tmp[1, j]
        # GM = 2 G3 M with M = Rq diag(s)
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += G3[i, k] * Rq[k, j]
                GM[i, j] = 2.0 * acc * s[j]
        for j in range(3):
            acc = 0.0
            for i in range(3):
                GR[i, j] = GM[i, j] * s[j]
                acc += GM[i, j] * Rq[i, j]
            gls[g, j] = acc * s[j]
        w, qx, qy, qz = rot[g, 0] / nq, rot[g, 1] / nq, rot[g, 2] / nq, rot[g, 3] / nq
        gw = 2 * (-qz * GR[0, 1] + qy * GR[0, 2] + qz * GR[1, 0] - qx * GR[1, 2] - qy * GR[2, 0] + qx * GR[2, 1])
        gx = 2 * (qy * GR[0, 1] + qz * GR[0, 2] + qy * GR[1, 0] - 2 * qx * GR[1, 1]
                  - w * GR[1, 2] + qz * GR[2, 0] + w * GR[2, 1] - 2 * qx * GR[2, 2])
        gy = 2 * (-2 * qy * GR[0, 0] + qx * GR[0, 1] + w * GR[0, 2] + qx * GR[1, 0]
                  + qz * GR[1, 2] - w * GR[2, 0] + qz * GR[2, 1] - 2 * qy * GR[2, 2])
        gz = 2 * (-2 * qz * GR[0, 0] - w * GR[0, 1] + qx * GR[0, 2] + w * GR[1, 0]
                  - 2 * qz * GR[1, 1] + qy * GR[1, 2] + qx * GR[2, 0] + qy * GR[2, 1])
        dot = w * gw + qx * gx + qy * gy + qz * gz
        gq[g, 0] = (gw - w * dot) / nq
        gq[g, 1] = (gx - qx * dot) / nq
        gq[g, 2] = (gy - qy * dot) / nq
        gq[g, 3] = (gz - qz * dot) / nq
        # GJ = GT W^T
        for a in range(2):
            for b in range(3):
                GJ[a, b] = GT[a, 0] * Rw[b, 0] + GT[a, 1] * Rw[b, 1] + GT[a, 2] * Rw[b, 2]
        gm0, gm1 = g_mean[g, 0], g_mean[g, 1]
        z2, z3 = z * z, z * z * z
        gpc0 = GJ[0, 2] * (-fx / z2) + gm0 * fx / z
        gpc1 = GJ[1, 2] * (-fy / z2) + gm1 * fy / z
        gpc2 = (GJ[0, 0] * (-fx / z2) + GJ[0, 2] * (2 * fx * x / z3)
                + GJ[1, 1] * (-fy / z2) + GJ[1, 2] * (2 * fy * y / z3)
                - gm0 * fx * x / z2 - gm1 * fy * y / z2)
        # view-dependent color
        vx, vy, vz = pos[g, 0] - cc[0], pos[g, 1] - cc[1], pos[g, 2] - cc[2]
        vn = np.sqrt(vx * vx + vy * vy + vz * vz)
        if vn <= 0:
            vn = 1.0
        dx, dy, dz = vx / vn, vy / vn, vz / vn
        _sh_point(dx, dy, dz, deg, Y, dY)
        gd0 = 0.0
        gd1 = 0.0
        gd2 = 0.0
        for ch in range(3):
            raw = 0.5
            for k in range(bands):
                raw += Y[k] * sh[g, k, ch]
            if raw <= 0:
                continue
            gc = g_color[g, ch]
            for k in range(bands):
                gsh[g, k, ch] = Y[k] * gc
                gb = sh[g, k, ch] * gc
                gd0 += gb * dY[k, 0]
                gd1 += gb * dY[k, 1]
                gd2 += gb * dY[k, 2]
        dd = dx * gd0 + dy * gd1 + dz * gd2
        for a in range(3):
            gp[g, a] = Rw[0, a] * gpc0 + Rw[1, a] * gpc1 + Rw[2, a] * gpc2
        gp[g, 0] += (gd0 - dx * dd) / vn
        gp[g, 1] += (gd1 - dy * dd) / vn
        gp[g, 2] += (gd2 - dz * dd) / vn
        o = 1.0 / (1.0 + np.exp(-ol[g]))
        gol[g] = g_opac[g] * o * (1 - o)
    return gp, gq, gls, gol, gsh


@dataclass
class _Projected:
    valid: np.ndarray
    order: np.ndarray
    means: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    opac: np.ndarray


def _check_camera(cam: Camera):
    if cam.intrinsics[0, 1] != 0.0:
        raise InvalidInputError("splatting assumes zero skew")


def _project(gs: GaussianSet, cam: Camera, cutoff: bool) -> _Projected:
    _check_camera(cam)
    if gs.sh_degree > 3:
        raise InvalidInputError("SH degree above 3 is not supported")
    valid, depth, means, conics, radii, colors, opac = _project_kernel(
        gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, np.ascontiguousarray(gs.sh),
        cam.R, cam.t, cam.fx, cam.fy, cam.cx, cam.cy, cam.center, cam.width, cam.height, cutoff, gs.sh_degree)
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((gs.global_ids[idx], depth[idx]))]
    return _Projected(valid, order, means, conics, radii, colors, opac)


@numba.njit(cache=True)
def _bbox(mx, my, r, W, H):
    if r < 0:
        return 0, W - 1, 0, H - 1
    x0 = max(0, int(np.floor(mx - r)))
    x1 = min(W - 1, int(np.ceil(mx + r)))
    y0 = max(0, int(np.floor(my - r)))
    y1 = min(H - 1, int(np.ceil(my + r)))
    return x0, x1, y0, y1


@numba.njit(cache=True)
def _raster_forward(order, means, conics, opac, colors, radii, ids, H, W, use_cutoff):
    img = np.zeros((H, W, 3))
    Tr = np.ones((H, W))
    best_w = np.zeros((H, W))
    best_id = np.full((H, W), -1, dtype=np.int64)
    for oi in range(order.shape[0]):
        g = order[oi]
        mx = means[g, 0]
        my = means[g, 1]
        a = conics[g, 0]
        b = conics[g, 1]
        c = conics[g, 2]
        o = opac[g]
        x0, x1, y0, y1 = _bbox(mx, my, radii[g], W, H)
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                dx = px - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if use_cutoff and power < -4.5:
                    continue
                alpha = o * np.exp(power)
                if alpha > 0.99:
                    alpha = 0.99
                T = Tr[py, px]
                w = alpha * T
                img[py, px, 0] += w * colors[g, 0]
                img[py, px, 1] += w * colors[g, 1]
                img[py, px, 2] += w * colors[g, 2]
                if w > best_w[py, px]:
                    best_w[py, px] = w
                    best_id[py, px] = ids[g]
                Tr[py, px] = T * (1.0 - alpha)
    return img, Tr, best_id


@numba.njit(cache=True)
def _raster_backward(order, means, conics, opac, colors, radii, H, W, use_cutoff, T_final, dL_dC):
    n = means.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    S = np.zeros((H, W, 3))
    Tr = T_final.copy()
    for oi in range(order.shape[0] - 1, -1, -1):
        g = order[oi]
        mx = means[g, 0]
        my = means[g, 1]
        a = conics[g, 0]
        b = conics[g, 1]
        c = conics[g, 2]
        o = opac[g]
        x0, x1, y0, y1 = _bbox(mx, my, radii[g], W, H)
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                dx = px - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if use_cutoff and power < -4.5:
                    continue
                G = np.exp(power)
                raw = o * G
                alpha = raw if raw < 0.99 else 0.99
                one_m = 1.0 - alpha
                Ti = Tr[py, px] / one_m
                dl_da = 0.0
                for ch in range(3):
                    gc = dL_dC[py, px, ch]
                    dl_da += gc * (colors[g, ch] * Ti - S[py, px, ch] / one_m)
                    g_color[g, ch] += gc * alpha * Ti
                    S[py, px, ch] += colors[g, ch] * alpha * Ti
                Tr[py, px] = Ti
                if raw < 0.99:
                    g_opac[g] += dl_da * G
                    dl_dp = dl_da * raw
                    g_mean[g, 0] += dl_dp * (a * dx + b * dy)
                    g_mean[g, 1] += dl_dp * (b * dx + c * dy)
                    g_conic[g, 0] += dl_dp * (-0.5 * dx * dx)
                    g_conic[g, 1] += dl_dp * (-dx * dy)
                    g_conic[g, 2] += dl_dp * (-0.5 * dy * dy)
    return g_mean, g_conic, g_opac, g_color


def splat(gs: GaussianSet, cam: Camera, cutoff: bool = True) -> RenderedFrame:
    """Render a GaussianSet; background is black.

    cutoff=False evaluates every Gaussian over the whole image, which makes
    the image a smooth function of the parameters (used by gradient checks).
    """
    H, W = cam.height, cam.width
    if len(gs) == 0:
        return RenderedFrame(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W), bool),
                             np.full((H, W), -1, dtype=np.int64))
    pr = _project(gs, cam, cutoff)
    img, Tr, best = _raster_forward(pr.order, pr.means, pr.conics, pr.opac, pr.colors, pr.radii,
                                    gs.global_ids, H, W, cutoff)
    alpha = 1.0 - Tr
    coverage = alpha > 0.5
    best = np.where(coverage, best, -1)
    return RenderedFrame(img, alpha, coverage, best, pr)


@dataclass
class SplatGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, gs: GaussianSet) -> "SplatGrads":
        return cls(np.zeros_like(gs.positions), np.zeros_like(gs.rotations), np.zeros_like(gs.log_scales),
                   np.zeros_like(gs.opacity_logits), np.zeros_like(gs.sh))

    def __iadd__(self, other: "SplatGrads"):
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, f: float) -> "SplatGrads":
        return SplatGrads(self.positions * f, self.rotations * f, self.log_scales * f,
                          self.opacity_logits * f, self.sh * f)


def splat_backward(gs: GaussianSet, cam: Camera, upstream, cutoff: bool = True,
                   forward: RenderedFrame | None = None) -> SplatGrads:
    """Gradients of sum(upstream * color) with respect to every attribute.

    `forward` must be splat(gs, cam, cutoff) for the same, unmodified set.
    """
    grads = SplatGrads.zeros_like(gs)
    if len(gs) == 0:
        return grads
    H, W = cam.height, cam.width
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    pr = forward.projection if forward is not None and forward.projection is not None else _project(gs, cam, cutoff)
    if forward is None:
        _, Tr, _ = _raster_forward(pr.order, pr.means, pr.conics, pr.opac, pr.colors, pr.radii,
                                   gs.global_ids, H, W, cutoff)
    else:
        Tr = 1.0 - forward.alpha
    g_mean, g_conic, g_opac, g_color = _raster_backward(
        pr.order, pr.means, pr.conics, pr.opac, pr.colors, pr.radii, H, W, cutoff, Tr, upstream)
    gp, gq, gls, gol, gsh = _project_backward_kernel(
        gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, np.ascontiguousarray(gs.sh),
        cam.R, cam.t, cam.fx, cam.fy, cam.center, pr.valid, gs.sh_degree, g_mean, g_conic, g_opac, g_color)
    return SplatGrads(gp, gq, gls, gol, gsh)


def error_map(rendered, observed) -> np.ndarray:
    """Per-pixel mean absolute color difference over the three channels."""
    rc = rendered.color if isinstance(rendered, RenderedFrame) else np.asarray(rendered)
    observed = np.asarray(observed, dtype=np.float64)
    if rc.shape != observed.shape:
        raise InvalidInputError(f"resolution mismatch: {rc.shape} vs {observed.shape}")
    return np.mean(np.abs(rc - observed), axis=-1)


# ---------------------------------------------------------------------------
# image files

def save_png(path, img, bits: int = 8) -> None:
    """Color image in [0, 1] as an 8-bit RGB or 16-bit grayscale-per-channel PNG.

    16-bit output stacks the three channels vertically (PIL has no 16-bit RGB mode).
    """
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        planes = np.concatenate([img[..., c] for c in range(img.shape[-1])], axis=0)
        Image.fromarray(np.rint(planes * 65535).astype(np.uint16)).save(path)
    else:
        raise InvalidInputError("bits must be 8 or 16")


def write_raw_image(path, img) -> None:
    """TIM1: magic, u32 height, u32 width, u32 channels, float32 samples row-major."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    Path(path).write_bytes(b"TIM1" + struct.pack("<III", H, W, C) + np.ascontiguousarray(img).tobytes())


def read_raw_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"TIM1":
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    H, W, C = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * H * W * C:
        raise FormatError(f"{path}: size does not match header")
    return np.frombuffer(data, "<f4", H * W * C, 16).reshape(H, W, C).astype(np.float64)
