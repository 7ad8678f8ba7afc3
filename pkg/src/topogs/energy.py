"""Loss terms with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import DeformGraph, GaussianSet, InvalidInputError, quat_conj, quat_mul, quat_normalize, \
    quat_right_matrix, rotmat_grad_to_quat, rotmat_normalized

MOTION_SMOOTH = 0.05
APPEARANCE_SMOOTH = 0.0002


@dataclass
class LossWeights:
    lambda_lap: float = 2.0
    lambda_iso: float = 0.001
    lambda_size: float = 1.0
    lambda_smooth: float = MOTION_SMOOTH
    lambda_temporal: float = 0.01
    lambda_dssim: float = 0.2

    def __post_init__(self):
        for name, v in vars(self).items():
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and non-negative, got {v}")


def laplacian_energy(positions, graph: DeformGraph):
    """Mean squared distance to the (stop-gradient) neighbour centroid."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    nb = graph.neighbors
    valid = nb >= 0
    cnt = np.maximum(valid.sum(axis=1), 1)
    centroid = np.sum(np.where(valid[..., None], positions[np.where(valid, nb, 0)], 0.0), axis=1) / cnt[:, None]
    centroid = np.where(valid.any(axis=1)[:, None], centroid, positions)
    d = positions - centroid
    E = float(np.sum(d * d) / max(n, 1))
    return E, 2.0 * d / max(n, 1)


def iso_size_energy(log_scales, s_max: float):
    """((E_iso, E_size), (dE_iso/dlog_s, dE_size/dlog_s))."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    n = max(len(log_scales), 1)
    s = np.exp(log_scales)
    mean = s.mean(axis=1, keepdims=True)
    dev = s - mean
    E_iso = float(np.sum(np.abs(dev)) / n)
    sg = np.sign(dev)
    g_iso = (sg - sg.mean(axis=1, keepdims=True)) * s / n
    smax_axis = np.argmax(s, axis=1)
    top = s[np.arange(len(s)), smax_axis]
    hinge = np.maximum(0.0, top - s_max)
    E_size = float(np.sum(hinge ** 2) / n)
    g_size = np.zeros_like(s)
    g_size[np.arange(len(s)), smax_axis] = 2.0 * hinge * top / n
    return (E_iso, E_size), (g_iso, g_size)


def _check_aligned(prev: GaussianSet, curr: GaussianSet):
    if len(prev) != len(curr) or np.any(prev.global_ids != curr.global_ids):
        raise InvalidInputError("prev and curr sets are not index-aligned")


def arap_terms(prev_pos, prev_rot, pos, rot, graph: DeformGraph):
    """ARAP energy over graph edges; returns (E, dE/dpos, dE/drot)."""
    src, dst, w = graph.edges()
    qprev = quat_normalize(prev_rot)
    rel = quat_mul(rot, quat_conj(qprev))
    R = rotmat_normalized(rel)
    a = prev_pos[dst] - prev_pos[src]
    b = pos[dst] - pos[src]
    r = np.einsum("eij,ej->ei", R[src], a) - b
    E = float(np.sum(w * np.sum(r * r, axis=1)))
    g_pos = np.zeros_like(pos)
    gr = 2.0 * w[:, None] * r
    np.add.at(g_pos, src, gr)
    np.add.at(g_pos, dst, -gr)
    G_R = np.zeros((len(pos), 3, 3))
    np.add.at(G_R, src, gr[:, :, None] * a[:, None, :])
    g_rel = rotmat_grad_to_quat(rel, G_R)
    Mb = quat_right_matrix(quat_conj(qprev))
    g_rot = np.einsum("nij,ni->nj", Mb, g_rel)
    return E, g_pos, g_rot


def arap_energy(prev: GaussianSet, curr: GaussianSet, graph: DeformGraph):
    _check_aligned(prev, curr)
    return arap_terms(prev.positions, prev.rotations, curr.positions, curr.rotations, graph)


def anchor_rigidity(anchor_prev_pos, anchor_prev_rot, anchor_pos, anchor_rot,
                    app_prev_pos, app_pos, links):
    """Star-graph ARAP between each appearance Gaussian and its anchor.

    links[j] is the anchor row of appearance row j. Returns
    (E, dE/dapp_pos, dE/danchor_pos, dE/danchor_rot).
    """
    links = np.asarray(links, dtype=np.int64)
    if len(links) != len(app_pos) or len(app_prev_pos) != len(app_pos):
        raise InvalidInputError("appearance arrays and links are not aligned")
    if len(links) and (links.min() < 0 or links.max() >= len(anchor_pos)):
        raise InvalidInputError("appearance link points at a missing anchor")
    rel = quat_mul(anchor_rot, quat_conj(quat_normalize(anchor_prev_rot)))
    # unchanged anchors get an exact identity, q * conj(q) is only identity up to roundoff
    rel[np.all(np.asarray(anchor_rot) == anchor_prev_rot, axis=1)] = (1.0, 0.0, 0.0, 0.0)
    R = rotmat_normalized(rel)
    a = app_prev_pos - anchor_prev_pos[links]
    b = app_pos - anchor_pos[links]
    r = np.einsum("eij,ej->ei", R[links], a) - b
    E = float(np.sum(r * r))
    g_app = -2.0 * r
    g_anchor = np.zeros_like(anchor_pos)
    np.add.at(g_anchor, links, 2.0 * r)
    G_R = np.zeros((len(anchor_pos), 3, 3))
    np.add.at(G_R, links, 2.0 * r[:, :, None] * a[:, None, :])
    g_rel = rotmat_grad_to_quat(rel, G_R)
    Mb = quat_right_matrix(quat_conj(quat_normalize(anchor_prev_rot)))
    g_rot = np.einsum("nij,ni->nj", Mb, g_rel)
    return E, g_app, g_anchor, g_rot


TEMPORAL_ATTRS = ("sh", "opacity_logits", "log_scales")


def temporal_attr_reg(curr: GaussianSet, prev: GaussianSet, weight: float = 1.0):
    """weight * sum of squared frame-to-frame changes of sh, opacity and scale."""
    _check_aligned(prev, curr)
    E = 0.0
    grads = {}
    for name in TEMPORAL_ATTRS:
        d = getattr(curr, name) - getattr(prev, name)
        E += float(np.sum(d * d))
        grads[name] = 2.0 * weight * d
    return weight * E, grads


# ---------------------------------------------------------------------------
# photometric loss

def gaussian_window(size: int = 11, sigma: float = 1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


_WIN = gaussian_window()
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur(x):
    # zero-padded 'same' correlation; symmetric kernel so this is self-adjoint
    y = correlate1d(x, _WIN, axis=0, mode="constant")
    return correlate1d(y, _WIN, axis=1, mode="constant")


def _ssim_parts(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * (exy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, A1, A2, B1, B2


def ssim(a, b) -> float:
    """Mean SSIM with an 11-tap Gaussian window (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    _, _, A1, A2, B1, B2 = _ssim_parts(a, b)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(x, y):
    """Mean SSIM and its gradient with respect to x."""
    mx, my, A1, A2, B1, B2 = _ssim_parts(x, y)
    S = A1 * A2 / (B1 * B2)
    n = S.size
    # grouped so that every term cancels exactly when x == y (no roundoff-driven steps at the optimum)
    d_mx = 2 * S * ((my / A1 - mx / B1) - (my / A2 - mx / B2))
    d_exx = -S / B2
    d_exy = 2 * S / A2  # == 2*A1/(B1*B2); this form cancels d_exx exactly at x == y
    grad = (_blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)) / n
    return float(S.mean()), grad


def color_loss(rendered, observed, lambda_dssim: float = 0.2):
    """(1 - l) * L1 + l * (1 - SSIM) and its gradient w.r.t. the rendered image."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape:
        raise InvalidInputError(f"resolution mismatch: {rendered.shape} vs {observed.shape}")
    d = rendered - observed
    l1 = float(np.mean(np.abs(d)))
    g = (1 - lambda_dssim) * np.sign(d) / d.size
    loss = (1 - lambda_dssim) * l1
    if lambda_dssim > 0:
        s, gs = ssim_with_grad(rendered, observed)
        loss += lambda_dssim * (1 - s)
        g = g - lambda_dssim * gs
    return loss, g
