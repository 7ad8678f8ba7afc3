"""Central finite-difference checks for every analytic gradient in the package.

Each check returns {name: relative error}, where the relative error of a
gradient block is |analytic - numeric|_2 / |numeric|_2.
"""
import numpy as np

from topogs.core import DeformGraph, GaussianSet, knn_build
from topogs.energy import (anchor_rigidity, arap_terms, color_loss, iso_size_energy, laplacian_energy,
                           temporal_attr_reg)
from topogs.splat import splat, splat_backward

from conftest import front_camera, random_gaussians

ATTRS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


def rel_err(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-300))


def numeric_grad(f, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _graph(pos, k=4):
    return knn_build(pos, k)


def check_laplacian(rng):
    pos = rng.normal(size=(12, 3))
    g = _graph(pos)
    nb = g.neighbors
    cent = pos[nb].mean(axis=1)  # stop-gradient: centroid frozen at the base point

    def f(p):
        return float(np.sum((p - cent) ** 2) / len(p))

    _, ga = laplacian_energy(pos, g)
    return {"laplacian/positions": rel_err(ga, numeric_grad(f, pos, 1e-6))}


def check_iso_size(rng):
    ls = np.log(rng.uniform(0.02, 0.2, (10, 3)))
    s_max = 0.08
    (_, _), (gi, gs) = iso_size_energy(ls, s_max)
    fi = lambda x: iso_size_energy(x, s_max)[0][0]
    fs = lambda x: iso_size_energy(x, s_max)[0][1]
    return {"iso/log_scales": rel_err(gi, numeric_grad(fi, ls, 1e-7)),
            "size/log_scales": rel_err(gs, numeric_grad(fs, ls, 1e-7))}


def _rand_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def check_arap(rng):
    n = 10
    pp = rng.normal(size=(n, 3))
    pq = _rand_quats(rng, n)
    g = _graph(pp)
    p = pp + 0.1 * rng.normal(size=(n, 3))
    q = _rand_quats(rng, n)
    _, gp, gq = arap_terms(pp, pq, p, q, g)
    return {"arap/positions": rel_err(gp, numeric_grad(lambda x: arap_terms(pp, pq, x, q, g)[0], p, 1e-6)),
            "arap/rotations": rel_err(gq, numeric_grad(lambda x: arap_terms(pp, pq, p, x, g)[0], q, 1e-6))}


def check_anchor(rng):
    na, m = 4, 12
    app_pos_prev = rng.normal(size=(m, 3))
    ap, aq = rng.normal(size=(na, 3)), _rand_quats(rng, na)
    a2, q2 = ap + 0.1 * rng.normal(size=(na, 3)), _rand_quats(rng, na)
    links = rng.integers(0, na, m)
    x = app_pos_prev + 0.1 * rng.normal(size=(m, 3))
    _, g_app, g_a, g_q = anchor_rigidity(ap, aq, a2, q2, app_pos_prev, x, links)
    E = lambda a, q, y: anchor_rigidity(ap, aq, a, q, app_pos_prev, y, links)[0]
    return {"anchor/appearance": rel_err(g_app, numeric_grad(lambda y: E(a2, q2, y), x, 1e-6)),
            "anchor/anchor_positions": rel_err(g_a, numeric_grad(lambda a: E(a, q2, x), a2, 1e-6)),
            "anchor/anchor_rotations": rel_err(g_q, numeric_grad(lambda q: E(a2, q, x), q2, 1e-6))}


def check_temporal(rng):
    prev = random_gaussians(6, rng, sh_degree=1)
    cur = prev.copy()
    for name in ("sh", "opacity_logits", "log_scales"):
        getattr(cur, name)[...] += 0.1 * rng.normal(size=getattr(cur, name).shape)
    w = 0.01
    _, grads = temporal_attr_reg(cur, prev, w)
    out = {}
    for name in ("sh", "opacity_logits", "log_scales"):
        def f(x, name=name):
            c = cur.copy()
            setattr(c, name, x)
            return temporal_attr_reg(c, prev, w)[0]
        out[f"temporal/{name}"] = rel_err(grads[name], numeric_grad(f, getattr(cur, name), 1e-6))
    return out


def check_color(rng):
    obs = rng.random((14, 14, 3))
    # keep |rendered - observed| away from the L1 kink
    ren = np.clip(obs + rng.choice([-1, 1], obs.shape) * rng.uniform(0.05, 0.2, obs.shape), 0, 1)
    _, g = color_loss(ren, obs, 0.2)
    return {"color/image": rel_err(g, numeric_grad(lambda x: color_loss(x, obs, 0.2)[0], ren, 1e-7))}


def check_splat(rng, n=10, size=32, h=1e-4):
    gs = random_gaussians(n, rng, sh_degree=3, spread=0.35, scale=0.12)
    cam = front_camera(size, angle=0.3)
    up = rng.normal(size=(size, size, 3))
    grads = splat_backward(gs, cam, up, cutoff=False)
    out = {}
    for name in ATTRS:
        def f(x, name=name):
            g2 = gs.copy()
            setattr(g2, name, x)
            return float(np.sum(up * splat(g2, cam, cutoff=False).color))
        out[f"splat/{name}"] = rel_err(getattr(grads, name), numeric_grad(f, getattr(gs, name), h))
    return out


ENERGY_CHECKS = (check_laplacian, check_iso_size, check_arap, check_anchor, check_temporal, check_color)
