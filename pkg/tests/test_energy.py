import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topogs.core import DeformGraph, GaussianSet, InvalidInputError, axis_angle_quat, knn_build, quat_mul, \
    quat_to_rotmat
from topogs.energy import (LossWeights, anchor_rigidity, arap_energy, arap_terms, color_loss, iso_size_energy,
                           laplacian_energy, temporal_attr_reg)

from conftest import random_gaussians
from gradcheck import ENERGY_CHECKS


@pytest.mark.parametrize("check", ENERGY_CHECKS, ids=lambda c: c.__name__)
def test_energy_gradients_match_finite_differences(check):
    errs = check(np.random.default_rng(11))
    assert max(errs.values()) < 1e-4, errs


def test_laplacian_examples():
    g = DeformGraph(np.array([[1, 2], [0, 2], [0, 1]]), np.ones((3, 2)), 1.0, 2)
    assert laplacian_energy(np.zeros((3, 3)), g)[0] == 0
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    E, grad = laplacian_energy(pos, g)
    assert not grad[0].any()  # node 0 sits at its centroid
    one = DeformGraph(np.array([[1, 2], [-1, -1], [-1, -1]]), np.ones((3, 2)), 1.0, 2)
    pos = np.array([[0.0, 0.5, 0], [1, 0, 0], [-1, 0, 0]])
    E, grad = laplacian_energy(pos, one)
    # only node 0 has neighbours: E = d^2 / N
    assert E == pytest.approx(0.25 / 3)
    # stop-gradient: neighbours get nothing through node 0's centroid
    assert not grad[1:].any()


def test_iso_size_examples():
    (ei, es), _ = iso_size_energy(np.log(np.full((3, 3), 0.1)), 1.0)
    assert ei == pytest.approx(0, abs=1e-15) and es == 0
    a = 0.2
    (ei, _), _ = iso_size_energy(np.log([[2 * a, a, a]]), 10.0)
    assert ei == pytest.approx(4 * a / 3)


def _state(rng, n=12):
    gs = random_gaussians(n, rng)
    return gs, knn_build(gs.positions, 4)


def test_arap_identity_and_rigid_invariance(rng):
    prev, g = _state(rng)
    assert arap_energy(prev, prev.copy(), g)[0] == pytest.approx(0, abs=1e-25)
    q0 = axis_angle_quat(np.array([0.3, -0.5, 0.8]), 0.7)
    R0 = quat_to_rotmat(q0)
    cur = prev.copy()
    cur.positions = prev.positions @ R0.T + [0.4, -0.1, 0.2]
    cur.rotations = quat_mul(np.broadcast_to(q0, prev.rotations.shape), prev.rotations)
    assert arap_energy(prev, cur, g)[0] < 1e-20


def test_arap_single_edge():
    g = DeformGraph(np.array([[1], [-1]]), np.array([[1.0], [0.0]]), 1.0, 1)
    q = np.tile([1.0, 0, 0, 0], (2, 1))
    E, _, _ = arap_terms(np.array([[0.0, 0, 0], [1, 0, 0]]), q, np.array([[0.0, 0, 0], [2, 0, 0]]), q, g)
    assert E == pytest.approx(1.0)


def test_arap_misaligned(rng):
    prev, g = _state(rng)
    cur = prev.subset(np.arange(len(prev) - 1))
    with pytest.raises(InvalidInputError):
        arap_energy(prev, cur, g)


def test_anchor_rigidity_examples():
    ap = np.array([[0.0, 0, 0]])
    aq = np.array([[1.0, 0, 0, 0]])
    app = np.array([[0.1, 0, 0], [0, 0.2, 0]])
    links = np.array([0, 0])
    q = axis_angle_quat(np.array([0, 0, 1.0]), 0.4)[None]
    R = quat_to_rotmat(q[0])
    moved = (app @ R.T) + [0.3, 0, 0]
    assert anchor_rigidity(ap, aq, ap + [0.3, 0, 0], q, app, moved, links)[0] < 1e-25
    d = np.array([0.01, -0.02, 0.03])
    E = anchor_rigidity(ap, aq, ap, aq, app, app + [d, 0 * d], links)[0]
    assert E == pytest.approx(d @ d)
    with pytest.raises(InvalidInputError):
        anchor_rigidity(ap, aq, ap, aq, app, app, np.array([0, 3]))


def test_temporal_examples(rng):
    a = random_gaussians(4, rng)
    assert temporal_attr_reg(a, a.copy(), 1.0)[0] == 0
    b = a.copy()
    b.opacity_logits[1] += 0.5
    E, g = temporal_attr_reg(b, a, 1.0)
    assert E == pytest.approx(0.25)
    assert g["opacity_logits"][1] == pytest.approx(1.0)


def test_color_loss_examples(rng):
    img = rng.random((12, 12, 3))
    assert color_loss(img, img)[0] == pytest.approx(0, abs=1e-12)
    obs = np.clip(img, 0.2, 0.8)
    assert color_loss(obs + 0.1, obs, lambda_dssim=0.0)[0] == pytest.approx(0.1)
    with pytest.raises(InvalidInputError):
        color_loss(img, img[:4])


def test_loss_weights_validation():
    with pytest.raises(InvalidInputError):
        LossWeights(lambda_lap=-1.0)
    w = LossWeights()
    assert (w.lambda_lap, w.lambda_iso, w.lambda_size, w.lambda_smooth) == (2.0, 0.001, 1.0, 0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_energies_nonnegative(seed):
    rng = np.random.default_rng(seed)
    prev, g = _state(rng)
    cur = random_gaussians(len(prev), rng)
    assert arap_energy(prev, cur, g)[0] >= 0
    assert laplacian_energy(cur.positions, g)[0] >= 0
    (ei, es), _ = iso_size_energy(cur.log_scales, 0.05)
    assert ei >= 0 and es >= 0
    assert temporal_attr_reg(cur, prev.copy(), 0.01)[0] >= 0
