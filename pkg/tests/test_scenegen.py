import hashlib

import numpy as np
import pytest

from topogs.core import ConfigError, GaussianSet, rgb_to_sh0
from topogs.scenegen import (SceneConfig, SyntheticSequence, generate, load_sequence, make_cameras,
                             oracle_spatial_match, oracle_temporal_track, save_sequence)


def small(**kw):
    base = dict(template="sheet", frames=3, views=4, resolution=(48, 48), grid=16)
    base.update(kw)
    return SceneConfig.from_dict(base)


def seq_hash(seq):
    h = hashlib.sha256()
    for gs in seq.frames:
        for a in (gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, gs.sh, gs.global_ids):
            h.update(np.ascontiguousarray(a).tobytes())
    for v in range(len(seq.cameras)):
        h.update(seq.image(seq.n_frames, v).tobytes())
    return h.hexdigest()


def test_static_sphere_frames_identical():
    seq = generate(small(template="sphere", frames=10))
    assert not seq.events
    for gs in seq.frames[1:]:
        assert np.array_equal(gs.positions, seq.frames[0].positions)


def test_appear_event_semantics():
    seq = generate(small(frames=6, events=[{"frame": 5, "kind": "appear", "region": "patch"}]))
    patch = seq.groups["patch"]
    for t in range(1, 5):
        assert not seq.frame(t).contains(patch).any()
    for t in (5, 6):
        assert seq.frame(t).contains(patch).all()


def test_generate_deterministic():
    cfg = dict(template="sheet", frames=20, views=8, resolution=(128, 128), seed=7,
               motion={"translate": [0.008, 0, 0], "rotate_deg": 0.6})
    a, b = generate(SceneConfig.from_dict(cfg)), generate(SceneConfig.from_dict(cfg))
    assert seq_hash(a) == seq_hash(b)


def test_motion_is_piecewise_smooth():
    seq = generate(small(frames=6, motion={"translate": [0.008, 0, 0], "rotate_deg": 0.6}))
    diag = seq.bbox_diagonal()
    for t in range(2, 7):
        a, b = seq.frame(t - 1), seq.frame(t)
        step = np.linalg.norm(b.positions - a.positions, axis=1).max()
        assert step < 0.02 * diag


def test_config_errors():
    with pytest.raises(ConfigError):
        generate(small(events=[{"frame": 2, "kind": "appear", "region": "nope"}]))
    with pytest.raises(ConfigError):
        generate(small(events=[{"frame": 2, "kind": "appear", "region": [10 ** 7]}]))
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({"template": "teapot"})
    with pytest.raises(ConfigError):
        generate(small(motion={"translate": [0.5, 0, 0]}))


def _one_point_sequence(extra=None):
    pos = [[0.0, 0.0, 0.0]] + ([] if extra is None else [extra])
    n = len(pos)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_sh0(np.full((n, 3), 0.8))
    gs = GaussianSet(pos, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(0.05)), np.full(n, 4.0),
                     sh, np.arange(n))
    return SyntheticSequence([gs, gs.copy()], make_cameras(2, (48, 48)), [], 0)


def test_single_gaussian_match_is_its_projection():
    seq = _one_point_sequence()
    corr = oracle_spatial_match(seq, 1, (0, 1), density=1.0)
    assert len(corr.pairs) > 0 and np.all(corr.identities == 0)
    pa, _ = seq.cameras[0].project_points([[0, 0, 0]])
    pb, _ = seq.cameras[1].project_points([[0, 0, 0]])
    assert np.allclose(corr.pairs[:, 0], pa[0]) and np.allclose(corr.pairs[:, 1], pb[0])


def test_occluded_identity_excluded():
    cams = make_cameras(2, (48, 48))
    # a second opaque Gaussian hides identity 0 from view 1 only
    c1 = cams[1].center
    blocker = (0.7 * c1).tolist()
    seq = _one_point_sequence(blocker)
    seq.frames[0].log_scales[1] = np.log(0.2)
    seq._cache.clear()
    assert 0 not in seq.render(1, 1).surface_id
    corr = oracle_spatial_match(seq, 1, (0, 1), density=1.0)
    assert 0 not in corr.identities


def test_match_density():
    seq = generate(small(resolution=(128, 128)))
    corr = oracle_spatial_match(seq, 1, (0, 1), density=0.05)
    ra, rb = seq.render(1, 0), seq.render(1, 1)
    vis_b = np.unique(rb.surface_id[rb.surface_id >= 0])
    visible = np.sum(np.isin(ra.surface_id, vis_b) & (ra.surface_id >= 0))
    assert abs(len(corr.pairs) - 0.05 * visible) <= 0.1 * 0.05 * visible


def test_temporal_static_identity():
    seq = generate(small(template="sphere"))
    w = oracle_temporal_track(seq, 2, 0)
    H, W = w.mask.shape
    ys, xs = np.mgrid[0:H, 0:W]
    assert np.all(w.mask == 1)
    assert np.array_equal(w.warp, np.stack([xs, ys], -1).astype(float))


def test_temporal_appear_region_unmasked():
    seq = generate(small(frames=3, events=[{"frame": 2, "kind": "appear", "region": "patch"}]))
    w = oracle_temporal_track(seq, 2, 0)
    sid = seq.render(2, 0).surface_id
    new = np.isin(sid, seq.groups["patch"])
    assert new.any() and np.all(w.mask[new] == 0)


def test_temporal_disocclusion_and_soundness():
    seq = generate(SceneConfig.from_dict(dict(template="occluder", frames=3, views=2, resolution=(96, 96),
                                              motion={"occluder_speed": 0.03})))
    for v in range(2):
        w = oracle_temporal_track(seq, 2, v)
        cur = seq.render(2, v).surface_id
        prv = seq.render(1, v).surface_id
        seen_before = np.isin(cur, prv[prv >= 0])
        # mask 0 exactly on pixels whose identity was not visible at t-1
        fg = cur >= 0
        assert np.array_equal(w.mask[fg] == 0, ~seen_before[fg])
        assert (~seen_before[fg]).any()
        # soundness: warped pixel carries the same identity
        m = fg & (w.mask == 1)
        tgt = np.rint(w.warp[m]).astype(int)
        assert np.array_equal(prv[tgt[:, 1], tgt[:, 0]], cur[m])


def test_mask_flip_noise():
    cfg = small(noise={"mask_flip": 0.1})
    seq = generate(cfg)
    w = oracle_temporal_track(seq, 2, 0)
    frac = 1 - w.mask.mean()
    assert 0.05 < frac < 0.15


def test_save_load_round_trip(tmp_path):
    seq = generate(small(events=[{"frame": 2, "kind": "disappear", "region": "hole"}]))
    save_sequence(seq, tmp_path / "s")
    back = load_sequence(tmp_path / "s")
    assert back.n_frames == seq.n_frames and len(back.events) == 1
    assert back.events[0].region == seq.events[0].region
    assert seq_hash(back) == seq_hash(seq)
