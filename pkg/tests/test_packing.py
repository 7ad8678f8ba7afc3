import numpy as np
import pytest

from topogs.core import FormatError, GaussianSet
from topogs.packing import (QMAX, build_layout, channel_groups, classify, compute_ranges, export_rasters,
                            import_rasters, interleave, morton_encode, neighbor_distance, pack_frame, pack_sequence,
                            read_maps, unpack_frame, write_maps)
from topogs.registration import Glut

from conftest import lifespan_sequence, random_gaussians


def _glut(spans):
    """spans: list of (birth, death or None)."""
    g = Glut()
    for i, (b, d) in enumerate(spans):
        g.add(i, b, np.full(3, float(i)), "initial")
        if d is not None:
            g.kill(i, d)
    return g


def test_classify_definition():
    g = _glut([(1, None), (5, None), (1, 10)])
    pers, trans = classify(g, 20)
    assert list(pers) == [0] and list(trans) == [1, 2]


@pytest.mark.parametrize("q,code", [((1, 0, 0), 1), ((1, 1, 1), 7), ((3, 3, 3), 63), ((0, 1, 0), 2), ((0, 0, 1), 4)])
def test_morton_interleave(q, code):
    assert int(interleave(np.array([q]), bits=2)[0]) == code


def test_morton_degenerate_axis_and_clamp():
    bbox = (np.zeros(3), np.array([1.0, 0.0, 1.0]))
    c = morton_encode([[1.0, 5.0, 0.0]], bbox, bits=2)
    assert int(c[0]) == 0b000001 | 0b001000
    from topogs.packing import morton_quantize
    _, clamped = morton_quantize([[2.0, 0, 0], [0.5, 0, 0.5]], bbox, 2)
    assert list(clamped) == [True, False]


def test_layout_transient_order_and_grid():
    g = _glut([(1, None), (7, None), (3, None), (1, None)])
    plan = build_layout(g, 10)
    assert set(plan.order[:2]) == {0, 3} and plan.n_persistent == 2
    assert list(plan.order[2:]) == [2, 1]
    assert plan.cols % 8 == 0 and plan.rows * plan.cols >= 4
    # bijection onto [0, total_slots)
    assert sorted(plan.slots(g.ids())) == list(range(plan.total_slots))


def test_all_persistent_is_pure_morton(rng):
    gs = random_gaussians(50, rng)
    g = Glut()
    for i, p in zip(gs.global_ids, gs.positions):
        g.add(i, 1, p, "initial")
    a, b = build_layout(g, 5, "combined"), build_layout(g, 5, "morton")
    assert np.array_equal(a.order, b.order)


def test_appearance_layout_induced(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    ids = glut.ids()
    app = plan.slots(ids[:, None] * plan.k + np.arange(plan.k), "appearance")
    assert np.array_equal(app, plan.slots(ids)[:, None] * plan.k + np.arange(plan.k))
    # contiguous runs of K per anchor
    assert np.all(np.diff(app, axis=1) == 1)


def test_neighbor_locality_beats_random(rng):
    gs = random_gaussians(400, rng, spread=1.0)
    g = Glut()
    for i, p in zip(gs.global_ids, gs.positions):
        g.add(i, 1, p, "initial")
    plan = build_layout(g, 3)
    pos = {int(i): p for i, p in zip(gs.global_ids, gs.positions)}
    shuffled = build_layout(g, 3)
    shuffled.order = np.random.default_rng(0).permutation(plan.order)
    assert neighbor_distance(plan, pos) < neighbor_distance(shuffled, pos)


def test_layout_stable_hash(rng):
    frames, glut = lifespan_sequence(rng)
    maps = pack_sequence(frames, build_layout(glut, len(frames)))
    assert len({m.plan_hash for m in maps}) == 1


def test_pack_all_live_within_one_step(rng):
    gs = random_gaussians(30, rng, sh_degree=1)
    g = Glut()
    for i, p in zip(gs.global_ids, gs.positions):
        g.add(i, 1, p, "initial")
    plan = build_layout(g, 1)
    ranges = compute_ranges([gs], 1)
    m = pack_frame(1, gs, plan, None, ranges)
    back = unpack_frame(m, plan, g).live_set()
    span = ranges["position"][:, 1] - ranges["position"][:, 0]
    err = np.abs(back.positions - gs.positions).max(axis=0)
    assert np.all(err <= span / 2 * 2.0 ** -16 * 2)
    assert np.array_equal(back.global_ids, gs.global_ids)


def test_round_trip_and_liveness(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    maps = pack_sequence(frames, plan)
    ranges = maps[0].ranges
    for t, (gs, m) in enumerate(zip(frames, maps), start=1):
        u = unpack_frame(m, plan, glut)
        assert np.array_equal(np.sort(u.ids[u.live]), glut.alive_ids(t))
        back = u.live_set()
        assert np.array_equal(back.global_ids, gs.global_ids)
        for name, a in (("position", back.positions - gs.positions), ("sh", (back.sh - gs.sh).reshape(len(gs), -1))):
            span = ranges[name][:, 1] - ranges[name][:, 0]
            assert np.all(np.abs(a) <= span / QMAX / 2 + 1e-12)


def test_monotone_fill_is_exact(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    maps = pack_sequence(frames, plan)
    ids = plan.ids_at()
    for t in range(2, len(frames) + 1):
        live = np.isin(ids, glut.alive_ids(t))
        for name, g in maps[t - 1].groups.items():
            diff = (g.reshape(len(g), -1) != maps[t - 2].groups[name].reshape(len(g), -1)).any(axis=0)
            assert not diff[~live].any()


def test_dead_slot_holds_last_live_values(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    maps = pack_sequence(frames, plan)
    _, _, deaths, _, _ = glut.arrays()
    gid = int(np.flatnonzero(deaths > 0)[0])
    d = int(deaths[gid])
    s = plan.slot(gid)
    for t in range(d, len(frames) + 1):
        for name, g in maps[t - 1].groups.items():
            assert np.array_equal(g.reshape(len(g), -1)[:, s], maps[d - 2].groups[name].reshape(len(g), -1)[:, s])


def test_prebirth_slot_is_backward_filled(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    maps = pack_sequence(frames, plan)
    _, births, _, _, _ = glut.arrays()
    gid = int(np.flatnonzero(births > 2)[0])
    b = int(births[gid])
    s = plan.slot(gid)
    for name, g in maps[0].groups.items():
        assert np.array_equal(g.reshape(len(g), -1)[:, s], maps[b - 1].groups[name].reshape(len(g), -1)[:, s])


def test_clamped_values_are_counted(rng):
    frames, glut = lifespan_sequence(rng, frames=2)
    plan = build_layout(glut, 2)
    ranges = compute_ranges(frames[:1], 1)
    gs = frames[1].copy()
    gs.positions[0] += 100.0
    m = pack_frame(2, gs, plan, None, ranges)
    assert m.clamped >= 1


def test_unpack_rejects_foreign_plan(rng):
    frames, glut = lifespan_sequence(rng)
    plan = build_layout(glut, len(frames))
    other = build_layout(glut, len(frames), "lifespan")
    m = pack_sequence(frames, plan)[0]
    with pytest.raises(FormatError):
        unpack_frame(m, other, glut)


def test_maps_file_round_trip(tmp_path, rng):
    frames, glut = lifespan_sequence(rng)
    m = pack_sequence(frames, build_layout(glut, len(frames)))[2]
    write_maps(tmp_path / "m.tgm", m)
    assert read_maps(tmp_path / "m.tgm") == m
    (tmp_path / "bad.tgm").write_bytes((tmp_path / "m.tgm").read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_maps(tmp_path / "bad.tgm")


def test_raster_export_round_trip(tmp_path, rng):
    frames, glut = lifespan_sequence(rng)
    maps = pack_sequence(frames, build_layout(glut, len(frames)))
    paths = export_rasters(maps, tmp_path / "r")
    assert len(paths) == len(maps) * len(channel_groups(1))
    for m in maps:
        assert import_rasters(tmp_path / "r", maps[0], m.frame) == m
