import numpy as np
import pytest

from topogs.core import Camera, GaussianSet, axis_angle_quat, logit, n_sh_bands

# criterion number -> (outcome, details); filled by pytest_runtest_makereport
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    prev = _CRITERIA.get(n)
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        ok = rep.passed and (prev is None or prev[0])
        details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA[n] = (ok, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, details = _CRITERIA[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# small shared builders

def random_gaussians(n, rng, sh_degree=3, center=(0.0, 0.0, 0.0), spread=0.3, scale=0.05, ids=None):
    pos = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(scale) + rng.uniform(-0.3, 0.3, (n, 3))
    op = logit(rng.uniform(0.3, 0.8, n))
    sh = rng.normal(0, 0.2, (n, n_sh_bands(sh_degree), 3))
    sh[:, 0] += 0.6
    gids = np.arange(n) if ids is None else ids
    return GaussianSet(pos, q, ls, op, sh, gids)


def front_camera(size=32, distance=2.0, fov=40.0, angle=0.0):
    eye = distance * np.array([np.sin(angle), 0.0, -np.cos(angle)])
    return Camera.look_at(eye, [0, 0, 0], [0, 1, 0], fov, size, size)


def rigid(R_axis, angle, shift):
    q = axis_angle_quat(np.asarray(R_axis, float), angle)
    return q, np.asarray(shift, float)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lifespan_sequence(rng, n=60, frames=6, sh_degree=1, born_late=12, die_early=10, drift=0.01):
    """Live sets per frame plus their lifespan table.

    The first n - born_late ids exist from frame 1; born_late ids appear at
    frames 2..T; die_early of the initial ids are pruned mid-sequence.
    """
    from topogs.registration import Glut
    base = random_gaussians(n, rng, sh_degree=sh_degree)
    births = np.ones(n, dtype=int)
    births[n - born_late:] = rng.integers(2, frames + 1, born_late)
    deaths = np.full(n, -1)
    deaths[:die_early] = rng.integers(2, frames + 1, die_early)
    glut = Glut()
    for i in range(n):
        glut.add(i, births[i], base.positions[i], "initial" if births[i] == 1 else "candidate")
        if deaths[i] > 0:
            glut.kill(i, deaths[i])
    out, cur = [], base.copy()
    for t in range(1, frames + 1):
        cur = cur.copy()
        cur.positions += drift * rng.normal(size=cur.positions.shape)
        cur.sh += 0.01 * rng.normal(size=cur.sh.shape)
        out.append(cur.subset(np.isin(cur.global_ids, glut.alive_ids(t))))
    return out, glut


TINY_PIPELINE = {
    "scene": {"template": "sheet", "frames": 3, "views": 4, "resolution": [48, 48], "grid": 24,
              "events": [{"frame": 2, "kind": "appear", "region": "patch"}]},
    "registration": {"budget": 300,
                     "schedule": {"init_iters": 40, "track_iters": 20, "candidate_insert_iter": 10,
                                  "maintenance_period": 5, "divergence_window": 40}},
    "appearance": {"iters": 5, "divergence_window": 40},
}

PIPELINE_STEPS = (["gen"], ["init"], ["track"], ["appearance"], ["pack", "--rasters"], ["encode"], ["decode"],
                  ["render", "--stage", "decoded-appearance"], ["eval"])


def run_pipeline(out, config_path):
    from topogs.cli import main
    codes = []
    for step in PIPELINE_STEPS:
        args = [step[0], "--out", str(out)] + step[1:]
        if step[0] == "gen":
            args += ["--config", str(config_path)]
        codes.append(main(args))
    return codes


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    """Two independent runs of the whole CLI pipeline on the same small config."""
    import yaml
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_PIPELINE))
    runs = []
    for name in ("a", "b"):
        codes = run_pipeline(root / name, cfg)
        runs.append((root / name, codes))
    return runs
