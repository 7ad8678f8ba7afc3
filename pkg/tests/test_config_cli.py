import json

import numpy as np
import pytest
import yaml

from topogs.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, METRIC_COLUMNS, main
from topogs.config import PipelineConfig, dump_config, load_config, parse_override, preset
from topogs.core import ConfigError
from topogs.metrics import psnr, ssim

from conftest import PIPELINE_STEPS


def test_psnr_examples():
    a = np.random.default_rng(0).random((16, 16, 3)) * 0.8
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(Exception):
        psnr(a, a[:8])


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_defaults_are_published_values():
    c = PipelineConfig()
    w = c.registration.weights
    assert (w.lambda_lap, w.lambda_iso, w.lambda_size, w.lambda_smooth) == (2.0, 0.001, 1.0, 0.05)
    assert c.registration.epsilon == 0.46 and c.registration.k == 9
    assert c.registration.schedule.maintenance_period == 300
    assert c.appearance.iters == 6000 and c.appearance.lambda_smooth == 0.0002 and c.appearance.k == 9


def test_config_round_trip_is_fully_resolved():
    c = preset("desk")
    d = yaml.safe_load(dump_config(c))
    back = PipelineConfig.from_dict(d)
    assert back.to_dict() == c.to_dict()
    assert set(d) == {"seed", "scene", "registration", "appearance", "packing", "codec", "eval"}


def test_overrides_and_seed(tmp_path):
    assert parse_override("codec.qp=25") == {"codec": {"qp": 25}}
    c = load_config(None, "desk", ["codec.qp=25", "packing.sorting=morton"], seed=7)
    assert c.codec.qp == 25 and c.packing.sorting == "morton"
    assert c.seed == c.scene.seed == c.registration.seed == c.appearance.seed == 7


@pytest.mark.parametrize("bad", [["codec.qp=-1"], ["packing.sorting=zigzag"], ["nonsense.key=1"], ["codec.qp"],
                                 ["registration.schedule.track_iters=5"]])
def test_bad_config_raises(bad):
    with pytest.raises(ConfigError):
        load_config(None, "desk", bad)


def test_cli_exit_codes(tmp_path):
    out = tmp_path / "w"
    assert main(["track", "--out", str(out)]) == EXIT_STAGE
    assert main(["encode", "--out", str(out)]) == EXIT_STAGE
    assert main(["gen", "--out", str(out), "--set", "codec.qp=-3"]) == EXIT_CONFIG
    (tmp_path / "broken.yaml").write_text("scene: [1, 2")
    assert main(["gen", "--out", str(out), "--config", str(tmp_path / "broken.yaml")]) == EXIT_CONFIG


def test_pipeline_completes(tiny_pipeline):
    out, codes = tiny_pipeline[0]
    assert codes == [EXIT_OK] * len(PIPELINE_STEPS)
    for p in ("config.yaml", "scene", "motion/frame_0003", "appearance/links.tal", "maps/plan.json",
              "stream/motion.tgc", "stream/appearance.tgc", "decoded/glut.tgl", "eval/metrics.tsv"):
        assert (out / p).exists(), p
    assert len(list((out / "renders" / "decoded-appearance").glob("*.png"))) == 3 * 4


def test_eval_columns_non_empty(tiny_pipeline):
    out, _ = tiny_pipeline[0]
    lines = (out / "eval" / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(METRIC_COLUMNS)
    rows = [dict(zip(METRIC_COLUMNS, l.split("\t"))) for l in lines[1:]]
    stages = {r["stage"] for r in rows}
    assert stages == {"motion", "appearance", "decoded-motion", "decoded-appearance"}
    for r in rows:
        assert all(r[c] != "" for c in METRIC_COLUMNS), r
    m = json.loads((out / "eval" / "metrics.json").read_text())
    assert "LPIPS" in m["note"]
    assert m["totals"]["appearance"]["compression_ratio"] > 1


def test_appearance_count_in_eval(tiny_pipeline):
    out, _ = tiny_pipeline[0]
    rows = json.loads((out / "eval" / "metrics.json").read_text())["rows"]
    for r in rows:
        assert r["appearance_active"] == 9 * r["motion_alive"]


def test_persisted_config_reproduces(tiny_pipeline):
    out, _ = tiny_pipeline[0]
    c = load_config(out / "config.yaml")
    assert dump_config(c) == (out / "config.yaml").read_text()


def test_rerun_identical_metrics(tiny_pipeline):
    (a, _), (b, _) = tiny_pipeline
    assert (a / "eval" / "metrics.tsv").read_bytes() == (b / "eval" / "metrics.tsv").read_bytes()
