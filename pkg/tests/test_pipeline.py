import math
import os
from pathlib import Path

import pytest

from dseg import IGNORE
from dseg._toml import loads_toml
from dseg.cli import main
from dseg.config import ConfigError, PipelineConfig, dump_config, load_config, parse_config
from dseg.netpbm import read_pgm
from dseg.pipeline import (STAGES, FrameEntry, FrameManifest, Pipeline, StageError, derive_seed,
                           load_manifest, write_manifest)

GOLDEN = Path(__file__).parent / "golden"
GOLDEN_CONFIG = GOLDEN / "pipeline20.toml"


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def small_config(out: Path, **synth) -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.run.out_dir = str(out)
    cfg.synth.n_frames = 3
    cfg.synth.width, cfg.synth.height = 64, 48
    cfg.cluster.k = 4
    cfg.train.epochs = 2
    cfg.train.batch = 2
    cfg.train.pixels_per_frame = 256
    for key, value in synth.items():
        setattr(cfg.synth, key, value)
    return cfg.validate()


# -- configuration -----------------------------------------------------------

def test_defaults():
    cfg = load_config(None)
    assert cfg.cluster.k == 30
    assert cfg.train.lr == 2e-4
    assert cfg.train.crop_size == 512 and cfg.train.augment is False
    assert cfg.projection.max_radius == 8.0
    assert cfg.rangeseg.theta == pytest.approx(math.radians(10))


@pytest.mark.parametrize("text", [
    "[cluster]\nkk = 3\n",
    "[clusters]\nk = 3\n",
    "[cluster]\nk = 'three'\n",
    "[cluster]\nk = 2.5\n",
    "[refine]\ninclude_ground = 1\n",
    "[train]\noptimizer = 'rmsprop'\n",
    "[cluster]\nk = 0\n",
    "[synth]\nnoise_sigma = -1.0\n",
    "cluster = 3\n",
    "[cluster\n",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_round_trip():
    cfg = parse_config("[cluster]\nk = 12\n[train]\nlr = 0.03\naugment = true\n[synth]\nlidar_height = 2\n")
    assert cfg.synth.lidar_height == 2.0 and isinstance(cfg.synth.lidar_height, float)
    assert parse_config(dump_config(cfg)) == cfg


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_show_config(capsys):
    assert main(["show-config", "--config", str(GOLDEN_CONFIG)]) == 0
    shown = parse_config(capsys.readouterr().out)
    assert shown == load_config(GOLDEN_CONFIG)


def test_derive_seed_salts():
    seeds = {derive_seed(0, s, i) for s in ("synth", "cluster", "teacher", "student") for i in range(3)}
    assert len(seeds) == 12
    assert derive_seed(5, "synth", 2) == derive_seed(5, "synth", 2)


# -- manifest ----------------------------------------------------------------

def test_manifest_round_trip_and_errors(tmp_path):
    cfg = small_config(tmp_path / "out", n_frames=2)
    Pipeline(cfg).run("synth")
    m = load_manifest(cfg.manifest_path())
    assert m.ids() == ["frame_0000", "frame_0001"]
    dup = FrameManifest([m.frames[0], FrameEntry("frame_0000", m.frames[1].directory)])
    write_manifest(tmp_path / "dup.toml", dup)
    with pytest.raises(StageError, match="duplicate"):
        load_manifest(tmp_path / "dup.toml")
    (m.frames[1].directory / "image.ppm").unlink()
    with pytest.raises(StageError, match="image"):
        load_manifest(cfg.manifest_path())
    with pytest.raises(StageError, match="missing manifest"):
        load_manifest(tmp_path / "absent.toml")


# -- stages ------------------------------------------------------------------

def test_segment_writes_one_map_per_frame(tmp_path):
    cfg = small_config(tmp_path)
    pipe = Pipeline(cfg)
    pipe.run("synth")
    pipe.run("segment")
    maps = sorted((tmp_path / "segment").glob("*.pgm"))
    assert [p.stem for p in maps] == ["frame_0000", "frame_0001", "frame_0002"]
    seg = read_pgm(maps[0])
    assert seg.shape == (cfg.synth.beams, cfg.synth.azimuth_steps)


def test_eval_without_model_names_file(tmp_path, capsys):
    cfg = small_config(tmp_path)
    Pipeline(cfg).run("synth")
    (tmp_path / "cfg.toml").write_text(dump_config(cfg))
    code = main(["eval", "--config", str(tmp_path / "cfg.toml")])
    assert code != 0
    assert "model.bin" in capsys.readouterr().err


def test_missing_upstream_names_path(tmp_path):
    cfg = small_config(tmp_path)
    pipe = Pipeline(cfg)
    pipe.run("synth")
    with pytest.raises(StageError, match="frame_0000.pgm"):
        pipe.run("project")


def test_unknown_stage(tmp_path):
    with pytest.raises(StageError):
        Pipeline(small_config(tmp_path)).run("bogus")


def test_empty_manifest(tmp_path, capsys):
    cfg = small_config(tmp_path, n_frames=0)
    (tmp_path / "cfg.toml").write_text(dump_config(cfg))
    assert main(["pipeline", "--config", str(tmp_path / "cfg.toml")]) != 0
    assert "empty manifest" in capsys.readouterr().err


def test_seed_override(tmp_path):
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(dump_config(small_config(tmp_path / "a", n_frames=1)))
    assert main(["synth", "--config", str(cfg_path), "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    meta = loads_toml((tmp_path / "b" / "frames" / "frame_0000" / "meta.toml").read_text())
    assert meta["seed"] == derive_seed(3, "synth", 0)


# -- full runs ---------------------------------------------------------------

@pytest.fixture(scope="module")
def golden_runs(tmp_path_factory):
    """The golden configuration run twice: with 8 worker threads and with 1."""
    root = tmp_path_factory.mktemp("golden")
    saved = os.environ.get("DSEG_THREADS")
    outs = {}
    try:
        for threads in ("8", "1"):
            os.environ["DSEG_THREADS"] = threads
            out = root / f"t{threads}"
            assert main(["pipeline", "--config", str(GOLDEN_CONFIG), "--out", str(out)]) == 0
            outs[threads] = out
    finally:
        if saved is None:
            os.environ.pop("DSEG_THREADS", None)
        else:
            os.environ["DSEG_THREADS"] = saved
    return outs


@pytest.mark.slow
def test_golden_reports(golden_runs):
    out = golden_runs["8"] / "eval"
    for name in ("student_report.toml", "teacher_report.toml", "student_confusion.csv"):
        assert (out / name).read_bytes() == (GOLDEN / name).read_bytes(), name
    report = loads_toml((out / "student_report.toml").read_text())
    assert report["miou_defined"] and 0.0 <= report["pixel_accuracy"] <= 1.0


@pytest.mark.slow
def test_thread_count_does_not_change_artifacts(golden_runs):
    a, b = tree_bytes(golden_runs["8"]), tree_bytes(golden_runs["1"])
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


@pytest.mark.slow
def test_rerunning_a_stage_is_byte_identical(golden_runs, tmp_path):
    cfg = load_config(GOLDEN_CONFIG)
    cfg.run.out_dir = str(golden_runs["1"])
    before = tree_bytes(golden_runs["1"])
    pipe = Pipeline(cfg)
    for stage in STAGES[1:]:
        pipe.run(stage)
    assert tree_bytes(golden_runs["1"]) == before


@pytest.mark.slow
def test_pipeline_artifacts_complete(golden_runs):
    out = golden_runs["8"]
    for name in ("teacher_report.toml", "student_report.toml", "teacher_confusion.csv",
                 "student_confusion.csv", "refinement.toml"):
        assert (out / "eval" / name).exists()
    refined = read_pgm(out / "refine" / "frame_0000.pgm")
    assert (refined != IGNORE).all() and refined.min() >= 1 and refined.max() <= 8
    rows = (out / "eval" / "student_confusion.csv").read_text().splitlines()[1:]
    for row in rows:
        vals = [float(v) for v in row.split(",")[1:]]
        assert sum(vals) == pytest.approx(1.0) or sum(vals) == 0.0
