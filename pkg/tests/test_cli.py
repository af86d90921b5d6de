import json
from pathlib import Path

import numpy as np
import pytest

from vibe import cli
from vibe.config import SCHEMA, parse_config
from vibe.errors import BadMagic, ConfigError, MissingRequired, StageFailure, TypeMismatch, UnknownKey
from vibe.geometry import load_calibration
from vibe.synth import SynthConfig, synth_camera
from vibe.tinynet import read_checkpoint
from vibe.tracker import read_trajectories

GOLDEN = Path(__file__).parent / "golden" / "help.txt"
SMALL = ["synth.train_ticks=2000", "synth.val_ticks=1200", "synth.test_ticks=1200", "synth.gap_ticks=100"]


def sets(*items):
    return [a for item in items for a in ("--set", item)]


# -- configuration ------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "run.json"
    f.write_text("")
    cfg = parse_config(f)
    assert cfg.values == {k: d for k, (_, d) in SCHEMA.items()}
    assert cfg.gail().ppo.clip == 0.2 and cfg.seed == 0


def test_override_and_precedence(tmp_path):
    f = tmp_path / "run.json"
    f.write_text(json.dumps({"ppo": {"clip": 0.3, "gamma": 0.9}, "seed": 4}))
    cfg = parse_config(f, ["ppo.clip=0.1"])
    assert cfg.gail().ppo.clip == 0.1 and cfg.gail().ppo.gamma == 0.9
    assert cfg.seed == 4 and cfg.gail().seed == 4
    assert cfg.to_dict()["ppo"]["clip"] == 0.1


def test_type_mismatch_names_key(tmp_path):
    f = tmp_path / "run.json"
    f.write_text(json.dumps({"ppo": {"clip": "fast"}}))
    with pytest.raises(TypeMismatch, match="ppo.clip"):
        parse_config(f)
    with pytest.raises(TypeMismatch, match="ppo.epochs_per_batch"):
        parse_config(None, ["ppo.epochs_per_batch=1.5"])
    with pytest.raises(TypeMismatch, match="tracker.post_filter"):
        parse_config(None, ["tracker.post_filter=1"])


def test_unknown_and_missing_keys():
    with pytest.raises(UnknownKey, match="ppo.clipp"):
        parse_config(None, ["ppo.clipp=0.1"])
    with pytest.raises(MissingRequired, match="gail.epochs"):
        parse_config(None, ["seed=1"], required=("gail.epochs",))
    with pytest.raises(MissingRequired):
        parse_config(None, ["ppo.clip"])
    assert parse_config(None, ["gail.epochs=3"], required=("gail.epochs",)).gail().epochs == 3


def test_range_checks_surface_section():
    with pytest.raises(ConfigError, match="ppo"):
        parse_config(None, ["ppo.clip=1.5"])


def test_typed_containers():
    cfg = parse_config(None, ["gail.dense_layers=[32, 16]", "schedule.cap=3", "gail.init_log_std=-1",
                              'synth.footprints={"car": 1.2, "bus": 2, "truck": 2, "pedestrian": 0.3, "bicycle": 0.5}'])
    g = cfg.gail()
    assert g.dense_layers == (32, 16) and g.schedule.cap == 3 and g.init_log_std == -1.0
    assert cfg.synth().footprints["car"] == 1.2
    assert parse_config(None, ["schedule.cap=null"]).gail().schedule.cap is None


def test_help_lists_every_key_golden(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    text = cli.build_parser().format_help()
    for key in SCHEMA:
        assert f"  {key} = " in text
    assert text == GOLDEN.read_text()


def test_seed_fallback(monkeypatch):
    parser = cli.build_parser()
    args = parser.parse_args(["synth", "--out-dir", "x"])
    monkeypatch.setenv("VIBE_SEED", "7")
    assert cli.resolve_config(args).seed == 7
    args = parser.parse_args(["synth", "--out-dir", "x", "--seed", "3"])
    assert cli.resolve_config(args).seed == 3
    args = parser.parse_args(["synth", "--out-dir", "x", "--set", "seed=5"])
    assert cli.resolve_config(args).seed == 5
    monkeypatch.delenv("VIBE_SEED")
    assert cli.resolve_config(parser.parse_args(["synth", "--out-dir", "x"])).seed == 0


# -- stages -------------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out-dir", str(out), "--seed", "0"] + sets(*SMALL)) == 0
    return out


def test_synth_outputs_and_determinism(synth_dir, tmp_path):
    names = {"scene.txt", "trajectories.jsonl", "truth.jsonl", "detections.jsonl", "calibration.txt",
             "landmarks.txt", "splits.json", "manifest.json"}
    assert names <= {p.name for p in synth_dir.iterdir()}
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--seed", "0"] + sets(*SMALL)) == 0
    for name in names:
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["outputs"]["detections"]["sha256"] == cli.sha256_file(synth_dir / "detections.jsonl")
    assert manifest["seed"] == 0 and manifest["config"]["synth"]["train_ticks"] == 2000
    assert len(read_trajectories(synth_dir / "truth.jsonl")) == 20


def test_calibrate_recovers_camera(synth_dir, tmp_path):
    out = tmp_path / "calib.txt"
    cam = SynthConfig().camera_position
    assert cli.main(["calibrate", "--landmarks", str(synth_dir / "landmarks.txt"), "--out", str(out),
                     "--camera-foot", str(cam[0]), str(cam[1]), "--camera-height", str(cam[2])]) == 0
    fitted = load_calibration(out).homography.matrix
    truth = synth_camera(SynthConfig()).calibration().homography.matrix
    np.testing.assert_allclose(fitted, truth, rtol=1e-7, atol=1e-12)
    assert Path(str(out) + ".manifest.json").is_file()


def test_pipeline_perfect_detections_give_idf1_one(tmp_path):
    overrides = SMALL + ["synth.dropout=0.0", "synth.position_noise=0.0", "data.detection_identities=8"]
    assert cli.main(["pipeline", "--out-dir", str(tmp_path), "--stages", "synth,calibrate,track,mot-eval"]
                    + sets(*overrides)) == 0
    rep = json.loads((tmp_path / "mot.json").read_text())
    assert rep["IDF1"] == 1.0 and rep["NT"] == 8


def test_missing_detections_is_track_failure(synth_dir, tmp_path, capsys):
    args = cli.build_parser().parse_args(["track", "--detections", str(tmp_path / "none.jsonl"),
                                          "--calib", str(synth_dir / "calibration.txt"), "--out", str(tmp_path / "t")])
    with pytest.raises(StageFailure) as err:
        cli.run_track(args, cli.resolve_config(args))
    assert err.value.stage == "track"
    assert cli.main(["track", "--detections", str(tmp_path / "none.jsonl"), "--calib",
                     str(synth_dir / "calibration.txt"), "--out", str(tmp_path / "t")]) == 2
    assert "track" in capsys.readouterr().err


def test_mot_eval_table(synth_dir, capsys):
    truth = str(synth_dir / "truth.jsonl")
    assert cli.main(["mot-eval", "--truth", truth, "--computed", truth, "--radius", "1.0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["NT", "IDF1", "IDP", "IDR"]
    assert lines[1].split() == ["20", "100.0%", "100.0%", "100.0%"]


def test_train_evaluate_replay_and_net_info(synth_dir, tmp_path, capsys):
    ckdir = tmp_path / "bc"
    common = sets(*SMALL, "bc.epochs=2", "data.demos=5", "gail.dense_layers=[16, 8]")
    assert cli.main(["train", "--algo", "bc", "--demos", str(synth_dir), "--scene", str(synth_dir / "scene.txt"),
                     "--out", str(ckdir), "--seed", "0"] + common) == 0
    spec, params, meta = read_checkpoint(ckdir / "policy.ckpt")
    assert meta["algo"] == "bc" and spec.dense_layers == (16, 8)
    header = json.loads((ckdir / "log.jsonl").read_text().splitlines()[0])
    assert header["config"]["bc"]["epochs"] == 2

    report = tmp_path / "report.json"
    traces = tmp_path / "traces"
    assert cli.main(["evaluate", "--checkpoint", str(ckdir / "policy.ckpt"), "--scene", str(synth_dir / "scene.txt"),
                     "--trajectories", str(synth_dir / "trajectories.jsonl"), "--windows", "1", "--ticks", "1000",
                     "--out", str(report), "--dump-traces", str(traces)] + common) == 0
    rep = json.loads(report.read_text())
    assert set(rep) >= {"jsd_speed", "jsd_occupancy", "jsd_joint", "collision_probability",
                        "exit_failure_probability"}
    assert 0.0 <= rep["jsd_joint"] <= np.log(2)
    first = json.loads((traces / "window_0.jsonl").read_text().splitlines()[0])
    assert set(first) == {"tick", "id", "x", "y", "vx", "vy"}

    states = tmp_path / "states.jsonl"
    assert cli.main(["replay", "--scene", str(synth_dir / "scene.txt"), "--trajectories",
                     str(synth_dir / "trajectories.jsonl"), "--from", "100", "--ticks", "5", "--out", str(states)]) == 0
    rows = [json.loads(line) for line in states.read_text().splitlines()]
    assert [r["tick"] for r in rows] == [100, 101, 102, 103, 104]

    capsys.readouterr()
    assert cli.main(["net-info", str(ckdir / "policy.ckpt")]) == 0
    assert "head: gaussian_policy" in capsys.readouterr().out


def test_net_info_rejects_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(BadMagic):
        read_checkpoint(p)
    assert cli.main(["net-info", str(p)]) == 2
