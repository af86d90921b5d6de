"""Command-line entry point: ``vibe <stage> ...`` for every pipeline stage.

Each stage writes a JSON manifest next to its outputs holding the sha256 of
every input and output file, the resolved configuration, the seed and the
package version. Reruns with the same inputs, config and seed reproduce the
manifest byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from vibe import __version__
from vibe.behavior import evaluate_windows, mean_policy
from vibe.config import describe_keys, parse_config
from vibe.errors import StageFailure, VibeError
from vibe.geometry import Calibration, estimate_homography, ground_to_image, load_calibration, load_landmarks, \
    save_calibration
from vibe.imitation.demos import build_demonstrations
from vibe.imitation.env import Env, GaussianPolicy
from vibe.imitation.training import train_bc, train_gail, train_horizon_gail
from vibe.mot_metrics import id_metrics
from vibe.sim.scene import load_scene, save_scene
from vibe.sim.world import ReplayData
from vibe.synth import generate_traffic, render_detections, synth_camera
from vibe.tinynet import describe, read_checkpoint, write_checkpoint
from vibe.tracker import read_detections, read_trajectories, track_stream, write_detections, write_trajectories

ALGOS = ("bc", "gail", "horizon-gail")
STAGES = ("synth", "calibrate", "track", "mot-eval", "train", "evaluate")


# -- manifests ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(files):
    return {name: {"file": Path(p).name, "sha256": sha256_file(p)} for name, p in sorted(files.items())}


def write_manifest(path, stage, cfg, inputs, outputs, extra=None):
    """Manifest with content hashes only (no paths or timestamps) so reruns compare equal."""
    doc = {
        "stage": stage, "version": __version__, "seed": cfg.seed,
        "provenance": {"config_file": None if cfg.source is None else Path(cfg.source).name,
                       "overrides": list(cfg.overrides)},
        "config": cfg.to_dict(), "inputs": _hashes(inputs), "outputs": _hashes(outputs),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _file_manifest(out):
    return Path(str(out) + ".manifest.json")


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- shared helpers -------------------------------------------------------------

def resolve_config(args):
    """Config file and ``--set`` overrides, then the seed: --seed, config, VIBE_SEED, 0."""
    cfg = parse_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    seed = getattr(args, "seed", None)
    if seed is None and "seed" not in cfg.explicit and os.environ.get("VIBE_SEED"):
        seed = int(os.environ["VIBE_SEED"])
    return cfg if seed is None else cfg.with_seed(seed)


def _require(path, stage, what):
    if path is None or not Path(path).is_file():
        raise StageFailure(stage, f"{what} file not found: {path}")


def split_ids(trajectories, window, cls="car"):
    """Ids of ``cls`` trajectories lying entirely inside a ``[lo, hi)`` tick window."""
    lo, hi = window
    out = []
    for t in trajectories:
        f = t.frames()
        if t.cls == cls and f[0] >= lo and f[-1] < hi:
            out.append(t.id)
    return out


def _load_splits(directory):
    p = Path(directory) / "splits.json"
    return {k: tuple(v) for k, v in json.loads(p.read_text()).items()} if p.is_file() else None


def _make_env(cfg, scene_path, trajectories):
    return Env(load_scene(scene_path), ReplayData(trajectories), cfg.sim())


# -- stages ---------------------------------------------------------------------

def run_calibrate(args, cfg):
    _require(args.landmarks, "calibrate", "landmark")
    try:
        hom, rms = estimate_homography(load_landmarks(args.landmarks), return_residual=True)
    except (VibeError, ValueError) as err:
        raise StageFailure("calibrate", err) from err
    foot = (0.0, 0.0) if args.camera_foot is None else tuple(args.camera_foot)
    try:
        calib = Calibration(hom, camera_foot=foot, camera_height=args.camera_height)
    except ValueError as err:
        raise StageFailure("calibrate", err) from err
    save_calibration(calib, args.out)
    write_manifest(_file_manifest(args.out), "calibrate", cfg, {"landmarks": args.landmarks},
                   {"calibration": args.out}, {"rms_residual": rms})
    print(f"homography fitted, rms residual {rms:.3g} m")


def run_track(args, cfg):
    _require(args.detections, "track", "detections")
    _require(args.calib, "track", "calibration")
    try:
        dets = read_detections(args.detections)
        out = track_stream(dets, load_calibration(args.calib), cfg.tracker(), mode=args.mode)
    except (VibeError, ValueError, KeyError) as err:
        raise StageFailure("track", err) from err
    write_trajectories(out, args.out)
    write_manifest(_file_manifest(args.out), "track", cfg,
                   {"detections": args.detections, "calibration": args.calib}, {"trajectories": args.out},
                   {"mode": args.mode})
    print(f"{len(out)} trajectories from {len(dets)} detections")


def run_mot_eval(args, cfg):
    _require(args.truth, "mot-eval", "truth")
    _require(args.computed, "mot-eval", "computed")
    radius = cfg.eval().mot_radius if args.radius is None else args.radius
    rep = id_metrics(read_trajectories(args.truth), read_trajectories(args.computed), radius)
    print(rep.table())
    if args.out:
        _dump_json({k: getattr(rep, k) for k in ("NT", "IDF1", "IDP", "IDR", "IDTP", "IDFP", "IDFN")}, args.out)
        write_manifest(_file_manifest(args.out), "mot-eval", cfg, {"truth": args.truth, "computed": args.computed},
                       {"report": args.out}, {"radius": radius})
    return rep


def _landmarks(calib, cfg):
    r = cfg.outer_radius + cfg.arm_length * 0.5
    ground = [(x, y) for x in (-r, -r / 3, r / 3, r) for y in (-r, 0.0, r)]
    return [(*ground_to_image(g, "pedestrian", calib), *g) for g in ground]


def run_synth(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scfg, dcfg = cfg.synth(), cfg.data()
    data = generate_traffic(scfg)
    calib = synth_camera(scfg).calibration()
    cars = [t for t in data.trajectories if t.cls == "car"][:dcfg.detection_identities]
    files = {"scene": out / "scene.txt", "trajectories": out / "trajectories.jsonl",
             "truth": out / "truth.jsonl", "detections": out / "detections.jsonl",
             "calibration": out / "calibration.txt", "landmarks": out / "landmarks.txt", "splits": out / "splits.json"}
    save_scene(data.scene, files["scene"])
    write_trajectories(data.trajectories, files["trajectories"])
    write_trajectories(cars, files["truth"])
    write_detections(render_detections(cars, calib, scfg, cfg.seed + dcfg.detection_seed), files["detections"])
    save_calibration(calib, files["calibration"])
    files["landmarks"].write_text("".join(" ".join(repr(float(v)) for v in row) + "\n"
                                          for row in _landmarks(calib, scfg)))
    _dump_json({k: list(v) for k, v in data.splits.items()}, files["splits"])
    write_manifest(out / "manifest.json", "synth", cfg, {}, files)
    print(f"{len(data.trajectories)} trajectories, {len(cars)} identities rendered to {out}")


def run_train(args, cfg):
    demos_dir = Path(args.demos)
    _require(demos_dir / "trajectories.jsonl", "train", "demonstration trajectories")
    _require(args.scene, "train", "scene")
    splits = _load_splits(demos_dir)
    if splits is None:
        raise StageFailure("train", f"no splits.json in {demos_dir}")
    trajectories = read_trajectories(demos_dir / "trajectories.jsonl")
    env = _make_env(cfg, args.scene, trajectories)
    ids = split_ids(trajectories, splits["train"])[:cfg.data().demos]
    val_lo, val_hi = splits["val"]
    val_window = (val_lo, min(cfg.eval().ticks, val_hi - val_lo))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ckpt = out / "log.jsonl", out / "policy.ckpt"
    demos = build_demonstrations(env, ids)
    meta = {"algo": args.algo, "seed": cfg.seed, "version": __version__, "demos": len(ids)}
    if args.algo == "bc":
        val = build_demonstrations(env, split_ids(trajectories, splits["val"]), "val")
        params, history = train_bc(env, demos, val, cfg.bc(), cfg.seed, cfg.gail().dense_layers)
        log = [{"epoch": e, "train_nll": tr, "val_nll": va} for e, tr, va in history]
        meta["best_val_nll"] = min(h[2] for h in history)
    else:
        fn = train_horizon_gail if args.algo == "horizon-gail" else train_gail
        res = fn(env, demos, ids, cfg.gail(), val_window=val_window, report=cfg.report())
        params, log = res.policy_params, res.log
        meta.update(best_epoch=res.best_epoch, best_jsd=res.best_jsd)
    write_checkpoint(ckpt, env.policy_spec(cfg.gail().dense_layers), params, meta)
    with open(log_path, "w") as fh:
        fh.write(json.dumps({"config": cfg.to_dict(), "seed": cfg.seed, "algo": args.algo}, sort_keys=True) + "\n")
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    inputs = {"trajectories": demos_dir / "trajectories.jsonl", "splits": demos_dir / "splits.json",
              "scene": args.scene}
    write_manifest(out / "manifest.json", "train", cfg, inputs, {"checkpoint": ckpt, "log": log_path},
                   {"algo": args.algo})
    print(f"{args.algo}: checkpoint written to {ckpt}")


def run_evaluate(args, cfg):
    for p, what in ((args.checkpoint, "checkpoint"), (args.scene, "scene"), (args.trajectories, "trajectories")):
        _require(p, "evaluate", what)
    spec, params, meta = read_checkpoint(args.checkpoint)
    trajectories = read_trajectories(args.trajectories)
    env = _make_env(cfg, args.scene, trajectories)
    ecfg = cfg.eval()
    windows = ecfg.windows if args.windows is None else args.windows
    ticks = ecfg.ticks if args.ticks is None else args.ticks
    start = args.start
    if start is None:
        splits = _load_splits(Path(args.trajectories).parent)
        start = splits[ecfg.split][0] if splits else int(env.replay.start.min())
    starts = [start + k * ticks for k in range(windows)]
    traces = [] if args.dump_traces else None
    rep = evaluate_windows(mean_policy(GaussianPolicy(spec, params)), env, starts, ticks, cfg.report(),
                           split=(start, start + windows * ticks), traces=traces)
    _dump_json(rep.to_dict(), args.out)
    outputs = {"report": args.out}
    if traces is not None:
        tdir = Path(args.dump_traces)
        tdir.mkdir(parents=True, exist_ok=True)
        for k, rows in enumerate(traces):
            p = tdir / f"window_{k}.jsonl"
            with open(p, "w") as fh:
                for t, i, x, y, vx, vy in rows:
                    fh.write(json.dumps({"tick": t, "id": i, "x": x, "y": y, "vx": vx, "vy": vy}) + "\n")
            outputs[f"traces_{k}"] = p
    inputs = {"checkpoint": args.checkpoint, "scene": args.scene, "trajectories": args.trajectories}
    write_manifest(_file_manifest(args.out), "evaluate", cfg, inputs, outputs, {"starts": starts, "ticks": ticks})
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return rep


def run_replay(args, cfg):
    _require(args.scene, "replay", "scene")
    _require(args.trajectories, "replay", "trajectories")
    rep = ReplayData(read_trajectories(args.trajectories))
    with open(args.out, "w") as fh:
        for t in range(args.start, args.start + args.ticks):
            agents = [{"id": int(rep.ids[r]), "class": rep.classes[r],
                       "x": float(rep.pos[r, t, 0]), "y": float(rep.pos[r, t, 1]),
                       "vx": float(rep.vel[r, t, 0]), "vy": float(rep.vel[r, t, 1]),
                       "heading": float(rep.heading[r, t])} for r in rep.active_rows(t)]
            fh.write(json.dumps({"tick": t, "agents": agents}) + "\n")
    write_manifest(_file_manifest(args.out), "replay", cfg,
                   {"scene": args.scene, "trajectories": args.trajectories}, {"states": args.out},
                   {"from": args.start, "ticks": args.ticks})


def run_net_info(args, cfg):
    spec, _, meta = read_checkpoint(args.checkpoint)
    print(describe(spec, meta))


def run_pipeline(args, cfg):
    """Run the requested stages in dependency order under one output directory."""
    stages = [s for s in STAGES if s in set(args.stages.split(","))]
    unknown = set(args.stages.split(",")) - set(STAGES)
    if unknown:
        raise StageFailure("pipeline", f"unknown stages {sorted(unknown)}")
    root = Path(args.out_dir)
    data = root / "synth"
    ns = argparse.Namespace
    for stage in stages:
        try:
            if stage == "synth":
                run_synth(ns(out_dir=data), cfg)
            elif stage == "calibrate":
                cam = cfg.synth().camera_position
                run_calibrate(ns(landmarks=data / "landmarks.txt", out=root / "calibration.txt",
                                 camera_foot=cam[:2], camera_height=cam[2]), cfg)
            elif stage == "track":
                calib = root / "calibration.txt" if (root / "calibration.txt").is_file() else data / "calibration.txt"
                run_track(ns(detections=data / "detections.jsonl", calib=calib, out=root / "tracks.jsonl",
                             mode="full"), cfg)
            elif stage == "mot-eval":
                run_mot_eval(ns(truth=data / "truth.jsonl", computed=root / "tracks.jsonl", radius=None,
                                out=root / "mot.json"), cfg)
            elif stage == "train":
                run_train(ns(algo=args.algo, demos=data, scene=data / "scene.txt", out=root / args.algo), cfg)
            elif stage == "evaluate":
                run_evaluate(ns(checkpoint=root / args.algo / "policy.ckpt", scene=data / "scene.txt",
                                trajectories=data / "trajectories.jsonl", windows=None, ticks=None, start=None,
                                out=root / "report.json", dump_traces=None), cfg)
        except StageFailure:
            raise
        except (VibeError, OSError, ValueError, KeyError) as err:
            raise StageFailure(stage, err) from err


# -- argument parsing -----------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="JSON config file (see `vibe --help` for keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (falls back to the config, then VIBE_SEED)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="vibe", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Video-to-behaviour pipeline: calibration, tracking, replay simulation and imitation learning.",
        epilog="configuration keys and defaults:\n" + describe_keys())
    ap.add_argument("--version", action="version", version=f"vibe {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the image-to-ground homography from landmarks")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--camera-foot", type=float, nargs=2, metavar=("X", "Y"),
                   help="ground point below the camera, for the parallax of raised box points")
    p.add_argument("--camera-height", type=float, default=10.0, help="camera height above the ground (m)")
    _common(p, seed=False)
    p.set_defaults(func=run_calibrate)

    p = sub.add_parser("track", help="track detections into ground-plane trajectories")
    p.add_argument("--detections", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("full", "iou"), default="full")
    _common(p, seed=False)
    p.set_defaults(func=run_track)

    p = sub.add_parser("mot-eval", help="IDF1 / IDP / IDR of computed against true trajectories")
    p.add_argument("--truth", required=True)
    p.add_argument("--computed", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--out")
    _common(p, seed=False)
    p.set_defaults(func=run_mot_eval)

    p = sub.add_parser("synth", help="generate a synthetic roundabout, traffic and detections")
    p.add_argument("--out-dir", required=True)
    _common(p)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("train", help="train a policy with BC, GAIL or horizon GAIL")
    p.add_argument("--algo", choices=ALGOS, required=True)
    p.add_argument("--demos", required=True, help="directory with trajectories.jsonl and splits.json")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    _common(p)
    p.set_defaults(func=run_train)

    p = sub.add_parser("evaluate", help="closed-loop behaviour metrics of a policy checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--windows", type=int)
    p.add_argument("--ticks", type=int)
    p.add_argument("--from", dest="start", type=int, help="first tick (default: start of eval.split)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-traces", help="directory for per-tick positions")
    _common(p)
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("replay", help="dump replayed agent states per tick")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--from", dest="start", type=int, required=True)
    p.add_argument("--ticks", type=int, required=True)
    p.add_argument("--out", required=True)
    _common(p, seed=False)
    p.set_defaults(func=run_replay)

    p = sub.add_parser("net-info", help="print a checkpoint's architecture and metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=run_net_info)

    p = sub.add_parser("pipeline", help="run several stages in dependency order")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of " + ",".join(STAGES))
    p.add_argument("--algo", choices=ALGOS, default="horizon-gail")
    _common(p)
    p.set_defaults(func=run_pipeline)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except VibeError as err:
        print(f"vibe {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
