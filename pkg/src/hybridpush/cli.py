"""``hybridpush`` command-line interface.

Every command is a function of the resolved configuration and its input
files.  Each run writes its outputs plus ``<command>.manifest.json``;
``hybridpush replay MANIFEST`` re-executes the run from the manifest.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Callable


from . import __version__
from . import config as C
from .dynamics import ParameterError, PusherSlider
from .learning import Dataset, LabelContext, MlpClassifier, evaluate, generate_dataset, train
from .mpc import MpcProblem, NominalInfeasibleError, build_nominal_figure8
from .sim import (LearnedController, MiqpController, OpenLoopController, FixedScheduleController,
                  SimConfig, SimulationError, bandwidth_benchmark, lateral_perturbation,
                  mode_map_csv, mode_region_map, run_closed_loop)

log = logging.getLogger("hybridpush")

MANIFEST_SUFFIX = ".manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# file helpers

def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _read_text(path) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# shared setup

def _model_and_traj(cfg):
    model = PusherSlider(C.physical_params(cfg))
    traj = build_nominal_figure8(model, cfg["trajectory.radius"], cfg["trajectory.speed"])
    return model, traj


def _load_classifier(inputs, cfg) -> MlpClassifier:
    if "model" not in inputs:
        raise UsageError("this command needs --model")
    clf = MlpClassifier.loads(_read_text(inputs["model"]))
    if tuple(clf.segment_lengths) != tuple(cfg["mpc.segments"]):
        raise UsageError("model segment structure does not match mpc.segments")
    return clf


# --------------------------------------------------------------------------
# commands: (cfg, inputs, out_dir) -> {name: text}; names in NONDETERMINISTIC
# carry wall-clock measurements and are excluded from replay comparison

def cmd_gen_trajectory(cfg, inputs, out: Path) -> dict[str, str]:
    if not (cfg["trajectory.radius"] > 0 and cfg["trajectory.speed"] > 0 and cfg["trajectory.period"] > 0):
        raise UsageError("trajectory radius, speed and period must be positive")
    model, traj = _model_and_traj(cfg)
    nc = model.n_c
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "theta", "phi", *(f"fn{i + 1}" for i in range(nc)),
                *(f"ft{i + 1}" for i in range(nc)), "phidot"])
    n = int(math.floor(traj.lap_time / cfg["trajectory.period"] + 1e-9)) + 1
    for i in range(n):
        t = min(i * cfg["trajectory.period"], traj.lap_time)
        w.writerow([repr(float(v)) for v in (t, *traj.state(t), *traj.input(t))])
    info = {"lap_time": traj.lap_time, "lap_length": traj.lap_time * cfg["trajectory.speed"],
            "arcs": [{"duration": a.duration, "twist": list(map(float, a.twist)), "u": list(map(float, a.u))}
                     for a in traj.arcs]}
    print(f"lap time {traj.lap_time:.4f} s, {n} samples")
    return {"trajectory.csv": buf.getvalue(), "trajectory.json": json.dumps(info, indent=2) + "\n"}


def cmd_gen_dataset(cfg, inputs, out: Path) -> dict[str, str]:
    model, traj = _model_and_traj(cfg)
    ctx = LabelContext(model, traj, C.mpc_config(cfg))
    spec = C.sampling_spec(cfg)
    stop = cfg["sampling.stop"] if cfg["sampling.stop"] is not None else spec.count
    last = [0.0]

    def progress(done, total):
        now = time.monotonic()
        if now - last[0] > 5 or done == total:
            last[0] = now
            print(f"labelled {done}/{total}", file=sys.stderr, flush=True)

    ds = generate_dataset(ctx, spec, cfg["sampling.start"], stop, jobs=cfg.get("jobs", 1), progress=progress)
    print(f"kept {len(ds)} examples, discarded {ds.discarded}")
    return {"dataset.csv": ds.to_csv()}


def cmd_train(cfg, inputs, out: Path) -> dict[str, str]:
    paths = inputs.get("dataset")
    if not paths:
        raise UsageError("train needs --dataset")
    segs = cfg["mpc.segments"]
    parts = [Dataset.from_csv(_read_text(p), segs) for p in paths]
    data = parts[0]
    for p in parts[1:]:
        data = data.concat(p)
    if len(data) == 0:
        raise UsageError("dataset is empty")
    tr, va = data.split(1.0 - cfg["train.val_fraction"])
    clf = train(tr, va if len(va) else None, C.train_config(cfg))
    report = {"train": evaluate(clf, tr).to_dict(), "loss_curve": clf.history}
    if len(va):
        rep = evaluate(clf, va)
        report["validation"] = rep.to_dict()
        print(rep.format())
    return {"model.json": clf.dumps() + "\n", "metrics.json": json.dumps(report, indent=2) + "\n"}


def _controller(cfg, inputs, model, traj):
    kind = cfg["sim.controller"]
    mc = C.mpc_config(cfg)
    if kind == "open_loop":
        return OpenLoopController(traj)
    if kind == "learned":
        return LearnedController(model, traj, mc, _load_classifier(inputs, cfg))
    if kind in ("miqp", "miqp_bnb"):
        return MiqpController(model, traj, mc, "enumerate" if kind == "miqp" else "bnb")
    if kind == "sticking":
        return FixedScheduleController(model, traj, mc)
    raise UsageError(f"unknown controller {kind!r} (open_loop, learned, miqp, miqp_bnb, sticking)")


def cmd_simulate(cfg, inputs, out: Path) -> dict[str, str]:
    model, traj = _model_and_traj(cfg)
    ctrl = _controller(cfg, inputs, model, traj)
    perts = tuple(lateral_perturbation(traj, t, mag) for t, mag in C.parse_perturbations(cfg["sim.perturbations"]))
    sim = SimConfig(plant_step=cfg["sim.plant_step"], controller_period=cfg["sim.controller_period"],
                    duration=cfg["sim.duration"], laps=cfg["sim.laps"], perturbations=perts,
                    sensor_noise=cfg["sim.sensor_noise"], seed=cfg["seed"], mu_g_offset=cfg["sim.mu_g_offset"],
                    initial_error=cfg["sim.initial_error"])
    try:
        sim.validate(traj)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result = run_closed_loop(model.params, traj, ctrl, sim)
    except SimulationError as exc:
        if exc.log is None:
            raise
        result = exc.log
        print(f"simulation terminated: {exc}", file=sys.stderr)
    summary = result.summary()
    timing = cfg["sim.timing"]
    if not timing:
        summary.pop("mean_solve_time")
        summary.pop("max_solve_time")
    print(json.dumps(summary))
    return {"tracking.csv": result.to_csv(model.n_c, timing=timing),
            "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n"}


def cmd_bench(cfg, inputs, out: Path) -> dict[str, str]:
    model, traj = _model_and_traj(cfg)
    clf = _load_classifier(inputs, cfg)
    if cfg["bench.trials"] < 1:
        raise UsageError("bench.trials must be >= 1")
    rep = bandwidth_benchmark(model, traj, C.mpc_config(cfg), clf, trials=cfg["bench.trials"],
                              std=cfg["sampling.std"], seed=cfg["seed"],
                              enumerate_checks=cfg["bench.enumerate_checks"], warmup=cfg["bench.warmup"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "ex", "ey", "etheta", "ephi", "learned_schedule", "miqp_schedule",
                "enumeration_schedule", "miqp_objective"])
    for row in rep.rows:
        w.writerow([*(repr(float(v)) for v in row[:5]), *row[5:8], repr(float(row[8]))])
    print(rep.to_json())
    return {"bench.csv": buf.getvalue(), "timing.json": rep.to_json() + "\n"}


def cmd_mode_map(cfg, inputs, out: Path) -> dict[str, str]:
    model, traj = _model_and_traj(cfg)
    ex, ey = C.parse_range(cfg["map.ex"]), C.parse_range(cfg["map.ey"])
    source = _load_classifier(inputs, cfg) if "model" in inputs else MpcProblem(model, traj, 0.0, C.mpc_config(cfg))
    grid = mode_region_map(source, ex, ey, math.radians(cfg["map.etheta_deg"]), math.radians(cfg["map.ephi_deg"]))
    return {"mode_map.csv": mode_map_csv(grid, ex, ey)}


COMMANDS: dict[str, Callable] = {
    "gen-trajectory": cmd_gen_trajectory,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "mode-map": cmd_mode_map,
}
NONDETERMINISTIC = {"bench": ("timing.json",)}


# --------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag -> config key for subcommand options
FLAG_KEYS = {
    "gen-trajectory": {"radius": "trajectory.radius", "speed": "trajectory.speed", "period": "trajectory.period"},
    "gen-dataset": {"count": "sampling.count", "start": "sampling.start", "stop": "sampling.stop"},
    "train": {"epochs": "train.epochs", "lr": "train.lr", "batch": "train.batch",
              "val_fraction": "train.val_fraction"},
    "simulate": {"controller": "sim.controller", "laps": "sim.laps", "duration": "sim.duration",
                 "perturb": "sim.perturbations", "initial_error": "sim.initial_error"},
    "bench": {"trials": "bench.trials", "enumerate_checks": "bench.enumerate_checks"},
    "mode-map": {"ex": "map.ex", "ey": "map.ey", "etheta_deg": "map.etheta_deg"},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridpush", description="Hybrid MPC for planar pushing with learned mode schedules.")
    p.add_argument("--version", action="version", version=f"hybridpush {__version__}")
    p.add_argument("--config", help="config file (key=value or INI sections)")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (outputs do not depend on it)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--case", choices=("a", "b"), help="preset: a = point pusher on disc, b = line pusher on square")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-trajectory", help="write the nominal figure-8")
    s.add_argument("--radius", type=float)
    s.add_argument("--speed", type=float)
    s.add_argument("--period", type=float, help="output sampling period [s]")

    s = sub.add_parser("gen-dataset", help="label sampled error states with the exact MIQP")
    s.add_argument("--count", type=int)
    s.add_argument("--start", type=int, help="first sample index of this shard")
    s.add_argument("--stop", type=int, help="one past the last sample index of this shard")

    s = sub.add_parser("train", help="train the mode-schedule classifier")
    s.add_argument("--dataset", action="append", required=True, help="dataset CSV (repeat to merge shards)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--val-fraction", type=float)

    s = sub.add_parser("simulate", help="closed-loop tracking simulation")
    s.add_argument("--controller", choices=("learned", "miqp", "miqp_bnb", "open_loop", "sticking"))
    s.add_argument("--model", help="classifier file for the learned controller")
    s.add_argument("--laps", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--perturb", help="lateral displacements as t:magnitude;t:magnitude")
    s.add_argument("--initial-error", help="ex,ey,etheta,ephi")
    s.add_argument("--timing", action="store_true", help="record measured solve times in the log")

    s = sub.add_parser("bench", help="time learned-modes versus MIQP solves")
    s.add_argument("--model", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--enumerate-checks", type=int)

    s = sub.add_parser("mode-map", help="first-segment mode over an (ex, ey) grid")
    s.add_argument("--model", help="use the classifier instead of the MIQP")
    s.add_argument("--ex", help="lo:hi:n")
    s.add_argument("--ey", help="lo:hi:n")
    s.add_argument("--etheta-deg", type=float)

    s = sub.add_parser("replay", help="re-run a command from its manifest")
    s.add_argument("manifest")
    return p


def resolve_args(args) -> tuple[dict, dict]:
    file_layer = C.read_config_file(args.config) if args.config else {}
    flags: dict[str, Any] = {}
    if args.case:
        flags["case"] = args.case
    if args.seed is not None:
        flags["seed"] = args.seed
    for item in args.set:
        k, v = C.parse_override(item)
        flags[k] = v
    for attr, key in FLAG_KEYS.get(args.command, {}).items():
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "timing", False):
        flags["sim.timing"] = True
    cfg = C.resolve(file_layer, flags)
    inputs: dict[str, Any] = {}
    if getattr(args, "model", None):
        inputs["model"] = str(Path(args.model).resolve())
    if getattr(args, "dataset", None):
        inputs["dataset"] = [str(Path(d).resolve()) for d in args.dataset]
    return cfg, inputs


def _input_hashes(inputs) -> dict[str, str]:
    out = {}
    for v in inputs.values():
        for path in (v if isinstance(v, list) else [v]):
            out[path] = sha256_file(Path(path))
    return out


def execute(command: str, cfg: dict, inputs: dict, out: Path, jobs: int = 1) -> dict:
    """Run ``command``, write outputs and manifest, return the manifest."""
    started = _dt.datetime.now(_dt.timezone.utc)
    t0 = time.perf_counter()
    files = COMMANDS[command]({**cfg, "jobs": jobs}, inputs, out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        write_atomic(out / name, text)
    manifest = {
        "command": command,
        "version": __version__,
        "config": C.to_jsonable(cfg),
        "seeds": {"seed": cfg["seed"]},
        "inputs": inputs,
        "input_sha256": _input_hashes(inputs),
        "outputs": {name: sha256_file(out / name) for name in files},
        "nondeterministic_outputs": list(NONDETERMINISTIC.get(command, ())),
        "jobs": jobs,
        "started_utc": started.isoformat(timespec="seconds"),
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    write_atomic(out / (command + MANIFEST_SUFFIX), json.dumps(manifest, indent=2) + "\n")
    return manifest


def replay(manifest_path: str, out: Path, jobs: int = 1) -> dict:
    try:
        m = json.loads(_read_text(manifest_path))
        command, cfg_raw, inputs = m["command"], m["config"], m["inputs"]
    except (ValueError, KeyError) as exc:
        raise UsageError(f"malformed manifest {manifest_path}: {exc}") from None
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    for path, digest in m.get("input_sha256", {}).items():
        if not Path(path).exists() or sha256_file(Path(path)) != digest:
            raise UsageError(f"input {path} is missing or changed since the manifest was written")
    return execute(command, C.resolve(cfg_raw), inputs, out, jobs)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        out = Path(args.out)
        if args.command == "replay":
            replay(args.manifest, out, args.jobs)
        else:
            cfg, inputs = resolve_args(args)
            execute(args.command, cfg, inputs, out, args.jobs)
        return 0
    except (UsageError, C.ConfigError, ParameterError, NominalInfeasibleError, ValueError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
