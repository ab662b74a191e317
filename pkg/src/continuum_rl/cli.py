"""Command-line entry point: train | eval | compare | serve | replay.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import shutil
import struct
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    Hyperparameters,
    MadqnLearner,
    SingleAgentLearner,
    dump_agent,
    load_agent,
    stabilization_episode,
    train,
)
from .config import read_kv, scenario_from_kv
from .control import KmocController, RlController, gen_trajectory, metrics_from_errors, track, track_point
from .env import EVAL_EPISODE, TRACE_HEADER, TRAIN_EPISODE, ContinuumEnv, Target, TraceWriter
from .errors import ConfigError, EnvironmentFault, MissingArtifact
from .experiments import EVAL_OFFSET
from .proto import PlantServer, RemoteEnv
from .seeding import DEFAULT_SEED, Streams

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_FAULT = 0, 2, 3, 4
OUT_ENV = "CONTINUUM_RL_OUT"
METRICS_HEADER = ("scenario", "controller", "shield", "shape", "rms", "max", "success_rate", "samples")
COMPARISON_HEADER = ("scenario", "controller", "shield", "rms", "max", "success_rate")


# ---- run configuration -------------------------------------------------------

def _kv_overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _hyperparameters(kv):
    """Pull ``hp.*`` keys out of ``kv`` into a Hyperparameters instance."""
    types = {f.name: f.type for f in fields(Hyperparameters)}
    changes = {}
    for key in [k for k in kv if k.startswith("hp.")]:
        name = key[3:]
        if name not in types:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
        raw = kv.pop(key)
        try:
            changes[name] = int(raw) if types[name] in (int, "int") else float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}", key=key) from None
    try:
        return Hyperparameters(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc), key="hp") from None


def resolve(kv, seed=None):
    """Scenario + hyperparameters + seed from a raw key/value mapping."""
    kv = dict(kv)
    hp = _hyperparameters(kv)
    if seed is not None:
        kv["seed"] = str(seed)
    elif "seed" not in kv:
        kv["seed"] = str(DEFAULT_SEED)
    return scenario_from_kv(kv), hp


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def resolved_config(scenario, hp):
    return _jsonable({"scenario": asdict(scenario), "hyperparameters": asdict(hp)})


def config_digest(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def manifest(command, inputs, resolved, seed, extra=None):
    """Everything needed to rerun ``command`` bit-exactly; no timestamps."""
    doc = {
        "command": command,
        "inputs": inputs,
        "seed": seed,
        "config": resolved,
        "config_digest": config_digest(resolved),
        "versions": {
            "artifact": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    doc.update(extra or {})
    return doc


def _load_manifest(path, command):
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"manifest not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not a manifest ({exc})") from None
    if doc.get("command") != command:
        raise ConfigError(f"{p}: manifest is for {doc.get('command')!r}, not {command!r}", key="command")
    return doc


def _scenario_inputs(args):
    """Raw key/value inputs per scenario, from files or a prior manifest."""
    if args.manifest:
        doc = _load_manifest(args.manifest, args.command)
        return doc["inputs"]
    overrides = _kv_overrides(args.set)
    out = []
    for path in args.scenario:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"scenario file not found: {p}", key="scenario")
        kv = read_kv(p)
        kv.update(overrides)
        if args.seed is not None:
            kv["seed"] = str(args.seed)
        out.append(kv)
    if not out:
        raise ConfigError("no scenario given (pass a scenario file or --manifest)", key="scenario")
    return out


# ---- output directories --------------------------------------------------------

class OutputDir:
    """Files are written into a hidden sibling and renamed into place on success."""

    def __init__(self, final, force=False):
        self.final = Path(final)
        if self.final.exists() and not force:
            raise ConfigError(f"output directory exists: {self.final} (use --force)", key="out")
        self.force = force
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))

    def path(self, name):
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, name, text):
        with open(self.path(name), "w", newline="") as f:
            f.write(text)

    def write_bytes(self, name, data):
        self.path(name).write_bytes(data)

    def commit(self):
        if self.final.exists() and self.force:
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return self.final

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _out_dir(args, default_name):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _write_manifest(out, doc):
    out.write("manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---- environments and checkpoints ------------------------------------------------

def make_env(scenario, episode_cfg, seed, remote=None):
    env = ContinuumEnv(scenario.plant, episode_cfg, rng=Streams(seed)["noise"])
    if remote is None:
        return env
    return RemoteEnv(remote, expected_info=env.info())


def save_checkpoints(out, learner):
    for k, ag in enumerate(learner.agents, 1):
        out.write_bytes(f"agent{k}.ckpt", dump_agent(ag))


def load_learner(ckpt_dir, mode, hp, shield_cfg):
    if ckpt_dir is None:
        raise MissingArtifact(f"controller {mode!r} needs --checkpoints")
    d = Path(ckpt_dir)
    n = 2 if mode == "madqn" else 1
    agents = []
    for k in range(1, n + 1):
        p = d / f"agent{k}.ckpt"
        if not p.is_file():
            raise MissingArtifact(f"missing checkpoint: {p}")
        try:
            agents.append(load_agent(p.read_bytes(), hp))
        except (ValueError, struct.error) as exc:
            raise MissingArtifact(f"unreadable checkpoint {p}: {exc}") from None
    if mode == "madqn":
        return MadqnLearner(agents, shield_cfg)
    return SingleAgentLearner(agents[0], shield_cfg)


# ---- train ------------------------------------------------------------------------

def run_train(args):
    inputs = _scenario_inputs(args)
    if len(inputs) != 1:
        raise ConfigError("train takes exactly one scenario", key="scenario")
    scenario, hp = resolve(inputs[0])
    if scenario.controller == "kmoc":
        raise ConfigError("kmoc is model-based and has nothing to train", key="controller")
    seed = scenario.seed
    out = OutputDir(_out_dir(args, f"train-{scenario.name}-s{seed}"), args.force)
    try:
        env = make_env(scenario, TRAIN_EPISODE, seed, args.remote)
        target = Target(*scenario.train_target)
        learner, log = train(env, hp, seed, mode=scenario.controller, shield_cfg=scenario.shield_cfg,
                             target=target, episodes=scenario.episodes)
        if hasattr(env, "close"):
            env.close()
        out.write("training.csv", log.to_csv())
        save_checkpoints(out, learner)
        stab = [stabilization_episode(log, k) for k in range(learner.n_agents)]
        successes = sum(ep.success for ep in log.episodes)
        resolved = resolved_config(scenario, hp)
        _write_manifest(out, manifest("train", inputs, resolved, seed,
                                      {"stabilized_at": stab, "successes": successes}))
        if not args.no_figures and len(log):
            from .plotting import training_figure
            training_figure(log, out.path("training.png"))
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    stab_txt = ", ".join(f"agent{k + 1}={'-' if s is None else s}" for k, s in enumerate(stab))
    print(f"trained {scenario.controller} for {len(log)} episodes; dwell successes {successes}; "
          f"stabilized at episode {stab_txt}; wrote {final}")
    return EXIT_OK


# ---- eval / compare -----------------------------------------------------------------

def _controller(scenario, hp, ckpt_dir, seed):
    if scenario.controller == "kmoc":
        # nominal model: the controller does not know about disturbances
        return KmocController(replace(scenario.plant, payload_mass_g=0.0, hysteresis_deadband=0.0,
                                      obstacle_field=None, collision_schedule=(), tip_noise_std=0.0))
    learner = load_learner(ckpt_dir, scenario.controller, hp, scenario.shield_cfg)
    return RlController(learner, Streams(seed + EVAL_OFFSET), online=scenario.online)


def evaluate(kv, ckpt_dir, remote=None):
    """Run one scenario; returns a dict of the row plus text outputs."""
    scenario, hp = resolve(kv)
    seed = scenario.seed
    ctrl = _controller(scenario, hp, ckpt_dir, seed)
    env = make_env(scenario, EVAL_EPISODE, seed + EVAL_OFFSET, remote)
    trace = io.StringIO()
    writer = TraceWriter(trace, scenario.plant)
    try:
        if scenario.shape == "point":
            center = scenario.trajectory.get("center", scenario.train_target)
            target = Target(*center)
            held = []
            counter = iter(range(1, 1 << 62))

            def on_hold(rep, res, action):
                k = next(counter)
                held.append(res.obs.distance)
                writer.record(k, res, action)

            res = track_point(ctrl, env, target, scenario.repetitions, on_hold=on_hold)
            m = metrics_from_errors(held)
            success = res.success_rate
            plot_rows = [(k, target.x_tar, target.y_tar, target.x_tar - s[0], target.y_tar - s[1])
                         for k, s in enumerate(_hold_deltas(trace.getvalue()))]
            plot = _plot_text(plot_rows)
            point = {"rep_errors": [float(v) for v in res.rep_errors],
                     "rep_success": [bool(v) for v in res.rep_success],
                     "rolling_average": [float(v) for v in res.rolling_average]}
        else:
            tr = gen_trajectory(scenario.shape, scenario.trajectory, scenario.plant)
            run = track(ctrl, env, tr, keep_steps=True)
            for k, r, action in run.steps:
                writer.record(k, r, action, time_step=run.approach_steps + k)
            m = run.metrics
            success = m.success_rate
            plot = run.plot_data()
            plot_rows = list(run.plot_rows())
            point = None
    finally:
        if hasattr(env, "close"):
            env.close()
    row = {
        "scenario": scenario.name,
        "controller": scenario.controller,
        "shield": "on" if scenario.shield else "off",
        "shape": scenario.shape,
        "rms": m.rms_error,
        "max": m.max_error,
        "success_rate": success,
        "samples": len(m.errors),
    }
    return {"row": row, "trace": trace.getvalue(), "plot": plot, "plot_rows": plot_rows,
            "point": point, "resolved": resolved_config(scenario, hp), "seed": seed}


def _hold_deltas(trace_text):
    rows = list(csv.reader(io.StringIO(trace_text)))[1:]
    return [(float(r[1]), float(r[2])) for r in rows]


def _plot_text(rows):
    s = io.StringIO()
    w = csv.writer(s, lineterminator="\n")
    w.writerow(("t", "x_ref", "y_ref", "x_act", "y_act"))
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return s.getvalue()


def _csv_text(header, rows):
    s = io.StringIO()
    w = csv.writer(s, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return s.getvalue()


def _write_eval(out, prefix, result, figures):
    out.write(f"{prefix}metrics.csv", _csv_text(METRICS_HEADER, [result["row"]]))
    out.write(f"{prefix}trace.csv", result["trace"])
    out.write(f"{prefix}plot.csv", result["plot"])
    if result["point"] is not None:
        out.write(f"{prefix}repetitions.csv", _csv_text(
            ("repetition", "error", "success", "rolling_average"),
            [{"repetition": i + 1, "error": e, "success": int(s), "rolling_average": a}
             for i, (e, s, a) in enumerate(zip(result["point"]["rep_errors"], result["point"]["rep_success"],
                                                result["point"]["rolling_average"]))]))
    if figures:
        from . import plotting
        r = result["row"]
        title = f"{r['scenario']}: {r['controller']} shield {r['shield']}"
        if result["point"] is not None:
            from .control import PointTrackingResult
            p = result["point"]
            pr = PointTrackingResult(np.array(p["rep_errors"]), np.array(p["rep_success"]),
                                     np.zeros(len(p["rep_errors"])), np.array(p["rolling_average"]))
            plotting.point_figure(pr, out.path(f"{prefix}point.png"), title=title)
        else:
            plotting.tracking_figure(result["plot_rows"], out.path(f"{prefix}tracking.png"), title)


def run_eval(args):
    inputs = _scenario_inputs(args)
    if len(inputs) != 1:
        raise ConfigError("eval takes exactly one scenario (use compare for several)", key="scenario")
    ckpt = args.checkpoints
    if args.manifest:
        ckpt = _load_manifest(args.manifest, "eval").get("checkpoints", ckpt) if ckpt is None else ckpt
    scenario, _ = resolve(inputs[0])
    out = OutputDir(_out_dir(args, f"eval-{scenario.name}-s{scenario.seed}"), args.force)
    try:
        result = evaluate(inputs[0], ckpt, args.remote)
        _write_eval(out, "", result, not args.no_figures)
        _write_manifest(out, manifest("eval", inputs, result["resolved"], result["seed"],
                                      {"checkpoints": None if ckpt is None else str(ckpt)}))
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    r = result["row"]
    print(f"{r['scenario']} {r['controller']} shield={r['shield']}: rms={r['rms']:.4f} mm "
          f"max={r['max']:.4f} mm success={r['success_rate']:.3f}; wrote {final}")
    return EXIT_OK


def _expand(inputs, controllers, shields):
    jobs = []
    for kv in inputs:
        for c in controllers or [None]:
            for s in shields or [None]:
                job = dict(kv)
                if c is not None:
                    job["controller"] = c
                if s is not None:
                    job["shield"] = s
                jobs.append(job)
    return jobs


def _eval_job(job):
    kv, ckpt = job
    return evaluate(kv, ckpt)


def run_compare(args):
    inputs = _scenario_inputs(args)
    ckpt = args.checkpoints
    controllers = args.controllers.split(",") if args.controllers else None
    shields = args.shield.split(",") if args.shield else None
    if args.manifest:
        doc = _load_manifest(args.manifest, "compare")
        ckpt = doc.get("checkpoints") if ckpt is None else ckpt
        jobs = inputs  # the manifest already stores the expanded matrix
    else:
        jobs = _expand(inputs, controllers, shields)
    # validate everything before doing any work
    for kv in jobs:
        resolve(kv)
    seed = resolve(jobs[0])[0].seed
    out = OutputDir(_out_dir(args, f"compare-s{seed}"), args.force)
    try:
        work = [(kv, ckpt) for kv in jobs]
        if args.parallel > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                results = list(pool.map(_eval_job, work))
        else:
            results = [_eval_job(w) for w in work]
        rows = []
        for i, res in enumerate(results):
            r = res["row"]
            prefix = f"{i + 1:02d}-{r['scenario']}-{r['controller']}-{r['shield']}/"
            _write_eval(out, prefix, res, not args.no_figures)
            rows.append(r)
        out.write("comparison.csv", _csv_text(COMPARISON_HEADER, rows))
        resolved = [res["resolved"] for res in results]
        _write_manifest(out, manifest("compare", jobs, resolved, seed,
                                      {"checkpoints": None if ckpt is None else str(ckpt)}))
        if not args.no_figures:
            from .plotting import comparison_figure
            comparison_figure([{"label": f"{r['scenario']}/{r['controller']}/{r['shield']}",
                                "rms": r["rms"], "max": r["max"]} for r in rows], out.path("comparison.png"))
        final = out.commit()
    except BaseException:
        out.abort()
        raise
    for r in rows:
        print(f"{r['scenario']:<16} {r['controller']:<6} shield={r['shield']:<3} rms={r['rms']:.4f} "
              f"max={r['max']:.4f} success={r['success_rate']:.3f}")
    print(f"wrote {final}")
    return EXIT_OK


# ---- serve / replay ---------------------------------------------------------------------

def run_serve(args):
    kv = {}
    if args.scenario:
        p = Path(args.scenario[0])
        if not p.is_file():
            raise ConfigError(f"scenario file not found: {p}", key="scenario")
        kv = read_kv(p)
    kv.update(_kv_overrides(args.set))
    scenario, _ = resolve(kv, args.seed)
    episode_cfg = TRAIN_EPISODE if args.mode == "train" else EVAL_EPISODE
    seed = scenario.seed if args.mode == "train" else scenario.seed + EVAL_OFFSET
    env = ContinuumEnv(scenario.plant, episode_cfg, rng=Streams(seed)["noise"])
    srv = PlantServer(env, args.endpoint)
    srv.start()
    print(f"serving {scenario.disturbance} plant ({args.mode} episodes) on {srv.host}:{srv.port}", flush=True)
    try:
        srv.wait()
    except KeyboardInterrupt:
        pass
    finally:
        srv.stop()
    return EXIT_OK


class TraceSchemaError(ConfigError):
    pass


def replay_trace(text):
    """Recompute rms / max error from a trace's (delta1, delta2) columns."""
    if not text.strip():
        raise TraceSchemaError("empty trace", key="trace")
    if not text.endswith("\n"):
        raise TraceSchemaError("truncated trace (no final newline)", key="trace")
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != TRACE_HEADER:
        raise TraceSchemaError(f"trace header mismatch: {rows[0]}", key="trace")
    body = rows[1:]
    if not body:
        raise TraceSchemaError("empty trace (header only)", key="trace")
    errors = []
    for n, r in enumerate(body, 2):
        if len(r) != len(TRACE_HEADER):
            raise TraceSchemaError(f"line {n}: expected {len(TRACE_HEADER)} fields, got {len(r)}", key="trace")
        try:
            errors.append(math.hypot(float(r[1]), float(r[2])))
        except ValueError:
            raise TraceSchemaError(f"line {n}: non-numeric delta", key="trace") from None
    return metrics_from_errors(errors)


def run_replay(args):
    p = Path(args.trace)
    if not p.is_file():
        raise MissingArtifact(f"trace not found: {p}")
    m = replay_trace(p.read_text())
    print(f"samples={len(m.errors)} rms={m.rms_error!r} max={m.max_error!r}")
    ref = Path(args.metrics) if args.metrics else p.with_name("metrics.csv")
    if ref.is_file():
        rows = list(csv.DictReader(io.StringIO(ref.read_text())))
        if rows:
            rms, mx = float(rows[0]["rms"]), float(rows[0]["max"])
            ok = abs(rms - m.rms_error) <= 1e-12 and abs(mx - m.max_error) <= 1e-12
            print(f"{'match' if ok else 'MISMATCH'} against {ref}: rms={rms!r} max={mx!r}")
            if not ok:
                return EXIT_FAULT
    elif args.metrics:
        raise MissingArtifact(f"metrics file not found: {ref}")
    return EXIT_OK


# ---- argument parsing ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="continuum-rl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, many=False):
        sp.add_argument("scenario", nargs="*" if many else "?", help="scenario key=value file(s)")
        sp.add_argument("--seed", type=int, default=None, help=f"run seed (default: scenario's, else {DEFAULT_SEED})")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key")
        sp.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./runs)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")
        sp.add_argument("--manifest", help="rerun from a previous run's manifest.json")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    t = sub.add_parser("train", help="train MADQN or the single-agent baseline")
    common(t)
    t.add_argument("--remote", metavar="HOST:PORT", help="train against a plant served elsewhere")

    e = sub.add_parser("eval", help="evaluate one scenario")
    common(e)
    e.add_argument("--checkpoints", help="directory holding agentN.ckpt")
    e.add_argument("--remote", metavar="HOST:PORT", help="evaluate against a served plant")

    c = sub.add_parser("compare", help="evaluate a controller x scenario x shield matrix")
    common(c, many=True)
    c.add_argument("--checkpoints", help="directory holding agentN.ckpt")
    c.add_argument("--controllers", help="comma list overriding each scenario's controller, e.g. madqn,kmoc")
    c.add_argument("--shield", help="comma list overriding each scenario's shield flag, e.g. on,off")
    c.add_argument("--parallel", type=int, default=1, help="evaluate up to N scenarios concurrently")

    s = sub.add_parser("serve", help="serve a plant over TCP")
    s.add_argument("scenario", nargs="?", help="scenario file selecting the plant profile")
    s.add_argument("--endpoint", default=None, help="host:port (port defaults to $CONTINUUM_RL_PORT)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--mode", choices=("train", "eval"), default="train", help="episode settings to serve")

    r = sub.add_parser("replay", help="recompute metrics from a trace CSV")
    r.add_argument("trace")
    r.add_argument("--metrics", help="metrics.csv to check against (default: next to the trace)")
    return p


COMMANDS = {"train": run_train, "eval": run_eval, "compare": run_compare, "serve": run_serve, "replay": run_replay}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "serve" and args.scenario:
        args.scenario = [args.scenario]
    if args.command in ("train", "eval") and not isinstance(args.scenario, list):
        args.scenario = [args.scenario] if args.scenario else []
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except EnvironmentFault as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
