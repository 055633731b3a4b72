"""Command line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 a stage failed, 2 invalid input (nothing computed).
Relative paths inside a config file resolve against the file's directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config
from .clothsim import (ClothParams, calibrate_friction, calibrate_shear, flat_on_table, hang_length, model,
                       simulate_fold, simulate_hang)
from .errors import DrapekitError, NoData, OptimizationStalled, ValidationError
from .features import load_feature, save_feature
from .garmentdb import (DatabaseSettings, Garment, NoiseSpec, build_database, field_for, load_database,
                        load_garments, mesh_feature, perturb_query, read_manifest)
from .grasp import GraspObjectiveSpec, regrasp_loop
from .mesh import load_obj, save_obj
from .metric import WeightVector, classification_accuracy, learn_weights
from .registration import DeformationParams, mesh_to_mesh_error, nonrigid_register, register_rigid
from .trajectory import BezierCurve, fold_task, optimize_trajectory, simulate_curves

log = logging.getLogger("drapekit")

REPORT_FORMAT = "drapekit-report/1"
TIMING_KEYS = ("seconds", "total_seconds")
STAGES = ("db_build", "recognition", "registration", "regrasp", "fold_optimize")
TABLE2 = ("S to T (R)", "T to S (R)", "S to T (R+N)", "T to S (R+N)")


# --------------------------------------------------------------------------
# helpers


def _need_file(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} {p} does not exist")
    return p


def _need_dir(path, what="directory"):
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} {p} does not exist")
    return p


def _cloth(doc):
    return config.build(ClothParams, doc)


def _settings(doc):
    doc = doc or {}
    base = DatabaseSettings()
    sim = replace(base.sim, **doc.get("sim", {}))
    feat = replace(base.feature, **doc.get("feature", {}))
    rest = {k: v for k, v in doc.items() if k not in ("sim", "feature")}
    return replace(base, sim=sim, feature=feat, **rest)


def _deformation(doc):
    return config.build(DeformationParams, doc)


def _noise(doc):
    return config.build(NoiseSpec, doc)


def _vertex(mesh, key):
    """Vertex index from an anchor label or an integer (string)."""
    if isinstance(key, (int, np.integer)):
        v = int(key)
    elif key in mesh.anchors:
        v = mesh.anchors[key]
    else:
        try:
            v = int(key)
        except ValueError:
            raise ValidationError(f"unknown anchor {key!r}") from None
    if not 0 <= v < mesh.n_vertices:
        raise ValidationError(f"vertex {v} out of range")
    return v


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _files(root, paths):
    root = Path(root)
    return [{"path": Path(p).relative_to(root).as_posix(), "sha256": _digest(p)} for p in sorted(paths)]


def _dump(doc, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _emit(doc):
    sys.stdout.write(json.dumps(doc, indent=1) + "\n")


def _floats(a):
    return [float(x) for x in np.ravel(a)]


# --------------------------------------------------------------------------
# db


def cmd_db_build(args):
    _need_dir(args.garments, "garment directory")
    settings = _settings(config.load(args.settings, "database") if args.settings else None)
    garments = load_garments(args.garments)
    if args.only:
        keep = set(args.only.split(","))
        garments = [g for g in garments if g.garment_id in keep]
        if not garments:
            raise ValidationError(f"none of {sorted(keep)} found in {args.garments}")
    db = build_database(garments, args.out, settings, jobs=args.jobs)
    _emit({"out": str(args.out), "entries": len(db), "settings_hash": settings.digest()})
    return 0


def cmd_db_list(args):
    m = read_manifest(_need_dir(args.db, "database"))
    if args.json:
        _emit(m.to_json())
        return 0
    for e in m.entries:
        print(f"{e['id']}\t{e['category']}\tvertex {e['grasp_vertex']}")
    print(f"{len(m.entries)} entries")
    return 0


# --------------------------------------------------------------------------
# feature and metric


def _db_settings(args):
    if getattr(args, "db", None):
        return DatabaseSettings.from_dict(read_manifest(_need_dir(args.db, "database")).provenance["settings"])
    if getattr(args, "settings", None):
        return _settings(config.load(args.settings, "database"))
    return DatabaseSettings()


def cmd_feature_extract(args):
    mesh = load_obj(_need_file(args.mesh, "mesh"))
    settings = _db_settings(args)
    t0 = time.perf_counter()
    feat = mesh_feature(mesh, settings)
    save_feature(feat, args.out)
    _emit({"out": str(args.out), "bits": feat.params.size, "set": feat.count(),
           "seconds": time.perf_counter() - t0})
    return 0


def _query_feature(path, settings):
    path = _need_file(path, "query")
    if path.suffix == ".obj":
        return mesh_feature(load_obj(path), settings)
    return load_feature(path)


def cmd_feature_match(args):
    db = load_database(_need_dir(args.db, "database"))
    w = WeightVector.load(_need_file(args.weights, "weights")).w if args.weights else None
    q = _query_feature(args.query, db.settings)
    ranked = db.ranked(q, w)[: args.top]
    _emit({"query": str(args.query),
           "matches": [{"id": e.entry_id, "category": e.category, "score": float(s)} for e, s in ranked]})
    return 0


def _calibration_set(root, settings):
    """``<root>/<garment>/<grasp>/*.feat|*.obj`` -> list of (feature, label)."""
    items = []
    for p in sorted(Path(root).glob("*/*/*")):
        if p.suffix in (".feat", ".bin", ".obj"):
            items.append((_query_feature(p, settings), (p.parent.parent.name, p.parent.name)))
    if not items:
        raise ValidationError(f"no calibration queries under {root}")
    return items


def cmd_metric_learn(args):
    db = load_database(_need_dir(args.db, "database"))
    _need_dir(args.calib, "calibration directory")
    if not args.C > 0:
        raise ValidationError("C must be positive")
    calib = _calibration_set(args.calib, db.settings)
    w = learn_weights([(e.feature, e.label) for e in db.entries], calib, C=args.C)
    w.save(args.out)
    _emit({"out": str(args.out), "objective": w.objective, "iterations": len(w.trace), "queries": len(calib)})
    return 0


# --------------------------------------------------------------------------
# registration


def cmd_register(args):
    src = load_obj(_need_file(args.source, "source"))
    tgt = load_obj(_need_file(args.target, "target"))
    p = _deformation(config.load(args.params, "deformation") if args.params else None)
    field_ = field_for(tgt, args.grid_nodes)
    t0 = time.perf_counter()
    rigid = register_rigid(src, tgt, field_)
    nonrigid, e, lm_log = nonrigid_register(rigid, field_, p)
    save_obj(nonrigid, args.out)
    report = {"params": asdict(p), "rigid_error": mesh_to_mesh_error(rigid, field_),
              "error": mesh_to_mesh_error(nonrigid, field_), "energy": e.as_dict(),
              "iterations": len(lm_log), "seconds": time.perf_counter() - t0}
    if args.report:
        _dump(report, args.report)
    _emit(report)
    return 0


# --------------------------------------------------------------------------
# simulation


def cmd_sim_hang(args):
    mesh = load_obj(_need_file(args.mesh, "mesh"))
    params = _cloth(config.load(args.params, "cloth") if args.params else None)
    pin = _vertex(mesh, args.pin)
    cm = model(mesh, params)
    energies = []
    every = max(1, int(round(0.1 / params.timestep)))

    def cb(state):
        n = int(round(state.time / params.timestep))
        if n % every == 0:
            energies.append([float(state.time), float(cm.energy(state))])

    hung, info = simulate_hang(mesh, pin, params, max_time=args.max_time, return_info=True, callback=cb)
    save_obj(hung, args.out)
    L1, L2, lowest = hang_length(mesh, hung, pin)
    doc = {"pin": pin, "pin_position": _floats(hung.vertices[pin]), "converged": info["converged"],
           "sim_time": info["time"], "hang_length": L1, "flat_length": L2, "shear_fraction": (L1 - L2) / L2,
           "lowest_vertex": int(lowest), "energy": energies}
    if args.log:
        _dump(doc, args.log)
    _emit({k: v for k, v in doc.items() if k != "energy"})
    return 0


def _load_curves(path, mesh):
    doc = config.load(path, "curves")
    traj = [(_vertex(mesh, a["grasp"]), BezierCurve(a["control_points"])) for a in doc["arms"]]
    return traj, doc.get("duration", 2.0), doc.get("settle_time", 3.0)


def cmd_sim_fold(args):
    mesh = load_obj(_need_file(args.mesh, "mesh"))
    params = _cloth(config.load(args.params, "cloth") if args.params else None)
    traj, duration, settle = _load_curves(_need_file(args.curves, "curves"), mesh)
    frames = []
    out, info = simulate_fold(mesh, [(v, c, duration) for v, c in traj], params, settle_time=settle,
                              keyframes=frames, return_info=True)
    save_obj(out, args.out)
    cm = model(mesh, params)
    doc = {"settled": info["settled"], "sim_time": info["time"],
           "pin_paths": [{"vertex": v, "samples": [_floats(c(u)) for u in np.linspace(0, 1, 11)]}
                         for v, c in traj],
           "elastic_energy": [[float(t), cm.elastic_energy(x)] for t, x in frames]}
    if args.log:
        _dump(doc, args.log)
    _emit({k: doc[k] for k in ("settled", "sim_time")})
    return 0


def cmd_sim_calibrate(args):
    mesh = load_obj(_need_file(args.mesh, "mesh"))
    params = _cloth(config.load(args.params, "cloth") if args.params else None)
    if (args.shear is None) == (args.friction_angle is None):
        raise ValidationError("give exactly one of --shear or --friction-angle")
    if args.shear is not None:
        pin = _vertex(mesh, args.pin)
        k = calibrate_shear(mesh, pin, args.shear, params)
        out = replace(params, stretch=k, shear=k * (params.shear / params.stretch if params.stretch else 1.0))
    else:
        mu = calibrate_friction(mesh, args.friction_angle, params)
        out = replace(params, friction=mu)
    _dump(asdict(out), args.out)
    _emit(asdict(out))
    return 0


# --------------------------------------------------------------------------
# folding


def _plan_kw(plan, jobs):
    kw = {k: plan[k] for k in ("alpha", "delta", "duration", "settle_time", "max_iter", "rtol", "xtol", "h")
          if k in plan}
    kw["params"] = _cloth(plan.get("sim"))
    kw["jobs"] = jobs
    return kw


def fold_plan(mesh, plan, jobs=1, callback=None):
    """Optimize every step of a fold plan in order.

    Each step starts from the settled result of the previous one. Returns
    ``(steps, shapes)`` with one JSON-ready record and final mesh per step.
    """
    kw = _plan_kw(plan, jobs)
    start = flat_on_table(mesh)
    steps, shapes = [], []
    for k, st in enumerate(plan["steps"]):
        verts = [_vertex(mesh, g) for g in st["grasp"]]
        task = fold_task(mesh, verts, st["line_point"], st["direction"], start_positions=start, **kw)
        res = optimize_trajectory(task, callback=callback)
        final = simulate_curves(task, res.curves)
        steps.append({"step": k, "grasp": list(st["grasp"]), "vertices": verts,
                      "line_point": st["line_point"], "direction": st["direction"], **res.to_json()})
        shapes.append(final)
        start = final.vertices
    return steps, shapes


def cmd_fold_optimize(args):
    mesh = load_obj(_need_file(args.garment, "garment"))
    plan = config.load(_need_file(args.plan, "plan"), "plan")
    steps, shapes = fold_plan(mesh, plan, args.jobs)
    _dump({"plan": plan, "steps": steps}, args.out)
    if args.shapes:
        for k, s in enumerate(shapes):
            save_obj(s, Path(args.shapes) / f"step{k}.obj", sidecar=False)
    _emit([{"step": s["step"], "initial_cost": s["initial_cost"], "cost": s["cost"],
            "dissimilarity": s["dissimilarity"]} for s in steps])
    return 0


def cmd_fold_replay(args):
    mesh = load_obj(_need_file(args.garment, "garment"))
    doc = json.loads(_need_file(args.trajs, "trajectories").read_text())
    if set(doc) != {"plan", "steps"}:
        raise ValidationError("trajectory file needs exactly the keys plan and steps")
    plan = config.validate(doc["plan"], "plan", str(args.trajs))
    kw = _plan_kw(plan, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = flat_on_table(mesh)
    written = []
    for st in doc["steps"]:
        task = fold_task(mesh, st["vertices"], st["line_point"], st["direction"], start_positions=start, **kw)
        frames = []
        final = simulate_curves(task, [BezierCurve(c) for c in st["curves"]], keyframes=frames)
        for i, (_, x) in enumerate(frames):
            p = out / f"step{st['step']}_{i:03d}.obj"
            save_obj(mesh.with_vertices(x), p, sidecar=False)
            written.append(p)
        start = final.vertices
    _emit({"out": str(out), "keyframes": len(written)})
    return 0


# --------------------------------------------------------------------------
# regrasp


def _grasp_spec(mesh, doc):
    kw = {k: doc[k] for k in ("sigma_l", "sigma_r", "xi") if k in doc}
    if "prior" in doc:
        kw["prior"] = {(a, b): p for a, b, p in doc["prior"]}
    for k in (doc["left"], doc["right"]):
        if k not in mesh.anchors:
            raise ValidationError(f"grasp spec names unknown anchor {k!r}")
    try:
        return GraspObjectiveSpec.from_mesh(mesh, doc["left"], doc["right"], **kw)
    except DrapekitError as exc:
        raise ValidationError(str(exc)) from None


def _default_start(mesh, doc):
    if "start" in doc:
        return _vertex(mesh, doc["start"])
    others = sorted(k for k in mesh.anchors if k not in (doc["left"], doc["right"]))
    return mesh.anchors[others[0] if others else doc["right"]]


def _garment_from(path):
    path = _need_file(path, "garment")
    cat = path.with_suffix(".category")
    return Garment(path.stem, cat.read_text().strip() if cat.exists() else path.stem, load_obj(path))


def cmd_regrasp_run(args):
    db = load_database(_need_dir(args.db, "database"))
    garment = _garment_from(args.garment)
    doc = config.load(_need_file(args.spec, "grasp spec"), "grasp")
    spec = _grasp_spec(garment.mesh, doc)
    w = WeightVector.load(_need_file(args.weights, "weights")).w if args.weights else None
    noise = _noise(doc["noise"]) if "noise" in doc else None
    res = regrasp_loop(db, garment, spec, _default_start(garment.mesh, doc), doc.get("max_iters", 3), w=w,
                       noise=noise, seed=args.seed)
    _dump(res.to_json(), args.trace)
    _emit({k: v for k, v in res.to_json().items() if k != "trace"})
    return 0 if res.converged else 1


# --------------------------------------------------------------------------
# pipeline


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else (base / p)


def check_pipeline(cfg, base=Path(".")):
    """Validate a pipeline config and every input it references.

    Returns the config with paths resolved. Raises :class:`ValidationError`.
    """
    config.validate(cfg, "pipeline")
    cfg = json.loads(json.dumps(cfg))
    cfg["garments"] = str(_need_dir(_resolve(base, cfg["garments"]), "garment directory"))
    gpath = Path(cfg["garments"]) / f"{cfg['garment']}.obj"
    _need_file(gpath, "garment mesh")
    cfg["out"] = str(_resolve(base, cfg["out"]))
    w = cfg.get("recognition", {}).get("weights")
    if w:
        cfg["recognition"]["weights"] = str(_need_file(_resolve(base, w), "weights"))
    mesh = load_obj(gpath)
    _grasp_spec(mesh, cfg["regrasp"])
    for st in cfg["fold"]["steps"]:
        for g in st["grasp"]:
            _vertex(mesh, g)
    _settings(cfg.get("database"))
    _deformation(cfg.get("registration", {}).get("params"))
    return cfg


def _stage_db(cfg, out, ctx):
    garments = load_garments(cfg["garments"])
    settings = _settings(cfg.get("database"))
    db = build_database(garments, out, settings, jobs=ctx["jobs"])
    ctx.update(db=db, garments={g.garment_id: g for g in garments})
    files = [out / "manifest.json"] + [out / r[k] for r in db.manifest.entries for k in ("drape", "feature")]
    return {"entries": len(db), "settings_hash": settings.digest()}, files


def _stage_recognition(cfg, out, ctx):
    db = ctx["db"]
    sec = cfg.get("recognition", {})
    noise = _noise(sec.get("noise", {"jitter": 0.002, "smoothing": 1}))
    w = WeightVector.load(sec["weights"]).w if sec.get("weights") else None
    rows, pred, truth, files = [], [], [], []
    for i, e in enumerate(db.entries):
        q = perturb_query(e, noise, seed=ctx["seed"] + i)
        f = mesh_feature(q, db.settings)
        p = out / e.garment_id / f"{e.grasp_label}.feat"
        p.parent.mkdir(parents=True, exist_ok=True)
        save_feature(f, p)
        files.append(p)
        m, s = db.match(f, w)
        pred.append(m.label)
        truth.append(e.label)
        rows.append({"query": e.entry_id, "category": e.category, "match": m.entry_id, "score": float(s),
                     "correct": m.label == e.label})
    cats = sorted({r["category"] for r in rows})
    per = {c: classification_accuracy([p for p, r in zip(pred, rows) if r["category"] == c],
                                      [t for t, r in zip(truth, rows) if r["category"] == c]) for c in cats}
    return {"noise": asdict(noise), "accuracy": classification_accuracy(pred, truth), "per_category": per,
            "queries": rows}, files


def _stage_registration(cfg, out, ctx):
    db = ctx["db"]
    sec = cfg.get("registration", {})
    p = _deformation(sec.get("params"))
    noise = _noise(sec.get("noise", {"jitter": 0.002, "smoothing": 1}))
    entries = [e for e in db.entries if e.garment_id == cfg["garment"]][: sec.get("pairs", 5)]
    rows, files = [], []
    for i, e in enumerate(entries):
        S = e.draped_mesh
        T = perturb_query(e, noise, seed=ctx["seed"] + 1000 + i)
        fS, fT = field_for(S, db.settings.grid_nodes), field_for(T, db.settings.grid_nodes)
        row = {"pair": e.entry_id}
        for name, a, b, fb in (("S to T", S, T, fT), ("T to S", T, S, fS)):
            rigid = register_rigid(a, b, fb)
            nr, _, _ = nonrigid_register(rigid, fb, p)
            row[f"{name} (R)"] = mesh_to_mesh_error(rigid, fb)
            row[f"{name} (R+N)"] = mesh_to_mesh_error(nr, fb)
            if name == "S to T":
                path = out / e.garment_id / f"{e.grasp_label}.obj"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_obj(nr, path, sidecar=False)
                files.append(path)
        rows.append(row)
    means = {k: float(np.mean([r[k] for r in rows])) for k in TABLE2} if rows else {}
    return {"pairs": rows, "mean": means}, files


def _stage_regrasp(cfg, out, ctx):
    garment = ctx["garments"][cfg["garment"]]
    doc = cfg["regrasp"]
    spec = _grasp_spec(garment.mesh, doc)
    w = WeightVector.load(cfg["recognition"]["weights"]).w if cfg.get("recognition", {}).get("weights") else None
    noise = _noise(doc["noise"]) if "noise" in doc else None
    res = regrasp_loop(ctx["db"], garment, spec, _default_start(garment.mesh, doc), doc.get("max_iters", 3),
                       w=w, noise=noise, seed=ctx["seed"])
    path = out / "trace.json"
    _dump(res.to_json(), path)
    if not res.converged:
        raise StageFailed("regrasp did not reach the threshold", {"left": res.left, "right": res.right,
                                                                   "score": res.score, "xi": res.xi})
    return {"left": res.left, "right": res.right, "score": res.score, "xi": res.xi,
            "iterations": res.iterations}, [path]


def _stage_fold(cfg, out, ctx):
    garment = ctx["garments"][cfg["garment"]]
    try:
        steps, shapes = fold_plan(garment.mesh, cfg["fold"], ctx["jobs"])
    except OptimizationStalled as exc:
        raise StageFailed(str(exc), None if exc.best is None else exc.best.to_json()) from exc
    files = [out / "trajs.json"]
    _dump({"plan": cfg["fold"], "steps": steps}, files[0])
    for k, s in enumerate(shapes):
        p = out / f"step{k}.obj"
        save_obj(s, p, sidecar=False)
        files.append(p)
    return {"steps": [{k: s[k] for k in ("step", "grasp", "initial_cost", "cost", "initial_dissimilarity",
                                         "dissimilarity", "length", "reason")} for s in steps]}, files


class StageFailed(DrapekitError):
    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail


_RUNNERS = dict(zip(STAGES, (_stage_db, _stage_recognition, _stage_registration, _stage_regrasp, _stage_fold)))
_DIRS = dict(zip(STAGES, ("db", "recognition", "registration", "regrasp", "fold")))


def run_pipeline(cfg, base=Path("."), jobs=None):
    """Run every stage in order and write ``<out>/report.json``.

    Returns ``(exit_code, report)``. An invalid config raises
    :class:`ValidationError` before anything is computed.
    """
    cfg = check_pipeline(cfg, Path(base))
    seed = config.resolve_seed(cfg.get("seed", 0))
    out = Path(cfg["out"])
    ctx = {"seed": seed, "jobs": jobs or cfg.get("jobs", 1)}
    report = {"format": REPORT_FORMAT, "seed": seed, "config": cfg, "stages": [], "status": "ok"}
    t_all = time.perf_counter()
    failed = False
    for name in STAGES:
        rec = {"name": name}
        if failed:
            rec["status"] = "skipped"
            report["stages"].append(rec)
            continue
        d = out / _DIRS[name]
        d.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            result, files = _RUNNERS[name](cfg, d, ctx)
            rec.update(status="ok", result=result, files=_files(out, files))
        except DrapekitError as exc:
            log.error("stage %s failed: %s", name, exc)
            rec.update(status="failed", error={"kind": type(exc).__name__, "message": str(exc)})
            if getattr(exc, "detail", None) is not None:
                rec["error"]["detail"] = exc.detail
            failed = True
            report["status"] = "failed"
            report["failed_stage"] = name
        rec["seconds"] = time.perf_counter() - t0
        report["stages"].append(rec)
    report["total_seconds"] = time.perf_counter() - t_all
    _dump(report, out / "report.json")
    return (1 if failed else 0), report


def strip_timing(doc):
    """Copy of a report without timing fields."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_KEYS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc


def cmd_run(args):
    path = _need_file(args.config, "config")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if args.seed_given and isinstance(cfg, dict):
        cfg["seed"] = args.seed
    code, report = run_pipeline(cfg, path.parent, jobs=args.jobs if args.jobs_given else None)
    _emit({"status": report["status"], "report": str(Path(report["config"]["out"]) / "report.json"),
           "stages": [(s["name"], s["status"]) for s in report["stages"]]})
    return code


# --------------------------------------------------------------------------
# eval


def _read_reports(paths):
    reports = []
    for p in paths:
        p = Path(p)
        f = p / "report.json" if p.is_dir() else p
        if not f.is_file():
            raise NoData(f"no report at {p}")
        doc = json.loads(f.read_text())
        if doc.get("format") != REPORT_FORMAT:
            raise ValidationError(f"{f}: not a pipeline report")
        reports.append((p, doc))
    return reports


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def eval_tables(report_dirs):
    """Summary tables from completed runs.

    Returns a dict of CSV texts: ``registration`` (one row per pair with the
    four rigid and non-rigid error columns), ``retrieval`` (accuracy per category) and
    ``fold`` (dissimilarity per trajectory). Tables without rows are omitted;
    raises :class:`NoData` when nothing is left.
    """
    reports = _read_reports(report_dirs)
    reg, ret, fold = [], [], []
    tally = {}
    for p, doc in reports:
        run = Path(p).name
        for st in doc["stages"]:
            res = st.get("result")
            if st.get("status") != "ok" or res is None:
                continue
            if st["name"] == "registration":
                for r in res["pairs"]:
                    reg.append([run, r["pair"]] + [f"{r[k]:.6g}" for k in TABLE2])
            elif st["name"] == "recognition":
                for q in res["queries"]:
                    n, c = tally.get(q["category"], (0, 0))
                    tally[q["category"]] = (n + 1, c + int(q["correct"]))
            elif st["name"] == "fold_optimize":
                for s in res["steps"]:
                    fold.append([run, s["step"], f"{s['initial_dissimilarity']:.6g}", f"{s['dissimilarity']:.6g}",
                                 f"{s['initial_cost']:.6g}", f"{s['cost']:.6g}"])
    for cat, (n, c) in sorted(tally.items()):
        ret.append([cat, n, f"{c / n:.6g}"])
    tables = {}
    if reg:
        tables["registration"] = _csv(["run", "pair", *TABLE2], reg)
    if ret:
        tables["retrieval"] = _csv(["category", "queries", "accuracy"], ret)
    if fold:
        tables["fold"] = _csv(["run", "step", "initial dissimilarity", "dissimilarity", "initial cost", "cost"],
                              fold)
    if not tables:
        raise NoData("no completed stages in the given reports")
    return tables


def cmd_eval(args):
    if not args.reports:
        raise NoData("no report directories given")
    tables = eval_tables(args.reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, text in tables.items():
            (out / f"{k}.csv").write_text(text)
    else:
        for k, text in tables.items():
            sys.stdout.write(f"# {k}\n{text}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 0)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker cap (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="drapekit", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    def leaf(parent, name, fn, help_):
        p = parent.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    db = sub.add_parser("db", help="garment database").add_subparsers(dest="action", required=True)
    p = leaf(db, "build", cmd_db_build, "simulate and featurize every garment anchor")
    p.add_argument("--garments", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--settings", help="database settings JSON")
    p.add_argument("--only", help="comma-separated garment ids")
    p = leaf(db, "list", cmd_db_list, "list database entries")
    p.add_argument("--db", required=True)
    p.add_argument("--json", action="store_true")

    fe = sub.add_parser("feature", help="binary shape features").add_subparsers(dest="action", required=True)
    p = leaf(fe, "extract", cmd_feature_extract, "feature of one mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--db", help="take settings from this database")
    g.add_argument("--settings", help="database settings JSON")
    p = leaf(fe, "match", cmd_feature_match, "rank database entries for a query")
    p.add_argument("--query", required=True, help=".feat file or .obj mesh")
    p.add_argument("--db", required=True)
    p.add_argument("--weights")
    p.add_argument("--top", type=int, default=5)

    me = sub.add_parser("metric", help="weighted Hamming metric").add_subparsers(dest="action", required=True)
    p = leaf(me, "learn", cmd_metric_learn, "learn bit weights")
    p.add_argument("--db", required=True)
    p.add_argument("--calib", required=True, help="<garment>/<grasp>/*.feat|*.obj")
    p.add_argument("--C", type=float, default=10.0)
    p.add_argument("--out", default="weights.json")

    p = leaf(sub, "register", cmd_register, "rigid and non-rigid registration")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--params", help="registration parameters JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--grid-nodes", type=int, default=128)

    si = sub.add_parser("sim", help="cloth simulation").add_subparsers(dest="action", required=True)
    p = leaf(si, "hang", cmd_sim_hang, "hang a garment from one vertex")
    p.add_argument("--mesh", required=True)
    p.add_argument("--pin", required=True, help="anchor label or vertex index")
    p.add_argument("--params", help="cloth parameters JSON")
    p.add_argument("--max-time", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p = leaf(si, "fold", cmd_sim_fold, "drive grippers along given curves")
    p.add_argument("--mesh", required=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p = leaf(si, "calibrate", cmd_sim_calibrate, "fit stiffness or friction")
    p.add_argument("--mesh", required=True)
    p.add_argument("--params")
    p.add_argument("--pin", help="hang vertex for --shear")
    p.add_argument("--shear", type=float, help="target hang stretch fraction")
    p.add_argument("--friction-angle", type=float, help="target slide onset (deg)")
    p.add_argument("--out", required=True)

    fo = sub.add_parser("fold", help="fold trajectories").add_subparsers(dest="action", required=True)
    p = leaf(fo, "optimize", cmd_fold_optimize, "optimize a fold plan")
    p.add_argument("--garment", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", help="directory for the folded OBJ of each step")
    p = leaf(fo, "replay", cmd_fold_replay, "re-simulate and write keyframes")
    p.add_argument("--garment", required=True)
    p.add_argument("--trajs", required=True)
    p.add_argument("--out", required=True)

    rg = sub.add_parser("regrasp", help="regrasp loop").add_subparsers(dest="action", required=True)
    p = leaf(rg, "run", cmd_regrasp_run, "drive a garment to the desired grasp pair")
    p.add_argument("--db", required=True)
    p.add_argument("--garment", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--weights")

    p = leaf(sub, "run", cmd_run, "run the whole pipeline from a config")
    p.add_argument("config")

    p = leaf(sub, "eval", cmd_eval, "summary tables from pipeline reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.jobs_given = hasattr(args, "jobs")
    args.seed_given = hasattr(args, "seed")
    args.seed = config.resolve_seed(getattr(args, "seed", 0))
    args.jobs = max(1, getattr(args, "jobs", 1))
    verbose = getattr(args, "verbose", 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"ValidationError: {exc}", file=sys.stderr)
        return 2
    except DrapekitError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
