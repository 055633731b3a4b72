import json
import shutil

import pytest

from drapekit import cli
from drapekit.cli import check_pipeline, eval_tables, main, run_pipeline, strip_timing
from drapekit.errors import NoData, ValidationError
from drapekit.fixtures import data_dir

STAGES = ["db_build", "recognition", "registration", "regrasp", "fold_optimize"]


def towel_config(garments, out, **over):
    cfg = {
        "seed": 3,
        "out": str(out),
        "garments": str(garments),
        "garment": "towel",
        "registration": {"pairs": 1},
        "regrasp": {"left": "corner_a", "right": "corner_b", "start": "corner_c", "max_iters": 3},
        "fold": {"steps": [{"grasp": ["corner_b", "corner_c"], "line_point": [0.2, 0.0], "direction": [0.0, 1.0]}],
                 "max_iter": 1, "duration": 1.0, "settle_time": 1.0},
    }
    cfg.update(over)
    return cfg


@pytest.fixture(scope="module")
def towel_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("garments")
    for suffix in (".obj", ".anchors.json", ".category"):
        shutil.copy(data_dir() / f"towel{suffix}", d / f"towel{suffix}")
    return d


def artifacts(out):
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.suffix in (".obj", ".feat")}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory, towel_dir):
    root = tmp_path_factory.mktemp("run")
    path = root / "pipeline.json"
    path.write_text(json.dumps(towel_config(towel_dir, "out")))
    codes, reports, files = [], [], []
    for _ in range(2):
        codes.append(main(["run", str(path)]))
        reports.append(json.loads((root / "out" / "report.json").read_text()))
        files.append(artifacts(root / "out"))
    return root, codes, reports, files


def test_happy_path_lists_five_stages(two_runs):
    root, codes, reports, _ = two_runs
    assert codes[0] == 0
    rep = reports[0]
    assert rep["status"] == "ok"
    assert [s["name"] for s in rep["stages"]] == STAGES
    assert all(s["status"] == "ok" for s in rep["stages"])
    for s in rep["stages"]:
        for f in s["files"]:
            assert (root / "out" / f["path"]).is_file()


def test_rerun_is_identical(two_runs):
    _, codes, reports, files = two_runs
    assert codes == [0, 0]
    assert strip_timing(reports[0]) == strip_timing(reports[1])
    assert files[0] and files[0] == files[1]
    kinds = {p.suffix for p in files[0]}
    assert kinds == {".obj", ".feat"}


def test_eval_single_pair(two_runs):
    root = two_runs[0]
    tables = eval_tables([root / "out"])
    rows = tables["registration"].strip().splitlines()
    assert len(rows) == 2
    assert len(rows[1].split(",")) == 2 + 4
    assert "retrieval" in tables and "fold" in tables


def test_missing_mesh_is_rejected_before_compute(tmp_path, towel_dir, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(towel_config(empty, "out")))
    assert main(["run", str(path)]) == 2
    assert "ValidationError" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unknown_key_rejected(tmp_path, towel_dir):
    cfg = towel_config(towel_dir, tmp_path / "out", colour="blue")
    with pytest.raises(ValidationError):
        check_pipeline(cfg)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path)]) == 2


def test_unknown_anchor_rejected(towel_dir, tmp_path):
    cfg = towel_config(towel_dir, tmp_path / "out")
    cfg["regrasp"]["left"] = "sleeve"
    with pytest.raises(ValidationError):
        check_pipeline(cfg)


def test_seed_environment_override(monkeypatch, towel_dir, tmp_path):
    captured = {}

    def fake_run(cfg, base, jobs=None):
        captured["seed"] = cli.config.resolve_seed(cfg.get("seed", 0))
        return 0, {"status": "ok", "config": {"out": "x"}, "stages": []}

    monkeypatch.setattr(cli, "run_pipeline", fake_run)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(towel_config(towel_dir, "out")))
    main(["run", str(path)])
    assert captured["seed"] == 3
    main(["run", str(path), "--seed", "11"])
    assert captured["seed"] == 11
    monkeypatch.setenv("DRAPEKIT_SEED", "42")
    main(["run", str(path), "--seed", "11"])
    assert captured["seed"] == 42


def test_failing_stage_reported(tmp_path, towel_dir):
    cfg = towel_config(towel_dir, tmp_path / "out")
    cfg["regrasp"].update(xi=10.0, max_iters=1)
    code, rep = run_pipeline(cfg)
    assert code == 1
    assert rep["failed_stage"] == "regrasp"
    status = {s["name"]: s["status"] for s in rep["stages"]}
    assert status["regrasp"] == "failed" and status["fold_optimize"] == "skipped"
    assert rep["stages"][3]["error"]["kind"] == "StageFailed"


# --------------------------------------------------------------------------
# eval on synthetic reports


def fake_report(queries):
    return {"format": cli.REPORT_FORMAT, "stages": [
        {"name": "recognition", "status": "ok", "result": {"queries": queries}}]}


def test_eval_retrieval_accuracy(tmp_path):
    qs = [{"category": "towel", "correct": True}] * 4 + [{"category": "shirt", "correct": True}] * 2
    (tmp_path / "report.json").write_text(json.dumps(fake_report(qs)))
    rows = eval_tables([tmp_path])["retrieval"].strip().splitlines()
    assert rows == ["category,queries,accuracy", "shirt,2,1", "towel,4,1"]


def test_eval_no_data(tmp_path):
    with pytest.raises(NoData):
        eval_tables([tmp_path])
    (tmp_path / "report.json").write_text(json.dumps(fake_report([])))
    with pytest.raises(NoData):
        eval_tables([tmp_path])
    assert main(["eval"]) == 1


def test_eval_writes_csv(tmp_path):
    qs = [{"category": "towel", "correct": False}, {"category": "towel", "correct": True}]
    (tmp_path / "r.json").write_text(json.dumps(fake_report(qs)))
    assert main(["eval", str(tmp_path / "r.json"), "--out", str(tmp_path / "tables")]) == 0
    assert (tmp_path / "tables" / "retrieval.csv").read_text().splitlines()[1] == "towel,2,0.5"


# --------------------------------------------------------------------------
# subcommands


def test_db_list_and_feature_match(two_runs, capsys):
    db = two_runs[0] / "out" / "db"
    assert main(["db", "list", "--db", str(db)]) == 0
    assert capsys.readouterr().out.strip().endswith("4 entries")
    feat = two_runs[0] / "out" / "recognition" / "towel" / "corner_a.feat"
    assert main(["feature", "match", "--query", str(feat), "--db", str(db), "--top", "2"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["matches"]) == 2
    assert doc["matches"][0]["score"] <= doc["matches"][1]["score"]  # weighted Hamming distance


def test_feature_extract_matches_database(two_runs, tmp_path, capsys):
    db = two_runs[0] / "out" / "db"
    drape = db / json.loads((db / "manifest.json").read_text())["entries"][0]["drape"]
    out = tmp_path / "q.feat"
    assert main(["feature", "extract", "--mesh", str(drape), "--db", str(db), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["feature", "match", "--query", str(out), "--db", str(db), "--top", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["matches"][0]["id"] == json.loads((db / "manifest.json").read_text())["entries"][0]["id"]


def test_missing_input_exit_code(tmp_path, capsys):
    assert main(["db", "list", "--db", str(tmp_path / "nope")]) == 2
    assert "ValidationError" in capsys.readouterr().err


def test_metric_learn(two_runs, tmp_path, capsys):
    out = two_runs[0] / "out"
    for f in (out / "recognition" / "towel").glob("*.feat"):
        d = tmp_path / "calib" / "towel" / f.stem
        d.mkdir(parents=True)
        shutil.copy(f, d / "q.feat")
    w = tmp_path / "w.json"
    assert main(["metric", "learn", "--db", str(out / "db"), "--calib", str(tmp_path / "calib"),
                 "--out", str(w)]) == 0
    assert json.loads(capsys.readouterr().out)["queries"] == 4
    assert w.is_file()


def test_register_command(two_runs, tmp_path, capsys):
    out = two_runs[0] / "out"
    drape = sorted((out / "db").rglob("*.obj"))[0]
    rep = tmp_path / "reg.json"
    assert main(["register", "--source", str(drape), "--target", str(drape), "--out", str(tmp_path / "r.obj"),
                 "--report", str(rep), "--grid-nodes", "64"]) == 0
    doc = json.loads(rep.read_text())
    assert doc["error"] <= doc["rigid_error"] + 1e-12 < 1e-3


def test_sim_hang_and_calibrate(towel_dir, tmp_path, capsys):
    mesh = str(towel_dir / "towel.obj")
    log = tmp_path / "hang.json"
    assert main(["sim", "hang", "--mesh", mesh, "--pin", "corner_a", "--max-time", "1.0",
                 "--out", str(tmp_path / "h.obj"), "--log", str(log)]) == 0
    doc = json.loads(log.read_text())
    e = [v for _, v in doc["energy"]]
    assert all(b <= a + 1e-9 for a, b in zip(e, e[1:]))
    assert main(["sim", "calibrate", "--mesh", mesh, "--shear", "0.02", "--friction-angle", "20",
                 "--out", str(tmp_path / "c.json")]) == 2
    assert main(["sim", "calibrate", "--mesh", mesh, "--friction-angle", "20", "--out", str(tmp_path / "c.json")]) == 0
    assert 0.3 < json.loads((tmp_path / "c.json").read_text())["friction"] < 0.45


def test_regrasp_and_replay(two_runs, towel_dir, tmp_path, capsys):
    out = two_runs[0] / "out"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"left": "corner_a", "right": "corner_b", "start": "corner_a"}))
    trace = tmp_path / "trace.json"
    assert main(["regrasp", "run", "--db", str(out / "db"), "--garment", str(towel_dir / "towel.obj"),
                 "--spec", str(spec), "--trace", str(trace)]) == 0
    assert json.loads(trace.read_text())["converged"]
    assert main(["fold", "replay", "--garment", str(towel_dir / "towel.obj"), "--trajs",
                 str(out / "fold" / "trajs.json"), "--out", str(tmp_path / "frames")]) == 0
    assert list((tmp_path / "frames").glob("step0_*.obj"))
