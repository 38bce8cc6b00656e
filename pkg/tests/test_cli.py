import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from shaperefine import cli, toy
from shaperefine.camera import CameraPose, save_camera
from shaperefine.cli import PRESETS, main, preset_weights, resolve_config
from shaperefine.images import load_silhouette, save_silhouette
from shaperefine.losses import LossWeights
from shaperefine.mesh import load_mesh, save_mesh
from shaperefine.rasterizer import hard_silhouette

FAST = {"iterations": 3, "render_size": [32, 32], "encoder_size": [32, 32], "sigma": 1e-3,
        "weights": {"views": [[30.0, 20.0]]}}


def make_instance(folder, klass=None, gt=True, azimuth=30.0):
    folder.mkdir(parents=True)
    coarse = toy.icosphere(1)
    target = toy.box((0.9, 0.5, 0.6))
    pose = CameraPose(azimuth=azimuth, elevation=20, distance=5, image_size=(32, 32))
    save_mesh(coarse, folder / "mesh.obj")
    save_silhouette(hard_silhouette(target, pose), folder / "silhouette.png")
    save_camera(pose, folder / "camera.json")
    if gt:
        save_mesh(target, folder / "gt.obj")
    if klass:
        (folder / "meta.json").write_text(json.dumps({"class": klass}))
    return folder


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "fast.json"
    path.write_text(json.dumps(FAST))
    return path


@pytest.fixture
def batch(tmp_path):
    root = tmp_path / "batch"
    make_instance(root / "a", klass="chair")
    make_instance(root / "b", klass="chair", azimuth=60.0)
    make_instance(root / "c", klass="table", azimuth=120.0)
    return root


def run(argv):
    return main([str(a) for a in argv])


def test_single_refine_happy_path(tmp_path, config_file):
    inst = make_instance(tmp_path / "one")
    out = tmp_path / "out" / "refined.obj"
    code = run(["refine", "--mesh", inst / "mesh.obj", "--silhouette", inst / "silhouette.png",
                "--camera", inst / "camera.json", "--gt", inst / "gt.obj", "--out", out,
                "--config", config_file, "--samples", 128])
    assert code == 0
    assert load_mesh(out).n_vertices == 42
    trace = (out.parent / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("iter,total,sil,isym,vsym,dis,nc,lp,iou2d") and len(trace) == 4
    report = json.loads((out.parent / "report.json").read_text())
    row = report["instances"][0]
    assert row["status"] == "ok" and set(row["after"]) == set(cli.METRICS)
    for k in row["delta"]:
        assert row["delta"][k] == row["after"][k] - row["before"][k]


def test_iters_zero_is_usage_error(tmp_path, capsys):
    inst = make_instance(tmp_path / "one")
    code = run(["refine", "--mesh", inst / "mesh.obj", "--silhouette", inst / "silhouette.png",
                "--camera", inst / "camera.json", "--out", tmp_path / "o.obj", "--iters", 0])
    assert code == 1
    assert "iterations" in capsys.readouterr().err


def test_missing_input_names_path(tmp_path, capsys):
    code = run(["refine", "--mesh", tmp_path / "nope.obj", "--silhouette", tmp_path / "s.png",
                "--camera", tmp_path / "c.json", "--out", tmp_path / "o.obj"])
    assert code == 1
    assert "nope.obj" in capsys.readouterr().err


def test_unknown_subcommand_and_flag():
    assert run(["polish"]) == 1
    assert run(["refine", "--bogus"]) == 1
    assert run([]) == 1


def test_batch_with_bad_camera_is_partial_failure(batch, tmp_path, config_file):
    (batch / "b" / "camera.json").write_text("{not json")
    out = tmp_path / "bout"
    code = run(["refine", "--batch", batch, "--out", out, "--config", config_file, "--samples", 64])
    assert code == 2
    manifest = json.loads((out / "manifest.json").read_text())
    status = {e["id"]: e["status"] for e in manifest["instances"]}
    assert status == {"a": "ok", "b": "failed", "c": "ok"}
    assert (out / "a" / "refined.obj").is_file() and (out / "c" / "refined.obj").is_file()
    assert not (out / "b").exists()
    # seeds follow the instance position even when a neighbour fails
    assert [e["seed"] for e in manifest["instances"]] == [0, 1, 2]


def test_batch_all_failing_exits_one(batch, tmp_path, config_file):
    for name in "abc":
        (batch / name / "camera.json").unlink()
    assert run(["refine", "--batch", batch, "--out", tmp_path / "o", "--config", config_file]) == 1


def test_reports_validate_against_schema(batch, tmp_path, config_file):
    out = tmp_path / "bout"
    assert run(["refine", "--batch", batch, "--out", out, "--config", config_file, "--samples", 64]) == 0
    schema = cli.load_schema()
    jsonschema.validate(json.loads((out / "report.json").read_text()), schema)
    bad = json.loads((out / "report.json").read_text())
    bad["instances"][0]["surprise"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)
    bad = json.loads((out / "report.json").read_text())
    bad["schema_version"] = "0.9"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


def test_replay_reproduces_bit_identical_outputs(batch, tmp_path, config_file):
    out = tmp_path / "first"
    assert run(["refine", "--batch", batch, "--out", out, "--config", config_file, "--samples", 64]) == 0
    again = tmp_path / "second"
    assert run(["replay", "--manifest", out / "manifest.json", "--out", again, "--check"]) == 0
    for name in "abc":
        assert (out / name / "refined.obj").read_bytes() == (again / name / "refined.obj").read_bytes()
        assert (out / name / "trace.csv").read_bytes() == (again / name / "trace.csv").read_bytes()
    assert (out / "report.json").read_bytes() == (again / "report.json").read_bytes()


def test_replay_check_detects_difference(batch, tmp_path, config_file):
    out = tmp_path / "first"
    run(["refine", "--batch", batch, "--out", out, "--config", config_file, "--samples", 64])
    report = out / "report.json"
    report.write_text(report.read_text().replace('"seed": 0', '"seed": 99', 1))
    assert run(["replay", "--manifest", out / "manifest.json", "--out", tmp_path / "r", "--check"]) == 1


class _Args:
    def __init__(self, **kw):
        self.config = None
        for flag in cli.FLAG_FIELDS:
            setattr(self, flag, None)
        self.__dict__.update(kw)


@pytest.mark.parametrize("in_file", [False, True])
@pytest.mark.parametrize("on_flag", [False, True])
def test_config_precedence_matrix(tmp_path, in_file, on_flag):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "lr": 1e-3} if in_file else {}))
    args = _Args(config=str(cfg), seed=9 if on_flag else None)
    got = resolve_config(args)
    want_seed = 9 if on_flag else (5 if in_file else 0)
    assert got.seed == want_seed
    assert got.lr == (1e-3 if in_file else 7e-5)
    assert got.iterations == 400


def test_config_file_errors(tmp_path):
    with pytest.raises(cli.UsageError):
        resolve_config(_Args(config=str(tmp_path / "missing.json")))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"iterationz": 3}))
    with pytest.raises(cli.UsageError):
        resolve_config(_Args(config=str(bad)))


def test_presets_match_ablation_settings():
    zero = dict(isym=0.0, vsym=0.0, dis=0.0, nc=0.0, lp=0.0)
    assert preset_weights("sil") == LossWeights(sil=10.0, **zero)
    assert preset_weights("sil+reg") == LossWeights(sil=10.0, **dict(zero, dis=100.0, nc=10.0, lp=10.0))
    assert preset_weights("sil+reg+vsym") == LossWeights(
        sil=10.0, **dict(zero, vsym=20.0, dis=100.0, nc=10.0, lp=10.0))
    t = preset_weights("total")
    assert (t.sil, t.isym, t.vsym, t.dis, t.nc, t.lp, t.symb) == (10, 80, 20, 100, 10, 10, 0.0005)
    assert preset_weights("total-symb1") == LossWeights(symb=1.0)
    with pytest.raises(cli.UsageError):
        preset_weights("everything")


def test_evaluate_identical_prediction(tmp_path, capsys):
    m = tmp_path / "m.obj"
    save_mesh(toy.icosphere(2), m)
    rep = tmp_path / "r.json"
    assert run(["evaluate", "--pred", m, "--gt", m, "--samples", 256, "--report", rep]) == 0
    after = json.loads(rep.read_text())["instances"][0]["after"]
    assert after == {"emd": 0.0, "cd": 0.0, "fscore": 100.0, "viou": 1.0}
    assert "F-Score" in capsys.readouterr().out


def test_evaluate_delta_and_cube_overlap(tmp_path, capsys):
    half = 0.5
    gt, pred, before = tmp_path / "gt.obj", tmp_path / "pred.obj", tmp_path / "before.obj"
    save_mesh(toy.box((half,) * 3, center=(0.5, 0.5, 0.5)), gt)
    save_mesh(toy.box((half,) * 3, center=(1.0, 0.5, 0.5)), pred)
    save_mesh(toy.box((half,) * 3, center=(1.3, 0.5, 0.5)), before)
    rep, table = tmp_path / "r.json", tmp_path / "r.csv"
    code = run(["evaluate", "--pred", pred, "--gt", gt, "--pred-before", before, "--samples", 256,
                "--metrics", "cd,viou", "--report", rep, "--csv", table])
    assert code == 0
    row = json.loads(rep.read_text())["instances"][0]
    assert abs(row["after"]["viou"] - 1 / 3) <= 0.03
    for k in ("cd", "viou"):
        assert row["delta"][k] == row["after"][k] - row["before"][k]
    assert "→" in capsys.readouterr().out
    rows = list(csv.DictReader(table.open()))
    assert float(rows[0]["viou_delta"]) == row["delta"]["viou"]
    assert rows[-1]["id"] == "mean"


def test_evaluate_requires_gt(tmp_path, capsys):
    m = tmp_path / "m.obj"
    save_mesh(toy.octahedron(), m)
    assert run(["evaluate", "--pred", m]) == 1
    assert "ground truth" in capsys.readouterr().err
    assert run(["evaluate", "--pred", m, "--metrics", "psnr", "--gt", m]) == 1


def test_evaluate_batch_class_means(batch, tmp_path, config_file):
    out = tmp_path / "bout"
    run(["refine", "--batch", batch, "--out", out, "--config", config_file, "--samples", 64])
    rep = tmp_path / "eval.json"
    assert run(["evaluate", "--batch", batch, "--pred-dir", out, "--samples", 64, "--report", rep]) == 0
    data = json.loads(rep.read_text())
    classes = {c["class"]: c for c in data["classes"]}
    assert classes["chair"]["count"] == 2 and classes["table"]["count"] == 1
    chair = [r for r in data["instances"] if r["class"] == "chair"]
    assert classes["chair"]["after"]["cd"] == pytest.approx(np.mean([r["after"]["cd"] for r in chair]))
    assert "iou2d" in data["metrics"]


def test_render_cube_front_view_is_centered_square(tmp_path):
    cube = tmp_path / "cube.obj"
    save_mesh(toy.box((0.5, 0.5, 0.5)), cube)
    cam = tmp_path / "cam.json"
    save_camera(CameraPose(azimuth=0, elevation=0, distance=4, image_size=(64, 64)), cam)
    png = tmp_path / "sil.png"
    assert run(["render", "--mesh", cube, "--camera", cam, "--out", png]) == 0
    img = load_silhouette(png, binary=True) > 0
    rows, cols = np.nonzero(img)
    assert rows.min() + rows.max() == 63 and cols.min() + cols.max() == 63
    assert rows.max() - rows.min() == cols.max() - cols.min()
    # a square: every pixel in the bounding box is covered
    assert img[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()

    soft = tmp_path / "soft.png"
    assert run(["render", "--mesh", cube, "--camera", cam, "--out", soft, "--soft", "--sigma", 1e-5]) == 0
    diff = (load_silhouette(soft, binary=True) > 0) != img
    boundary = np.zeros_like(img)
    boundary[rows.min() - 1:rows.max() + 2, cols.min() - 1:cols.max() + 2] = True
    boundary[rows.min() + 1:rows.max(), cols.min() + 1:cols.max()] = False
    assert not (diff & ~boundary).any()

    conf = tmp_path / "conf.npy"
    np.save(conf, np.full(8, 0.5))
    heat = tmp_path / "heat.png"
    assert run(["render", "--mesh", cube, "--camera", cam, "--out", heat, "--confidence", conf]) == 0
    vals = np.asarray(load_silhouette(heat))
    assert np.all(vals[img] == 128 / 255) and np.all(vals[~img] == 0)
    np.save(conf, np.full(5, 0.5))
    assert run(["render", "--mesh", cube, "--camera", cam, "--out", heat, "--confidence", conf]) == 1


def test_ablate_runs_every_preset(batch, tmp_path, config_file):
    out = tmp_path / "abl"
    code = run(["ablate", "--batch", batch, "--out", out, "--configs", "sil,total",
                "--config", config_file, "--samples", 64, "--metrics", "cd,iou2d"])
    assert code == 0
    data = json.loads((out / "ablation.json").read_text())
    assert [p["preset"] for p in data["presets"]] == ["sil", "total"]
    assert data["presets"][0]["weights"]["isym"] == 0.0
    assert (out / "sil" / "a" / "refined.obj").is_file()
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "preset,cd,iou2d" and lines[1].startswith("none,")
    assert run(["ablate", "--batch", batch, "--out", out, "--configs", "sil,magic"]) == 1


def test_log_level_from_environment(tmp_path):
    env = {"REFINE_LOG": "debug", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "shaperefine", "evaluate", "--pred", "x"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1
    assert "error:" in proc.stderr


def test_mesh_outputs_are_deterministic_across_runs(tmp_path, config_file):
    inst = make_instance(tmp_path / "one", gt=False)
    outs = []
    for k in range(2):
        out = tmp_path / ("o%d.obj" % k)
        run(["refine", "--mesh", inst / "mesh.obj", "--silhouette", inst / "silhouette.png",
             "--camera", inst / "camera.json", "--out", out, "--config", config_file])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_main_restores_package_logger(tmp_path):
    import logging

    pkg = logging.getLogger("shaperefine")
    before = (pkg.level, list(pkg.handlers))
    run(["evaluate", "--pred", tmp_path / "missing.obj", "--gt", tmp_path / "missing.obj"])
    assert (pkg.level, list(pkg.handlers)) == before
