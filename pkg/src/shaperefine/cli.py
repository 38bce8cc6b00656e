"""Command-line interface: refine, evaluate, render, ablate, replay."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .camera import CameraPose, load_camera
from .images import load_silhouette, save_silhouette
from .losses import LossWeights
from .mesh import TriangleMesh, denormalize, load_mesh, normalize_unit_cube, save_mesh
from .metrics import evaluate_meshes, silhouette_iou_2d
from .optimizer import InstanceFailure, RefineConfig, RefineTask, refine_batch, write_trace_csv
from .rasterizer import RenderSettings, hard_silhouette, rasterize_attribute, soft_silhouette

logger = logging.getLogger("shaperefine")

SCHEMA_VERSION = "1.0"
METRICS = ("emd", "cd", "fscore", "viou", "iou2d")
METRIC_LABELS = {"emd": "EMD", "cd": "CD-l2 x1e3", "fscore": "F-Score", "viou": "Vol. IoU",
                 "iou2d": "2D IoU"}
# display scale of each metric in printed tables (JSON/CSV keep raw values)
METRIC_SCALE = {"emd": 1.0, "cd": 1e3, "fscore": 1.0, "viou": 1.0, "iou2d": 1.0}
REFINE_REPORT = "report.json"
MANIFEST = "manifest.json"
DEFAULT_SAMPLES = 2048

PRESETS = {
    "sil": dict(sil=10.0, isym=0.0, vsym=0.0, dis=0.0, nc=0.0, lp=0.0),
    "sil+reg": dict(sil=10.0, isym=0.0, vsym=0.0, dis=100.0, nc=10.0, lp=10.0),
    "sil+reg+vsym": dict(sil=10.0, isym=0.0, vsym=20.0, dis=100.0, nc=10.0, lp=10.0, symb=0.0005),
    "total": {},
    "total-symb1": dict(symb=1.0),
}


class UsageError(Exception):
    """Bad command line or missing input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("%s: %s" % (self.prog, message))


def preset_weights(name: str) -> LossWeights:
    if name not in PRESETS:
        raise UsageError("unknown preset %r (choose from %s)" % (name, ", ".join(PRESETS)))
    return replace(LossWeights(), **PRESETS[name])


# ---------------------------------------------------------------- config


def _size(text):
    parts = str(text).lower().replace("x", ",").split(",")
    if len(parts) == 1:
        parts = parts * 2
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("expected WxH, got %r" % text) from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("image size must be positive")
    return (w, h)


FLAG_FIELDS = {"iters": "iterations", "seed": "seed", "lr": "lr", "sigma": "sigma",
               "render_size": "render_size", "encoder_size": "encoder_size"}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError("config file not found: %s" % path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError("%s: invalid JSON (%s)" % (path, exc)) from None
    if not isinstance(data, dict):
        raise UsageError("%s: config must be a JSON object" % path)
    return data


def resolve_config(args, base: dict | None = None) -> RefineConfig:
    """Defaults, then the config file, then explicit flags."""
    data = dict(base or {})
    if getattr(args, "config", None):
        data.update(load_config_file(args.config))
    data.pop("normalize", None)
    for flag, key in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if "iterations" in data and int(data["iterations"]) < 1:
        raise UsageError("iterations must be at least 1, got %s" % data["iterations"])
    try:
        return RefineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError("invalid configuration: %s" % exc) from None


def resolve_normalize(args) -> str:
    if getattr(args, "normalize", None):
        return args.normalize
    if getattr(args, "config", None):
        return load_config_file(args.config).get("normalize", "none")
    return "none"


# ---------------------------------------------------------------- instances


@dataclass
class InstanceRecord:
    id: str
    coarse_mesh_path: str
    silhouette_path: str
    camera_path: str
    ground_truth_mesh_path: str | None = None
    klass: str = "all"

    def to_dict(self):
        return {"id": self.id, "mesh": self.coarse_mesh_path, "silhouette": self.silhouette_path,
                "camera": self.camera_path, "gt": self.ground_truth_mesh_path, "class": self.klass}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["mesh"], d["silhouette"], d["camera"], d.get("gt"), d.get("class", "all"))


def scan_batch(directory) -> list:
    """Instance records from per-instance subfolders of ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise UsageError("batch directory not found: %s" % root)
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        gt = sub / "gt.obj"
        klass = "all"
        meta = sub / "meta.json"
        if meta.is_file():
            try:
                klass = str(json.loads(meta.read_text()).get("class", "all"))
            except json.JSONDecodeError:
                logger.warning("%s: ignoring unreadable meta.json", sub)
        records.append(InstanceRecord(sub.name, str((sub / "mesh.obj").resolve()),
                                      str((sub / "silhouette.png").resolve()),
                                      str((sub / "camera.json").resolve()),
                                      str(gt.resolve()) if gt.is_file() else None, klass))
    if not records:
        raise UsageError("batch directory has no instance folders: %s" % root)
    return records


def normalize_pose(pose: CameraPose, center, scale) -> CameraPose:
    """Camera seeing the normalized mesh exactly as ``pose`` sees the original."""
    look = (np.asarray(pose.look_at) - center) * scale
    eye = (np.asarray(pose.eye) - center) * scale
    return CameraPose(azimuth=pose.azimuth, elevation=pose.elevation, distance=pose.distance * scale,
                      fov_y=pose.fov_y, image_size=pose.image_size, look_at=tuple(look),
                      up=pose.up, eye=tuple(eye))


@dataclass
class LoadedInstance:
    record: InstanceRecord
    mesh: TriangleMesh
    silhouette: np.ndarray
    pose: CameraPose
    transform: tuple | None = None


def load_instance(rec: InstanceRecord, normalize: str = "none") -> LoadedInstance:
    for p in (rec.coarse_mesh_path, rec.silhouette_path, rec.camera_path):
        if not Path(p).is_file():
            raise FileNotFoundError(p)
    mesh = load_mesh(rec.coarse_mesh_path)
    sil = load_silhouette(rec.silhouette_path)
    pose = load_camera(rec.camera_path, image_size=(sil.shape[1], sil.shape[0]))
    transform = None
    if normalize == "unit-cube":
        mesh, transform = normalize_unit_cube(mesh)
        pose = normalize_pose(pose, *transform)
    elif normalize != "none":
        raise UsageError("unknown normalization %r" % normalize)
    return LoadedInstance(rec, mesh, sil, pose, transform)


# ---------------------------------------------------------------- writing


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def load_schema() -> dict:
    text = resources.files("shaperefine").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, load_schema())


# ---------------------------------------------------------------- refine


def _instance_metrics(inst: LoadedInstance, refined: TriangleMesh, samples, seed, metrics=METRICS):
    """Metrics of coarse and refined meshes in the instance's original frame."""
    coarse = inst.mesh
    pose = inst.pose
    if inst.transform is not None:
        refined = denormalize(refined, *inst.transform)
        coarse = denormalize(coarse, *inst.transform)
        pose = load_camera(inst.record.camera_path, image_size=pose.image_size)
    out = {"before": {"iou2d": silhouette_iou_2d(coarse, pose, inst.silhouette)},
           "after": {"iou2d": silhouette_iou_2d(refined, pose, inst.silhouette)}}
    gt_path = inst.record.ground_truth_mesh_path
    if gt_path:
        gt = load_mesh(gt_path)
        wanted = [m for m in metrics if m != "iou2d"]
        out["before"].update(evaluate_meshes(coarse, gt, samples, seed, metrics=wanted))
        out["after"].update(evaluate_meshes(refined, gt, samples, seed, metrics=wanted))
    return out


def run_refine(records, config: RefineConfig, out_dir: Path, normalize="none", jobs=1,
               single_out: Path | None = None, report_path: Path | None = None,
               samples=DEFAULT_SAMPLES, metrics=METRICS) -> tuple:
    """Refine ``records`` and write meshes, traces, report and manifest.

    Returns ``(report dict, manifest dict)``.
    """
    start = time.perf_counter()
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded, entries = {}, []
    for i, rec in enumerate(records):
        entry = {"id": rec.id, "index": i, "seed": config.seed + i, "inputs": rec.to_dict(),
                 "status": "pending"}
        try:
            loaded[i] = load_instance(rec, normalize)
        except UsageError:
            raise
        except Exception as exc:
            entry.update(status="failed", error=type(exc).__name__, message=str(exc))
            logger.error("instance %s: %s: %s", rec.id, type(exc).__name__, exc)
        entries.append(entry)

    order = sorted(loaded)
    tasks = [RefineTask(loaded[i].mesh, loaded[i].silhouette, loaded[i].pose, loaded[i].record.id)
             for i in order]
    results = dict(zip(order, refine_batch(tasks, config, parallelism=jobs, indices=order)))

    report_rows = []
    for i, entry in enumerate(entries):
        row = {"id": entry["id"], "class": records[i].klass, "seed": entry["seed"],
               "status": entry["status"]}
        res = results.get(i)
        if isinstance(res, InstanceFailure):
            entry.update(status="failed", error=res.error, message=res.message)
            logger.error("instance %s failed: %s: %s", res.id, res.error, res.message)
        elif res is not None:
            inst = loaded[i]
            inst_dir = out_dir if single_out is not None else out_dir / entry["id"]
            inst_dir.mkdir(parents=True, exist_ok=True)
            mesh_path = single_out if single_out is not None else inst_dir / "refined.obj"
            trace_path = inst_dir / "trace.csv"
            refined = res.mesh
            final = refined if inst.transform is None else denormalize(refined, *inst.transform)
            save_mesh(final, mesh_path)
            write_trace_csv(res.trace, trace_path)
            np.save(inst_dir / "confidence.npy", res.confidences)
            entry.update(status="ok", outputs={"mesh": str(mesh_path), "trace": str(trace_path),
                                               "confidence": str(inst_dir / "confidence.npy")},
                         wall_time=res.wall_time)
            mets = _instance_metrics(inst, refined, samples, config.seed, metrics)
            row.update(iterations=res.iterations, best_iteration=res.best_iteration,
                       initial_loss=res.initial_loss, best_loss=res.best_loss,
                       terms={k: _clean(v) for k, v in res.trace[res.best_iteration].items()
                              if k not in ("iter", "total", "iou2d")},
                       before=mets["before"], after=mets["after"],
                       delta={k: mets["after"][k] - mets["before"][k] for k in mets["after"]})
        row["status"] = entry["status"]
        if entry["status"] == "failed":
            row.update(error=entry.get("error"), message=entry.get("message"))
        report_rows.append(row)

    report = {"schema_version": SCHEMA_VERSION, "kind": "refine", "config": config.to_dict(),
              "normalize": normalize, "instances": report_rows}
    validate_report(report)
    report_path = report_path or out_dir / REFINE_REPORT
    atomic_write(report_path, dump_json(report))
    manifest = {"schema_version": SCHEMA_VERSION, "kind": "manifest", "command": "refine",
                "config": config.to_dict(), "normalize": normalize, "jobs": jobs,
                "samples": samples, "metrics": list(metrics),
                "single_out": str(single_out) if single_out is not None else None,
                "report": str(report_path), "instances": entries,
                "timing": {"wall_time": time.perf_counter() - start}}
    atomic_write(out_dir / MANIFEST, dump_json(manifest))
    return report, manifest


def _refine_exit(entries) -> int:
    failed = sum(e["status"] != "ok" for e in entries)
    if failed == 0:
        return 0
    return 2 if failed < len(entries) else 1


def cmd_refine(args) -> int:
    config = resolve_config(args)
    normalize = resolve_normalize(args)
    metrics = _parse_metrics(args.metrics)
    if args.batch:
        if args.mesh or args.silhouette or args.camera:
            raise UsageError("--batch cannot be combined with --mesh/--silhouette/--camera")
        records = scan_batch(args.batch)
        out_dir = Path(args.out)
        report, manifest = run_refine(records, config, out_dir, normalize, jobs=args.jobs,
                                      report_path=Path(args.report) if args.report else None,
                                      samples=args.samples, metrics=metrics)
    else:
        missing = [f for f in ("mesh", "silhouette", "camera") if not getattr(args, f)]
        if missing:
            raise UsageError("refine needs --%s (or --batch DIR)" % ", --".join(missing))
        for p in (args.mesh, args.silhouette, args.camera, args.gt):
            if p and not Path(p).is_file():
                raise UsageError("input not found: %s" % p)
        out = Path(args.out)
        if out.suffix.lower() == ".obj":
            out_dir, single_out = out.parent, out
        else:
            out_dir, single_out = out, out / "refined.obj"
        rec = InstanceRecord(Path(args.mesh).stem, str(Path(args.mesh).resolve()),
                             str(Path(args.silhouette).resolve()), str(Path(args.camera).resolve()),
                             str(Path(args.gt).resolve()) if args.gt else None)
        report, manifest = run_refine([rec], config, out_dir, normalize, single_out=single_out,
                                      report_path=Path(args.report) if args.report else None,
                                      samples=args.samples, metrics=metrics)
    for e in manifest["instances"]:
        if e["status"] == "ok":
            print("%s: ok -> %s" % (e["id"], e["outputs"]["mesh"]))
        else:
            print("%s: FAILED %s: %s" % (e["id"], e.get("error"), e.get("message")), file=sys.stderr)
    return _refine_exit(manifest["instances"])


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise UsageError("manifest not found: %s" % path)
    man = json.loads(path.read_text())
    if man.get("kind") != "manifest":
        raise UsageError("%s is not a run manifest" % path)
    config = RefineConfig.from_dict(man["config"])
    records = [InstanceRecord.from_dict(e["inputs"]) for e in man["instances"]]
    out_dir = Path(args.out)
    single = None
    if man.get("single_out"):
        single = out_dir / Path(man["single_out"]).name
    report, manifest = run_refine(records, config, out_dir, man.get("normalize", "none"),
                                  jobs=args.jobs or man.get("jobs", 1), single_out=single,
                                  samples=man.get("samples", DEFAULT_SAMPLES),
                                  metrics=tuple(man.get("metrics", METRICS)))
    code = _refine_exit(manifest["instances"])
    if args.check:
        original = Path(man["report"])
        new = out_dir / REFINE_REPORT
        if not original.is_file():
            raise UsageError("original report not found: %s" % original)
        same = original.read_bytes() == new.read_bytes()
        print("replay %s: report %s" % ("matches" if same else "DIFFERS", original))
        if not same:
            return 1
    return code


# ---------------------------------------------------------------- evaluate


def _parse_metrics(text):
    if not text:
        return METRICS
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown:
        raise UsageError("unknown metric(s) %s (choose from %s)" % (", ".join(unknown), ", ".join(METRICS)))
    return tuple(m for m in METRICS if m in names)


def _align(mesh, mode):
    if mode == "unit-cube":
        return normalize_unit_cube(mesh)[0]
    return mesh


def evaluate_pair(pred, gt, before=None, pose=None, silhouette=None, metrics=METRICS,
                  samples=DEFAULT_SAMPLES, seed=0, tau=None, resolution=32, align="none"):
    kw = dict(samples=samples, seed=seed, resolution=resolution, tau=tau, pose=pose,
              silhouette=silhouette, metrics=metrics)
    if align != "none":
        # 2D IoU needs the original frame, so alignment only affects 3D metrics
        kw3 = dict(kw, metrics=[m for m in metrics if m != "iou2d"])
        after = evaluate_meshes(_align(pred, align), _align(gt, align), **kw3)
        if "iou2d" in metrics and pose is not None and silhouette is not None:
            after["iou2d"] = silhouette_iou_2d(pred, pose, silhouette)
        prev = None
        if before is not None:
            prev = evaluate_meshes(_align(before, align), _align(gt, align), **kw3)
            if "iou2d" in after:
                prev["iou2d"] = silhouette_iou_2d(before, pose, silhouette)
    else:
        after = evaluate_meshes(pred, gt, **kw)
        prev = evaluate_meshes(before, gt, **kw) if before is not None else None
    row = {"after": after, "before": prev, "delta": None}
    if prev is not None:
        row["delta"] = {k: after[k] - prev[k] for k in after}
    return row


def class_means(rows, metrics) -> list:
    groups = {}
    for r in rows:
        groups.setdefault(r["class"], []).append(r)
    out = []
    for klass in sorted(groups):
        rs = groups[klass]
        entry = {"class": klass, "count": len(rs)}
        for part in ("before", "after", "delta"):
            vals = [r[part] for r in rs if r.get(part)]
            if len(vals) == len(rs):
                entry[part] = {m: float(np.mean([v[m] for v in vals])) for m in metrics if m in vals[0]}
            else:
                entry[part] = None
        out.append(entry)
    return out


def _fmt(metric, v):
    if v is None:
        return "-"
    return "%.4g" % (v * METRIC_SCALE[metric])


def format_cell(metric, before, after):
    if before is None:
        return _fmt(metric, after)
    gain = (after - before) * METRIC_SCALE[metric]
    return "%s → %s (%+.4g)" % (_fmt(metric, before), _fmt(metric, after), gain)


def format_table(rows, metrics, label="id") -> str:
    header = [label] + [METRIC_LABELS[m] for m in metrics]
    lines = [header]
    for r in rows:
        cells = [str(r.get(label, r.get("id", "")))]
        for m in metrics:
            after = (r.get("after") or {}).get(m)
            before = (r.get("before") or {}).get(m) if r.get("before") else None
            cells.append("-" if after is None else format_cell(m, before, after))
        lines.append(cells)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines)


def report_csv(rows, means, metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = []
    for m in metrics:
        cols += [m + "_before", m + "_after", m + "_delta"]
    writer.writerow(["id", "class"] + cols)

    def vals(r):
        out = []
        for m in metrics:
            for part in ("before", "after", "delta"):
                v = (r.get(part) or {}).get(m)
                out.append("" if v is None else repr(float(v)))
        return out

    for r in rows:
        writer.writerow([r["id"], r["class"]] + vals(r))
    for c in means:
        writer.writerow(["mean", c["class"]] + vals(c))
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    metrics = _parse_metrics(args.metrics)
    settings = {"samples": args.samples, "seed": args.seed, "tau": args.tau,
                "tau_rule": "0.01 x ground-truth bbox diagonal" if args.tau is None else "fixed",
                "resolution": args.resolution, "align": args.align}
    rows = []
    if args.batch:
        if not args.pred_dir:
            raise UsageError("--batch needs --pred-dir")
        for rec in scan_batch(args.batch):
            if not rec.ground_truth_mesh_path:
                raise UsageError("missing ground truth: %s" % (Path(rec.coarse_mesh_path).parent / "gt.obj"))
            pred_path = Path(args.pred_dir) / rec.id / "refined.obj"
            if not pred_path.is_file():
                raise UsageError("missing prediction: %s" % pred_path)
            sil = load_silhouette(rec.silhouette_path) if Path(rec.silhouette_path).is_file() else None
            pose = (load_camera(rec.camera_path, image_size=(sil.shape[1], sil.shape[0]))
                    if sil is not None and Path(rec.camera_path).is_file() else None)
            row = evaluate_pair(load_mesh(pred_path), load_mesh(rec.ground_truth_mesh_path),
                                load_mesh(rec.coarse_mesh_path), pose, sil, metrics, args.samples,
                                args.seed, args.tau, args.resolution, args.align)
            rows.append(dict(id=rec.id, **{"class": rec.klass}, **row))
    else:
        if not args.pred:
            raise UsageError("evaluate needs --pred (or --batch)")
        if not args.gt:
            raise UsageError("missing ground truth: pass --gt")
        for p in (args.pred, args.gt, args.pred_before, args.camera, args.silhouette):
            if p and not Path(p).is_file():
                raise UsageError("input not found: %s" % p)
        if bool(args.camera) != bool(args.silhouette):
            raise UsageError("--camera and --silhouette must be given together")
        sil = load_silhouette(args.silhouette) if args.silhouette else None
        pose = load_camera(args.camera, image_size=(sil.shape[1], sil.shape[0])) if args.camera else None
        before = load_mesh(args.pred_before) if args.pred_before else None
        row = evaluate_pair(load_mesh(args.pred), load_mesh(args.gt), before, pose, sil, metrics,
                            args.samples, args.seed, args.tau, args.resolution, args.align)
        rows.append(dict(id=Path(args.pred).stem, **{"class": args.klass}, **row))
    present = [m for m in metrics if all(m in r["after"] for r in rows)]
    means = class_means(rows, present)
    report = {"schema_version": SCHEMA_VERSION, "kind": "evaluate", "metrics": present,
              "settings": settings, "instances": rows, "classes": means}
    validate_report(report)
    print(format_table(rows + [dict(c, id="mean[%s]" % c["class"]) for c in means], present))
    if args.report:
        atomic_write(args.report, dump_json(report))
    if args.csv:
        atomic_write(args.csv, report_csv(rows, means, present))
    return 0


# ---------------------------------------------------------------- render


def _load_values(path, n):
    path = Path(path)
    if not path.is_file():
        raise UsageError("input not found: %s" % path)
    vals = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
    vals = np.asarray(vals, dtype=np.float64).reshape(-1)
    if len(vals) != n:
        raise UsageError("%s holds %d values for %d vertices" % (path, len(vals), n))
    return vals


def cmd_render(args) -> int:
    for p in (args.mesh, args.camera):
        if not Path(p).is_file():
            raise UsageError("input not found: %s" % p)
    mesh = load_mesh(args.mesh)
    pose = load_camera(args.camera)
    if args.size:
        pose = pose.with_image_size(args.size)
    if args.confidence:
        vals = _load_values(args.confidence, mesh.n_vertices)
        img = rasterize_attribute(mesh, pose, vals, background=0.0)
    elif args.soft:
        img = soft_silhouette(mesh, pose, RenderSettings(sigma=args.sigma))
    else:
        img = hard_silhouette(mesh, pose).astype(np.float64)
    save_silhouette(img, args.out)
    print("wrote %s (%dx%d)" % (args.out, pose.width, pose.height))
    return 0


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    names = [n.strip() for n in args.configs.split(",") if n.strip()]
    if not names:
        raise UsageError("--configs is empty")
    for n in names:
        preset_weights(n)
    base = resolve_config(args)
    normalize = resolve_normalize(args)
    metrics = _parse_metrics(args.metrics)
    records = scan_batch(args.batch)
    out = Path(args.out)
    rows, codes, baseline = [], [], None
    for name in names:
        cfg = replace(base, weights=replace(preset_weights(name), views=base.weights.views))
        report, manifest = run_refine(records, cfg, out / name, normalize, jobs=args.jobs,
                                      samples=args.samples, metrics=metrics)
        codes.append(_refine_exit(manifest["instances"]))
        ok = [r for r in report["instances"] if r["status"] == "ok"]
        if baseline is None and ok:
            baseline = {m: float(np.mean([r["before"][m] for r in ok]))
                        for m in metrics if all(m in r["before"] for r in ok)}
        means = {m: float(np.mean([r["after"][m] for r in ok]))
                 for m in metrics if ok and all(m in r["after"] for r in ok)}
        rows.append({"preset": name, "weights": cfg.weights.to_dict(), "count": len(ok),
                     "failed": len(report["instances"]) - len(ok), "after": means})
    table_rows = [{"preset": "none", "after": baseline or {}}] + rows
    present = [m for m in metrics if all(m in r["after"] for r in table_rows)]
    result = {"schema_version": SCHEMA_VERSION, "kind": "ablate", "metrics": present,
              "baseline": baseline or {}, "presets": rows}
    validate_report(result)
    atomic_write(out / "ablation.json", dump_json(result))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset"] + present)
    for r in table_rows:
        w.writerow([r["preset"]] + [repr(float(r["after"][m])) for m in present])
    atomic_write(out / "ablation.csv", buf.getvalue())
    print(format_table(table_rows, present, label="preset"))
    if any(c == 1 for c in codes):
        return 1 if all(c == 1 for c in codes) else 2
    return 2 if any(codes) else 0


# ---------------------------------------------------------------- parser


def _add_refine_options(p):
    p.add_argument("--config", help="JSON file with RefineConfig fields (and optional normalize)")
    p.add_argument("--iters", type=int, help="optimization iterations")
    p.add_argument("--seed", type=int, help="base seed; instance i uses seed + i")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--sigma", type=float, help="soft rasterizer sharpness")
    p.add_argument("--render-size", type=_size, help="render resolution WxH")
    p.add_argument("--encoder-size", type=_size, help="encoder input resolution WxH")
    p.add_argument("--normalize", choices=("none", "unit-cube"),
                   help="refine in a unit-cube frame and map the result back")
    p.add_argument("--jobs", type=int, default=1, help="parallel instances")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="surface samples for metrics")
    p.add_argument("--metrics", help="comma separated subset of %s" % ",".join(METRICS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shaperefine", description="Test-time refinement of coarse meshes "
                     "against a single silhouette.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("refine", help="refine one instance or a batch directory")
    p.add_argument("--mesh")
    p.add_argument("--silhouette")
    p.add_argument("--camera")
    p.add_argument("--gt", help="optional ground-truth mesh for the report")
    p.add_argument("--batch", help="directory of <id>/{mesh.obj,silhouette.png,camera.json}")
    p.add_argument("--out", required=True, help="output OBJ (single) or directory")
    p.add_argument("--report", help="report JSON path (default OUT/report.json)")
    _add_refine_options(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="reconstruction metrics against ground truth")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-before")
    p.add_argument("--camera")
    p.add_argument("--silhouette")
    p.add_argument("--batch", help="instance directory holding gt.obj and mesh.obj")
    p.add_argument("--pred-dir", help="refine output directory for --batch")
    p.add_argument("--metrics")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, help="F-score threshold (default 1%% of gt bbox diagonal)")
    p.add_argument("--resolution", type=int, default=32, help="volumetric IoU grid size")
    p.add_argument("--align", choices=("none", "unit-cube"), default="none",
                   help="normalize pred and gt before 3D metrics")
    p.add_argument("--class", dest="klass", default="all")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--csv", help="CSV report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render a silhouette or confidence map")
    p.add_argument("--mesh", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--soft", action="store_true")
    p.add_argument("--sigma", type=float, default=1e-4)
    p.add_argument("--size", type=_size)
    p.add_argument("--confidence", help="per-vertex values (.npy or text)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="run loss-weight presets over a batch")
    p.add_argument("--batch", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--configs", required=True, help="comma separated: %s" % ",".join(PRESETS))
    _add_refine_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a refine manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)
    p.add_argument("--check", action="store_true", help="compare the new report byte-for-byte")
    p.set_defaults(func=cmd_replay)
    return parser


def setup_logging():
    """Configure the package logger from REFINE_LOG; returns a callable that
    restores the previous logger state."""
    level = os.environ.get("REFINE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print("REFINE_LOG must be one of error, info, debug; got %r" % level, file=sys.stderr)
        level = "error"
    root = logging.getLogger("shaperefine")
    old_level, added = root.level, None
    root.setLevel(levels[level])
    if not root.handlers:
        added = logging.StreamHandler(sys.stderr)
        added.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(added)

    def restore():
        root.setLevel(old_level)
        if added is not None:
            root.removeHandler(added)

    return restore


def main(argv=None) -> int:
    restore = setup_logging()
    try:
        return _dispatch(argv)
    finally:
        restore()


def _dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print("error: input not found: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
