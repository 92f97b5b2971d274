"""Command-line pipeline.

Every command writes its artifact plus a JSON manifest next to it
(``<artifact>.json``, or ``manifest.json`` inside a directory artifact).  A
manifest records the command parameters, the digest of every input, a
*lineage* (artifact kind -> digest for everything upstream) and stage
timings.  Commands refuse inputs whose lineages disagree, and a rerun with
identical inputs and parameters leaves existing outputs untouched.

Exit codes: 0 success, 2 validation failure, 3 provenance mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PROVENANCE = 3
EXIT_NUMERIC = 4
LOCK_NAME = ".scatterfield.lock"
THREADS_ENV = "SCATTERFIELD_THREADS"


class ValidationFailure(Exception):
    pass


class ProvenanceMismatch(Exception):
    pass


class NumericFailure(Exception):
    pass


# --- manifests ---------------------------------------------------------------

def file_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(path.iterdir()):
            if child.suffix == ".vgrid":
                h.update(child.name.encode())
                h.update(file_digest(child).encode())
        return h.hexdigest()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def manifest_path(artifact) -> Path:
    artifact = Path(artifact)
    if artifact.is_dir() or artifact.suffix == "":
        return artifact / "manifest.json"
    return artifact.with_name(artifact.name + ".json")


def read_manifest(artifact) -> dict:
    p = manifest_path(artifact)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


class Stage:
    """Inputs, lineage, cache key and timings of one command invocation."""

    def __init__(self, command: str, params: dict):
        self.command = command
        self.params = params
        self.inputs: dict = {}
        self.lineage: dict = {}
        self.timings: dict = {}
        self.start = time.perf_counter()

    def _merge(self, lineage: dict, source: str) -> None:
        for kind, digest in lineage.items():
            have = self.lineage.get(kind)
            if have is not None and have != digest:
                raise ProvenanceMismatch(
                    f"{source} was built from a different {kind} ({digest[:12]}) than the other inputs ({have[:12]})")
            self.lineage[kind] = digest

    def add_input(self, role: str, path, kind: str | None = None, merge: bool = True) -> str:
        path = Path(path)
        if not path.exists():
            raise ValidationFailure(f"{role}: {path} does not exist")
        digest = file_digest(path)
        self.inputs[role] = {"path": str(path), "sha256": digest}
        if merge:
            self._merge(read_manifest(path).get("lineage", {}), str(path))
        if kind:
            self._merge({kind: digest}, str(path))
        return digest

    def add_value(self, kind: str, obj) -> str:
        digest = json_digest(obj)
        self.inputs[kind] = {"sha256": digest}
        self._merge({kind: digest}, kind)
        return digest

    @property
    def key(self) -> str:
        return json_digest({"command": self.command, "params": self.params,
                            "inputs": {k: v["sha256"] for k, v in self.inputs.items()}})

    def up_to_date(self, primary, outputs) -> bool:
        m = read_manifest(primary)
        if m.get("key") != self.key:
            return False
        recorded = m.get("outputs", {})
        for out in outputs:
            out = Path(out)
            if not out.exists() or recorded.get(str(out)) != file_digest(out):
                return False
        return True

    @contextlib.contextmanager
    def timed(self, name: str):
        t = time.perf_counter()
        yield
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def finish(self, primary, outputs, kind: str, extra: dict | None = None) -> dict:
        outputs = [Path(o) for o in outputs]
        digests = {str(o): file_digest(o) for o in outputs}
        lineage = dict(self.lineage)
        lineage[kind] = digests.get(str(Path(primary))) or file_digest(primary)
        self.timings["total"] = time.perf_counter() - self.start
        manifest = {"command": self.command, "params": self.params, "inputs": self.inputs,
                    "lineage": lineage, "outputs": digests, "key": self.key,
                    "timings": {k: round(v, 6) for k, v in self.timings.items()}}
        manifest.update(extra or {})
        manifest_path(primary).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest


@contextlib.contextmanager
def workspace_lock(directory):
    """Serialize commands that write into the same directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / LOCK_NAME, "w") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def set_threads(n) -> int:
    import numba

    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = int(n)
    if n < 1:
        raise ValidationFailure(f"thread count must be >= 1, got {n}")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def load_config(path):
    from .scene import SceneConfig

    if path is None:
        return SceneConfig()
    path = Path(path)
    if not path.exists():
        raise ValidationFailure(f"config {path} does not exist")
    return SceneConfig.load(path)


def _add_config(stage: Stage, cfg, path) -> None:
    if path is not None:
        stage.add_input("config_file", path)
    stage.add_value("config", cfg.to_dict())


def _sibling(path, suffix) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


def _say(msg):
    print(msg, flush=True)


# --- commands ----------------------------------------------------------------

def cmd_gen_medium(args) -> int:
    from . import media
    from .volume_grid import save_density

    stage = Stage("gen-medium", {"kind": args.kind, "dims": args.dims, "seed": args.seed})
    if stage.up_to_date(args.out, [args.out]):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    with stage.timed("compute"):
        grid = media.generate(args.kind, args.dims, args.seed)
    with stage.timed("write"):
        save_density(grid, args.out)
    v = grid.values
    stage.finish(args.out, [args.out], "medium",
                 {"stats": {"min": float(v.min()), "max": float(v.max()), "nonzero_fraction": float((v > 0).mean())}})
    _say(f"wrote {args.out}: {args.kind} {args.dims}^3, nonzero fraction {(v > 0).mean():.3f}")
    return EXIT_OK


def cmd_build_pyramid(args) -> int:
    from .volume_grid import build_pyramid, load_density, save_density

    out = Path(args.out)
    stage = Stage("build-pyramid", {})
    stage.add_input("medium", args.medium, "medium")
    grid = load_density(args.medium)
    pyramid = build_pyramid(grid)
    files = [out / f"level_{i:02d}.vgrid" for i in range(len(pyramid))]
    if out.exists() and stage.up_to_date(out, files):
        _say(f"up to date: {out}")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    with stage.timed("write"):
        for f, level in zip(files, pyramid.levels):
            save_density(level, f)
    stage.finish(out, files, "pyramid", {"levels": [list(level.dims) for level in pyramid.levels]})
    _say(f"wrote {len(files)} levels to {out}")
    return EXIT_OK


def cmd_gen_template(args) -> int:
    from .templates import generate_diffuse_template, generate_highlight_template, save_template

    params = {"kind": args.kind, "seed": args.seed}
    if args.kind == "highlight":
        params["cone_half_angle_deg"] = args.cone_half_angle
    stage = Stage("gen-template", params)
    if stage.up_to_date(args.out, [args.out]):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    with stage.timed("compute"):
        if args.kind == "diffuse":
            t = generate_diffuse_template(seed=args.seed)
        else:
            t = generate_highlight_template(cone_half_angle=math.radians(args.cone_half_angle), seed=args.seed)
    save_template(t, args.out)
    stage.finish(args.out, [args.out], f"{args.kind}_template", {"counts": list(t.counts)})
    _say(f"wrote {args.out}: {args.kind} template, layer counts {list(t.counts)}")
    return EXIT_OK


def _feature_context(cfg, medium, diffuse_path, highlight_path, table=None, weights=None, volume=None):
    from .features import FeatureContext
    from .templates import load_template

    return FeatureContext.build(medium, cfg.light(), load_template(diffuse_path), load_template(highlight_path),
                                template_scale=cfg.template_scale, lam=cfg.graded_lambda,
                                weights=weights, table=table, volume=volume)


def _transmittance_input(stage: Stage, features):
    """The ``.vtrans`` beside a ``.vfeat``, checked against the digest precompute recorded; None if absent."""
    path = _sibling(features, ".vtrans")
    if not path.exists():
        return None
    digest = stage.add_input("transmittance", path, merge=False)
    recorded = {Path(k).name: v for k, v in read_manifest(features).get("outputs", {}).items()}
    if recorded.get(path.name) != digest:
        raise ProvenanceMismatch(f"{path} is not the transmittance volume precomputed with {features}")
    return path


def cmd_precompute(args) -> int:
    from .features import precompute_tables, save_feature_table, save_transmittance_volume
    from .volume_grid import load_density

    cfg = load_config(args.config)
    stage = Stage("precompute", {"centers": args.centers, "seed": args.seed})
    stage.add_input("medium", args.medium, "medium")
    stage.add_input("diffuse", args.diffuse, "diffuse_template")
    stage.add_input("highlight", args.highlight, "highlight_template")
    _add_config(stage, cfg, args.config)
    vtrans = _sibling(args.out, ".vtrans")
    if stage.up_to_date(args.out, [args.out, vtrans]):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    medium = cfg.medium(load_density(args.medium))
    with stage.timed("fields"):
        ctx = _feature_context(cfg, medium, args.diffuse, args.highlight)
    with stage.timed("sample"):
        table = precompute_tables(ctx, args.centers, args.seed,
                                  meta={"lineage": dict(stage.lineage), "lambda": cfg.graded_lambda,
                                        "template_scale": cfg.template_scale})
    save_feature_table(table, args.out)
    save_transmittance_volume(ctx.volume, vtrans)
    stage.finish(args.out, [args.out, vtrans], "features", {"centers": len(table)})
    _say(f"wrote {args.out}: {len(table)} centers, {table.diffuse.shape[1]} + {table.highlight.shape[1]} points")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    from .features import load_feature_table
    from .rte import generate_dataset, save_dataset
    from .volume_grid import load_density

    cfg = load_config(args.config)
    stage = Stage("gen-dataset", {"spp": args.spp, "seed": args.seed, "max_depth": args.max_depth,
                                  "stderr_ceiling": args.stderr_ceiling})
    stage.add_input("medium", args.medium, "medium")
    stage.add_input("features", args.features, "features")
    _add_config(stage, cfg, args.config)
    if stage.up_to_date(args.out, [args.out]):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    medium = cfg.medium(load_density(args.medium))
    table = load_feature_table(args.features)
    with stage.timed("path_trace"):
        data = generate_dataset(table, medium, cfg.light(), args.spp, args.seed, args.max_depth,
                                args.stderr_ceiling, {"lineage": dict(stage.lineage)})
    if not np.all(np.isfinite(data.labels)):
        raise NumericFailure("non-finite labels")
    save_dataset(data, args.out)
    flagged = int((~data.usable()).sum())
    stage.finish(args.out, [args.out], "dataset", {"entries": len(data), "flagged": flagged})
    _say(f"wrote {args.out}: {len(data)} labels ({flagged} flagged), mean F {data.labels.mean():.4g}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plotting
    from .predictor import Architecture, BackboneNetwork, TrainConfig, save_network, train
    from .rte import load_dataset

    hp = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, val_fraction=args.val_fraction,
                     seed=args.seed, eval_every=args.eval_every)
    stage = Stage("train", {**hp.__dict__, "attention": args.attention})
    stage.add_input("dataset", args.dataset, "dataset")
    csv_path, png_path = _sibling(args.out, ".loss.csv"), _sibling(args.out, ".loss.png")
    outputs = [args.out, csv_path, png_path]
    if stage.up_to_date(args.out, outputs):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    data = load_dataset(args.dataset)
    d = data.diffuse.shape[1], data.highlight.shape[1]
    counts = data.manifest.get("diffuse_counts"), data.manifest.get("highlight_counts")
    arch = Architecture(diffuse_counts=tuple(counts[0]), highlight_counts=tuple(counts[1]), attention=args.attention)
    if sum(arch.diffuse_counts) != d[0] or sum(arch.highlight_counts) != d[1]:
        raise ValidationFailure("dataset layer counts disagree with its feature blocks")
    net = BackboneNetwork.create(arch, args.seed)
    with stage.timed("train"):
        result = train(data, net, hp, progress=lambda r: _say(f"step {r[0]:5d}  train {r[1]:.3e}  val {r[2]:.3e}"))
    save_network(result.net, args.out)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "train_loss", "val_loss"])
        for row in result.history:
            w.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}"])
    plotting.loss_curve(result.history, png_path)
    stage.finish(args.out, outputs, "net",
                 {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
                  "train_entries": int(len(result.train_index)), "val_entries": int(len(result.val_index)),
                  "architecture_digest": arch.digest()})
    _say(f"wrote {args.out}: loss {result.initial_loss:.3e} -> {result.final_loss:.3e}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .imageio import write_pfm, write_ppm
    from .volume_grid import load_density

    cfg = load_config(args.config)
    params = {"mode": args.mode, "camera": args.camera}
    if args.mode == "reference":
        params.update(spp=args.spp, seed=args.seed, max_depth=args.max_depth)
    if args.mode == "neural":
        params["field_level"] = args.field_level
    stage = Stage("render", params)
    stage.add_input("medium", args.medium, "medium")
    _add_config(stage, cfg, args.config)
    try:
        camera = cfg.camera(args.camera)
    except KeyError as e:
        raise ValidationFailure(str(e.args[0])) from None
    stage.add_value("camera", camera.to_dict())
    if args.mode == "neural":
        for role, kind in (("features", "features"), ("net", "net"), ("diffuse", "diffuse_template"),
                           ("highlight", "highlight_template")):
            if getattr(args, role) is None:
                raise ValidationFailure(f"--mode neural needs --{role}")
            stage.add_input(role, getattr(args, role), kind)
        vtrans = _transmittance_input(stage, args.features)
    ppm = _sibling(args.out, ".ppm")
    if stage.up_to_date(args.out, [args.out, ppm]):
        _say(f"up to date: {args.out}")
        return EXIT_OK
    with stage.timed("load"):
        medium = cfg.medium(load_density(args.medium))
    light = cfg.light()
    bg = cfg.background
    extra = {}
    if args.mode == "reference":
        from .rte import render_reference

        with stage.timed("render"):
            image, stderr = render_reference(medium, light, camera, args.spp, args.seed, bg, args.max_depth)
        extra["mean_stderr"] = float(stderr.mean())
        extra["rms_stderr"] = float(np.sqrt(np.mean(stderr**2)))
    elif args.mode == "single-scatter":
        from .rte import render_single_scatter

        with stage.timed("render"):
            image = render_single_scatter(medium, light, camera, bg)
    else:
        from .features import load_feature_table, load_transmittance_volume
        from .predictor import load_network, render_neural

        with stage.timed("load"):
            table = load_feature_table(args.features)
            net = load_network(args.net)
            volume = None if vtrans is None else load_transmittance_volume(vtrans, medium.grid, table.weights)
        with stage.timed("render"):
            ctx = _feature_context(cfg, medium, args.diffuse, args.highlight, table.table, table.weights, volume)
            image = render_neural(ctx, net, camera, bg, args.field_level)
    if not np.all(np.isfinite(image)):
        raise NumericFailure("rendered image contains non-finite values")
    with stage.timed("write"):
        write_pfm(args.out, image)
        write_ppm(ppm, image)
    stage.finish(args.out, [args.out, ppm], "image",
                 {"mode": args.mode, "width": camera.width, "height": camera.height, **extra})
    _say(f"wrote {args.out} ({args.mode}, {camera.width}x{camera.height}) in {stage.timings['total']:.3f} s")
    return EXIT_OK


def compare_images(a, b) -> dict:
    """Error of image ``a`` against reference ``b`` on linear radiance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationFailure(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    denom = math.sqrt(float(np.mean(b**2)))
    return {"relative_rmse": math.sqrt(float(np.mean(diff**2))) / denom if denom > 0 else float("inf"),
            "mae_per_channel": np.abs(diff).mean(axis=(0, 1)).tolist(),
            "max_error": float(np.abs(diff).max())}


def cmd_compare(args) -> int:
    from . import plotting
    from .imageio import read_pfm

    stage = Stage("compare", {})
    # the two images are compared on their shared upstream only
    stage.add_input("a", args.a, merge=False)
    stage.add_input("b", args.b, merge=False)
    ma, mb = read_manifest(args.a), read_manifest(args.b)
    for m, p in ((ma, args.a), (mb, args.b)):
        if not m:
            raise ProvenanceMismatch(f"{p} has no manifest; cannot establish provenance")
    for kind in ("medium", "config", "camera"):
        da, db = ma["lineage"].get(kind), mb["lineage"].get(kind)
        if da != db:
            raise ProvenanceMismatch(f"images were rendered with different {kind}s")
    out = Path(args.out)
    csv_path, png_path = _sibling(out, ".csv"), _sibling(out, ".png")
    if stage.up_to_date(out, [out, csv_path, png_path]):
        _say(f"up to date: {out}")
        return EXIT_OK
    a, b = read_pfm(args.a), read_pfm(args.b)
    report = compare_images(a, b)
    ta, tb = ma.get("timings", {}), mb.get("timings", {})
    report["runtime_seconds"] = {"a": ta, "b": tb}
    if ta.get("total") and tb.get("total"):
        report["runtime_ratio"] = ta["total"] / tb["total"]
    report["a"] = {"path": str(args.a), "mode": ma.get("mode")}
    report["b"] = {"path": str(args.b), "mode": mb.get("mode")}
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = [("relative_rmse", report["relative_rmse"]), ("max_error", report["max_error"])]
    rows += [(f"mae_{c}", v) for c, v in zip("rgb", report["mae_per_channel"])]
    for name, t in (("a", ta), ("b", tb)):
        rows += [(f"seconds_{name}_{k}", v) for k, v in sorted(t.items())]
    if "runtime_ratio" in report:
        rows.append(("runtime_ratio", report["runtime_ratio"]))
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    plotting.comparison(a, b, (f"A: {ma.get('mode')}", f"B: {mb.get('mode')}"), png_path)
    width = max(len(r[0]) for r in rows)
    for name, value in rows:
        _say(f"{name:<{width}}  {value:.6g}")
    stage.finish(out, [out, csv_path, png_path], "report")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker thread cap (default: ${THREADS_ENV} or all cores); 1 is bit-reproducible")
    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--config", default=None, help="scene config JSON (default: built-in scene)")

    parser = argparse.ArgumentParser(prog="scatterfield", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-medium", parents=[common], help="write a procedural .vgrid medium")
    p.add_argument("--kind", required=True, choices=["cube", "slab", "procedural-cloud"])
    p.add_argument("--dims", type=int, required=True, help="voxels per axis (power of two)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_medium)

    p = sub.add_parser("build-pyramid", parents=[common], help="write the density pyramid as level_XX.vgrid files")
    p.add_argument("--medium", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_pyramid)

    p = sub.add_parser("gen-template", parents=[common], help="write a diffuse or highlight .vtmpl template")
    p.add_argument("--kind", required=True, choices=["diffuse", "highlight"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cone-half-angle", type=float, default=5.0, help="highlight cone half-angle in degrees")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_template)

    p = sub.add_parser("precompute", parents=[common, scene], help="sample template features into a .vfeat table")
    p.add_argument("--medium", required=True)
    p.add_argument("--diffuse", required=True)
    p.add_argument("--highlight", required=True)
    p.add_argument("--centers", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("gen-dataset", parents=[common, scene], help="path-trace labels for a feature table")
    p.add_argument("--medium", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--spp", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-depth", type=int, default=64)
    p.add_argument("--stderr-ceiling", type=float, default=None,
                   help="flag entries whose relative standard error exceeds this")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", parents=[common], help="train the scatter predictor; writes .vnet, loss CSV and PNG")
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--attention", choices=["learned", "literal"], default="learned")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common, scene], help="render a PFM image and a PPM preview")
    p.add_argument("--mode", required=True, choices=["reference", "single-scatter", "neural"])
    p.add_argument("--medium", required=True)
    p.add_argument("--camera", default="heldout", help="camera name from the config")
    p.add_argument("--spp", type=int, default=1024, help="reference mode samples per pixel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-depth", type=int, default=64)
    p.add_argument("--features", help="neural mode: .vfeat table")
    p.add_argument("--net", help="neural mode: .vnet weights")
    p.add_argument("--diffuse", help="neural mode: diffuse template")
    p.add_argument("--highlight", help="neural mode: highlight template")
    p.add_argument("--field-level", type=int, default=2,
                   help="neural mode: pyramid level of the radiance field the network fills (-1: every march sample)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", parents=[common], help="compare image A against reference B")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", required=True, help="JSON report path; CSV and PNG are written beside it")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "field_level", None) is not None and args.field_level < 0:
        args.field_level = None
    from .features import EmptyMediumError
    from .predictor import NonFiniteLossError

    try:
        set_threads(args.threads)
        out = Path(args.out)
        workspace = out if args.command == "build-pyramid" else out.parent
        with workspace_lock(workspace if str(workspace) else "."):
            return args.func(args)
    except ProvenanceMismatch as e:
        print(f"provenance mismatch: {e}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (NumericFailure, NonFiniteLossError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationFailure, EmptyMediumError, ValueError, KeyError, OSError) as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
