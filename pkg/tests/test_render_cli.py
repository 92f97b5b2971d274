import json
import subprocess
import sys

import numpy as np
import pytest

from scatterfield import cli
from scatterfield.imageio import read_pfm
from scatterfield.rte import load_dataset, save_dataset
from scatterfield.scene import SceneConfig
from scatterfield.volume_grid import DensityGrid, load_density, save_density


def small_config(path, **over):
    cfg = SceneConfig()
    for cam in cfg.cameras.values():
        cam["width"] = cam["height"] = 8
    for k, v in over.items():
        setattr(cfg, k, v)
    cfg.save(path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """The whole pipeline on a 32^3 cube at toy sizes."""
    d = tmp_path_factory.mktemp("pipe")
    cfg = small_config(d / "scene.json")
    steps = [
        ("gen-medium", "--kind", "cube", "--dims", 32, "--seed", 0, "--out", d / "m.vgrid"),
        ("build-pyramid", "--medium", d / "m.vgrid", "--out", d / "pyr"),
        ("gen-template", "--kind", "diffuse", "--seed", 0, "--out", d / "d.vtmpl"),
        ("gen-template", "--kind", "highlight", "--seed", 0, "--out", d / "h.vtmpl"),
        ("precompute", "--config", cfg, "--medium", d / "m.vgrid", "--diffuse", d / "d.vtmpl",
         "--highlight", d / "h.vtmpl", "--centers", 48, "--out", d / "f.vfeat"),
        ("gen-dataset", "--config", cfg, "--medium", d / "m.vgrid", "--features", d / "f.vfeat",
         "--spp", 32, "--out", d / "z.vdata"),
        ("train", "--dataset", d / "z.vdata", "--steps", 20, "--batch", 16, "--eval-every", 10,
         "--out", d / "n.vnet"),
        ("render", "--config", cfg, "--mode", "reference", "--medium", d / "m.vgrid", "--spp", 16,
         "--out", d / "ref.pfm"),
        ("render", "--config", cfg, "--mode", "single-scatter", "--medium", d / "m.vgrid", "--out", d / "ss.pfm"),
        ("render", "--config", cfg, "--mode", "neural", "--medium", d / "m.vgrid", "--features", d / "f.vfeat",
         "--net", d / "n.vnet", "--diffuse", d / "d.vtmpl", "--highlight", d / "h.vtmpl", "--out", d / "nn.pfm"),
        ("compare", d / "nn.pfm", d / "ref.pfm", "--out", d / "cmp.json"),
    ]
    codes = [run(*s, "--threads", 1) for s in steps]
    return d, cfg, steps, codes


def test_full_pipeline_completes(pipeline):
    d, _, steps, codes = pipeline
    assert codes == [0] * len(steps)
    report = json.loads((d / "cmp.json").read_text())
    for key in ("relative_rmse", "mae_per_channel", "max_error", "runtime_seconds"):
        assert key in report
    assert len(report["mae_per_channel"]) == 3
    assert (d / "cmp.csv").exists() and (d / "cmp.png").exists()
    assert (d / "n.loss.csv").read_text().splitlines()[0].split(",") == ["step", "train_loss", "val_loss"]
    assert len(list((d / "pyr").glob("level_*.vgrid"))) == 6
    assert (d / "f.vtrans").exists()
    assert read_pfm(d / "nn.pfm").shape == (8, 8, 3)
    assert (d / "nn.ppm").exists()


def test_manifests_record_input_digests(pipeline):
    d = pipeline[0]
    m = json.loads((d / "z.vdata.json").read_text())
    assert m["inputs"]["medium"]["sha256"] == cli.file_digest(d / "m.vgrid")
    assert m["inputs"]["features"]["sha256"] == cli.file_digest(d / "f.vfeat")
    assert "total" in m["timings"]
    assert m["lineage"]["medium"] == cli.file_digest(d / "m.vgrid")


def test_rerun_is_a_cache_hit(pipeline, capsys):
    d, _, steps, _ = pipeline

    def stamps():
        return {p.name: p.stat().st_mtime_ns for p in d.iterdir() if p.is_file() and p.name != cli.LOCK_NAME}

    before = stamps()
    capsys.readouterr()
    for s in steps:
        assert run(*s, "--threads", 1) == 0
    out = capsys.readouterr().out
    assert out.count("up to date") == len(steps)
    assert stamps() == before


def test_gen_medium_determinism_and_ranges(tmp_path):
    for name in ("a", "b"):
        assert run("gen-medium", "--kind", "procedural-cloud", "--dims", 16, "--seed", 4,
                   "--out", tmp_path / f"{name}.vgrid") == 0
    assert cli.file_digest(tmp_path / "a.vgrid") == cli.file_digest(tmp_path / "b.vgrid")
    v = load_density(tmp_path / "a.vgrid").values
    assert v.min() >= 0 and v.max() <= 1
    assert 0.05 < np.mean(v > 0) < 0.95
    assert run("gen-medium", "--kind", "cube", "--dims", 16, "--out", tmp_path / "c.vgrid") == 0
    c = load_density(tmp_path / "c.vgrid").values
    assert set(np.unique(c)) == {0.0, 1.0}


def test_invalid_dims_is_a_validation_failure(tmp_path):
    assert run("gen-medium", "--kind", "cube", "--dims", 30, "--out", tmp_path / "x.vgrid") == cli.EXIT_VALIDATION
    (tmp_path / "bad.vgrid").write_bytes(b"garbage")
    assert run("build-pyramid", "--medium", tmp_path / "bad.vgrid", "--out", tmp_path / "p") == cli.EXIT_VALIDATION
    assert run("render", "--mode", "single-scatter", "--medium", tmp_path / "missing.vgrid",
               "--out", tmp_path / "o.pfm") == cli.EXIT_VALIDATION


def test_single_scatter_of_empty_scene_is_background(tmp_path):
    cfg = small_config(tmp_path / "s.json", background=(0.25, 0.5, 0.75))
    save_density(DensityGrid(np.zeros((8, 8, 8), np.float32), 1 / 8, np.full(3, -0.5)), tmp_path / "e.vgrid")
    assert run("render", "--config", cfg, "--mode", "single-scatter", "--medium", tmp_path / "e.vgrid",
               "--out", tmp_path / "e.pfm") == 0
    img = read_pfm(tmp_path / "e.pfm")
    np.testing.assert_array_equal(img, np.broadcast_to(np.float32([0.25, 0.5, 0.75]), img.shape))


def test_mixed_provenance_is_refused(pipeline, tmp_path):
    d, cfg = pipeline[0], pipeline[1]
    other = tmp_path / "other.vgrid"
    assert run("gen-medium", "--kind", "slab", "--dims", 32, "--out", other) == 0
    # features of the cube with the slab medium
    code = run("gen-dataset", "--config", cfg, "--medium", other, "--features", d / "f.vfeat",
               "--spp", 4, "--out", tmp_path / "z.vdata")
    assert code == cli.EXIT_PROVENANCE
    assert run("render", "--config", cfg, "--mode", "single-scatter", "--medium", other,
               "--out", tmp_path / "ss.pfm") == 0
    assert run("compare", tmp_path / "ss.pfm", d / "ref.pfm", "--out", tmp_path / "c.json") == cli.EXIT_PROVENANCE


def test_neural_render_without_transmittance_volume_is_identical(pipeline, tmp_path):
    d, cfg = pipeline[0], pipeline[1]
    for name in ("f.vfeat", "f.vfeat.json", "m.vgrid", "m.vgrid.json"):
        (tmp_path / name).write_bytes((d / name).read_bytes())
    args = ("render", "--config", cfg, "--mode", "neural", "--medium", tmp_path / "m.vgrid",
            "--features", tmp_path / "f.vfeat", "--net", d / "n.vnet", "--diffuse", d / "d.vtmpl",
            "--highlight", d / "h.vtmpl", "--threads", 1)
    # no .vtrans beside the copied table, so the volume is recomputed
    assert run(*args, "--out", tmp_path / "nn.pfm") == 0
    np.testing.assert_array_equal(read_pfm(tmp_path / "nn.pfm"), read_pfm(d / "nn.pfm"))
    # a .vtrans that precompute did not write is refused
    vt = (d / "f.vtrans").read_bytes()
    (tmp_path / "f.vtrans").write_bytes(vt[:-8] + bytes(8))
    assert run(*args, "--out", tmp_path / "other.pfm") == cli.EXIT_PROVENANCE


def test_non_finite_training_is_a_numeric_failure(pipeline, tmp_path):
    d = pipeline[0]
    data = load_dataset(d / "z.vdata")
    data.labels[:] = np.nan
    save_dataset(data, tmp_path / "nan.vdata")
    code = run("train", "--dataset", tmp_path / "nan.vdata", "--steps", 5, "--batch", 8, "--out", tmp_path / "x.vnet")
    assert code == cli.EXIT_NUMERIC


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "scatterfield.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-medium", "build-pyramid", "gen-template", "precompute", "gen-dataset", "train", "render",
                "compare"):
        assert cmd in out.stdout
