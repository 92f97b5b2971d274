import math

import numpy as np
import pytest

from conftest import homogeneous_medium
from scatterfield import media
from scatterfield.features import FeatureContext, precompute_tables
from scatterfield.phase import INV_4PI, PhaseModel, eval_phase
from scatterfield.rte import (
    FLAG_NOISY,
    DatasetFormatError,
    generate_dataset,
    light_entry,
    load_dataset,
    march_samples,
    neumann_apply,
    neumann_series,
    path_trace_inscatter,
    render_reference,
    render_single_scatter,
    save_dataset,
    single_scatter,
    single_scatter_batch,
    transmittance,
)
from scatterfield.scene import Camera, DistantLight, Medium
from scatterfield.templates import generate_diffuse_template, generate_highlight_template
from scatterfield.volume_grid import DensityGrid, MaterialClass, MediumProperties, sample_trilinear

P = np.array([0.1, 0.0, -0.1])
OMEGA = np.array([0.0, 0.3, 1.0]) / math.hypot(0.3, 1.0)


def within_sigma(a, b, se, k=3.0):
    return np.all(np.abs(np.asarray(a) - np.asarray(b)) <= k * np.asarray(se))


# --- transmittance -----------------------------------------------------------

def test_transmittance_examples():
    vac = homogeneous_medium(density=0.0)
    np.testing.assert_array_equal(transmittance(vac, [-0.4, 0, 0], [0.4, 0.1, 0]), 1.0)
    m = homogeneous_medium(n=16, sigma=1.0)
    got = transmittance(m, [-0.5, 0, 0], [0.5, 0, 0], step=m.grid.voxel_size / 4)
    np.testing.assert_allclose(got, math.exp(-1.0), atol=1e-3)
    with pytest.raises(ValueError):
        transmittance(m, [0, 0, 0], [0.1, 0, 0], step=0.0)


def test_transmittance_multiplicative_and_reciprocal():
    rng = np.random.default_rng(0)
    m = Medium(DensityGrid(rng.random((8, 8, 8)), 1 / 8, np.full(3, -0.5)),
               MediumProperties((3.0, 4.0, 5.0), (0.9,) * 3, MaterialClass.SOLID_LIQUID), PhaseModel.hg(0.5))
    p = np.array([-0.4, -0.3, 0.2])
    d = np.array([0.6, 0.5, -0.3]) / np.linalg.norm([0.6, 0.5, -0.3])
    step = m.march_step
    q, r = p + 12 * step * d, p + 30 * step * d
    np.testing.assert_allclose(transmittance(m, p, q) * transmittance(m, q, r), transmittance(m, p, r), rtol=1e-5)
    np.testing.assert_allclose(transmittance(m, p, r), transmittance(m, r, p), rtol=1e-6)


# --- single scatter ----------------------------------------------------------

def test_single_scatter_examples():
    vac = homogeneous_medium(density=0.0, phase=PhaseModel.isotropic(), material=MaterialClass.AIR, albedo=0.5)
    light = DistantLight([0, -1, 0])
    np.testing.assert_allclose(single_scatter(vac, light, P, OMEGA), INV_4PI, rtol=1e-12)
    opaque = homogeneous_medium(sigma=1e6)
    np.testing.assert_array_equal(single_scatter(opaque, light, P, OMEGA), 0.0)


def test_single_scatter_against_quadrature():
    m = homogeneous_medium(n=16, sigma=2.0, phase=PhaseModel.hg(0.6))
    light = DistantLight([0.3, -1.0, 0.2])
    p = np.array([0.05, -0.1, 0.12])
    entry = light_entry(m, light, p)
    s = (np.arange(10**5) + 0.5) / 10**5
    depth = sample_trilinear(m.grid, p + s[:, None] * (entry - p)).mean() * np.linalg.norm(entry - p)
    expect = eval_phase(m.phase, float(-light.direction @ OMEGA)) * np.exp(-m.sigma_t * depth)
    got = single_scatter(m, light, p, OMEGA, step=m.grid.voxel_size / 4)
    np.testing.assert_allclose(got, expect, rtol=1e-3)
    batch = single_scatter_batch(m, light, [p], [OMEGA], step=m.grid.voxel_size / 4)[0]
    np.testing.assert_allclose(batch, got, rtol=1e-6)


# --- transport operator ------------------------------------------------------

def test_apply_to_zero_is_zero(cube8, down_light):
    est = neumann_apply(cube8, down_light, lambda p, v: np.zeros((len(p), 3)), P, OMEGA, 256)
    np.testing.assert_array_equal(est.value, 0.0)


def test_apply_is_linear(cube8, down_light):
    F0 = lambda p, v: single_scatter_batch(cube8, down_light, p, v)
    a = neumann_apply(cube8, down_light, F0, P, OMEGA, 4000, seed=1)
    b = neumann_apply(cube8, down_light, lambda p, v: 2.5 * F0(p, v), P, OMEGA, 4000, seed=2)
    se = np.hypot(2.5 * a.stderr, b.stderr)
    assert within_sigma(2.5 * a.value, b.value, se)


def test_apply_to_single_scatter_matches_depth_one_walks(cube8, down_light):
    F0 = lambda p, v: single_scatter_batch(cube8, down_light, p, v)
    est = neumann_apply(cube8, down_light, F0, P, OMEGA, 10**4, seed=3)
    # one bounce of the path tracer adds albedo * F_1 to the exact F_0
    pt = path_trace_inscatter(cube8, down_light, P, OMEGA, 10**4, max_depth=1, seed=4)
    eta = cube8.albedo
    f1 = (pt.F - single_scatter(cube8, down_light, P, OMEGA)) / eta
    assert within_sigma(est.value, f1, np.hypot(est.stderr, pt.stderr / eta))


# --- series ------------------------------------------------------------------

def test_zero_albedo_series_is_single_scatter(down_light):
    m = homogeneous_medium(albedo=0.0, material=MaterialClass.GAS)
    s = neumann_series(m, down_light, P, OMEGA, order=6, samples=500)
    np.testing.assert_array_equal(s.total, s.terms[0])
    np.testing.assert_allclose(s.terms[0], single_scatter(m, down_light, P, OMEGA), rtol=1e-6)


def test_partial_sums_nondecreasing(cube8, down_light):
    s = neumann_series(cube8, down_light, P, OMEGA, order=10, samples=2000, seed=5)
    assert np.all(s.terms >= 0)
    assert np.all(np.diff(s.partial_sums, axis=0) >= 0)


def test_series_increments_shrink(cube8, down_light):
    s = neumann_series(cube8, down_light, P, OMEGA, order=10, samples=20000, seed=6)
    inc = (s.albedo[None, :] ** np.arange(11)[:, None]) * s.terms
    bound = (s.albedo[None, :] ** np.arange(11)[:, None]) * s.term_stderr
    for k in range(3, 10):
        assert np.all(inc[k + 1] <= inc[k] * (s.albedo + 0.1) + 3 * np.hypot(bound[k + 1], bound[k]))


def test_codirectional_mode_runs(cube8, down_light):
    s = neumann_series(cube8, down_light, P, OMEGA, order=4, samples=500, codirectional=True)
    assert np.all(np.isfinite(s.partial_sums)) and np.all(s.terms >= 0)


def test_series_matches_path_tracer(cube8, down_light):
    s = neumann_series(cube8, down_light, P, OMEGA, order=8, samples=10**4, seed=7)
    pt = path_trace_inscatter(cube8, down_light, P, OMEGA, 10**4, seed=8)
    # orders above eight are small here; the comparison uses the truncated sum
    assert within_sigma(s.total, pt.F, np.hypot(s.partial_stderr[-1], pt.stderr))


# --- path tracer -------------------------------------------------------------

def test_path_tracer_in_vacuum_is_direct_term():
    m = homogeneous_medium(density=0.0)
    light = DistantLight([0.2, -1.0, 0.1])
    lab = path_trace_inscatter(m, light, P, OMEGA, 64, seed=0)
    expect = eval_phase(m.phase, float(-light.direction @ OMEGA))
    np.testing.assert_allclose(lab.F, expect, rtol=1e-12)
    assert lab.spp == 64


def test_path_tracer_linear_in_intensity(cube8):
    a = path_trace_inscatter(cube8, DistantLight([0, -1, 0], 1.0), P, OMEGA, 256, seed=9)
    b = path_trace_inscatter(cube8, DistantLight([0, -1, 0], 2.0), P, OMEGA, 256, seed=9)
    np.testing.assert_allclose(b.F, 2.0 * a.F, rtol=1e-12)


def test_path_tracer_deterministic(cube8, down_light):
    a = path_trace_inscatter(cube8, down_light, P, OMEGA, 128, seed=10)
    b = path_trace_inscatter(cube8, down_light, P, OMEGA, 128, seed=10)
    np.testing.assert_array_equal(a.F, b.F)


# --- dataset -----------------------------------------------------------------

@pytest.fixture(scope="module")
def slab_setup():
    m = Medium(media.slab(16), MediumProperties((6.0,) * 3, (0.9,) * 3, MaterialClass.SOLID_LIQUID),
               PhaseModel.hg(0.6))
    light = DistantLight([0.0, -1.0, 0.0])
    ctx = FeatureContext.build(m, light, generate_diffuse_template(seed=0), generate_highlight_template(seed=0))
    return m, light, precompute_tables(ctx, 12, seed=0)


def test_dataset_counts_and_determinism(tmp_path, slab_setup):
    m, light, table = slab_setup
    a = generate_dataset(table, m, light, spp=64, seed=1)
    b = generate_dataset(table, m, light, spp=64, seed=1)
    assert len(a) == len(table) == 12
    np.testing.assert_array_equal(a.centers, table.centers)
    assert a.digest() == b.digest()
    f = tmp_path / "z.vdata"
    save_dataset(a, f)
    back = load_dataset(f)
    np.testing.assert_array_equal(back.labels, a.labels)
    np.testing.assert_array_equal(back.diffuse, a.diffuse)
    assert back.manifest["spp"] == 64
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError):
        load_dataset(f)


def test_noisy_entries_flagged(slab_setup):
    m, light, table = slab_setup
    d = generate_dataset(table, m, light, spp=4, seed=2, stderr_ceiling=1e-6)
    assert np.all(d.flags == FLAG_NOISY)
    assert not np.any(d.usable())


def test_slab_labels_match_series(slab_setup):
    m, light, table = slab_setup
    d = generate_dataset(table, m, light, spp=4000, seed=3)
    for i in range(3):
        s = neumann_series(m, light, d.centers[i], d.omegas[i], order=12, samples=4000, seed=11 + i)
        assert within_sigma(d.labels[i], s.total, np.hypot(d.stderr[i], s.partial_stderr[-1]) + 1e-6)


# --- images ------------------------------------------------------------------

CAM = Camera([0.0, 0.0, 2.0], [0.0, 0.0, 0.0], vfov_deg=35.0, width=8, height=8)


def test_zero_density_renders_background():
    m = homogeneous_medium(density=0.0)
    light = DistantLight([0, -1, 0])
    bg = (0.2, 0.3, 0.4)
    img, _ = render_reference(m, light, CAM, spp=4, background=bg)
    np.testing.assert_array_equal(img, np.broadcast_to(bg, img.shape))
    np.testing.assert_array_equal(render_single_scatter(m, light, CAM, background=bg),
                                  np.broadcast_to(bg, img.shape))


def test_reference_respects_energy_bound(cube8, down_light):
    img, se = render_reference(cube8, down_light, CAM, spp=64, seed=0)
    eta = float(cube8.albedo.max())
    # F is at most f_max * I / (1 - eta); the march weights sum to at most eta
    bound = eta * float(eval_phase(cube8.phase, 1.0)) / (1 - eta)
    assert np.all(img <= bound + 5 * se)
    assert np.all(img >= 0)


def test_march_weights_integrate_to_opacity(cube8):
    plan = march_samples(cube8, CAM)
    n = len(plan.views)
    owner = np.repeat(np.arange(n), np.diff(plan.offsets))
    total = np.zeros((n, 3))
    np.add.at(total, owner, plan.weights / cube8.albedo)
    np.testing.assert_allclose(total + plan.background_transmittance, 1.0, atol=1e-2)
