import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scatterfield.volume_grid import (
    VGRID_HEADER_SIZE,
    DensityGrid,
    MalformedHeaderError,
    MaterialClass,
    MediumProperties,
    NegativeDensityError,
    NonFiniteDensityError,
    NonPowerOfTwoError,
    TruncatedPayloadError,
    build_pyramid,
    load_density,
    optical_depth,
    pyramid_level_count,
    sample_trilinear,
    save_density,
)


def write_raw(path, dims, payload, magic=b"VGRD", version=1, voxel=1.0, origin=(0.0, 0.0, 0.0)):
    header = struct.pack("<4sI3If3f", magic, version, *dims, voxel, *origin)
    path.write_bytes(header + np.asarray(payload, "<f4").tobytes())


# --- load / save -------------------------------------------------------------

def test_zero_grid_loads(tmp_path):
    f = tmp_path / "z.vgrid"
    write_raw(f, (2, 2, 2), np.zeros(8))
    g = load_density(f)
    assert g.dims == (2, 2, 2)
    np.testing.assert_array_equal(g.values, 0.0)


def test_header_layout_and_64_cubed_payload_accepted(tmp_path):
    # magic, version, three dims, voxel size and three origin components
    assert VGRID_HEADER_SIZE == 4 + 4 + 3 * 4 + 4 + 3 * 4
    f = tmp_path / "big.vgrid"
    write_raw(f, (64, 64, 64), np.ones(64**3))
    assert f.stat().st_size == VGRID_HEADER_SIZE + 64**3 * 4
    assert load_density(f).dims == (64, 64, 64)


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    g = DensityGrid(rng.random((4, 8, 2)).astype(np.float32), 0.25, np.array([-0.5, 0.1, 2.0]))
    a, b = tmp_path / "a.vgrid", tmp_path / "b.vgrid"
    save_density(g, a)
    save_density(load_density(a), b)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(load_density(a).values, g.values)


def test_payload_is_x_fastest(tmp_path):
    f = tmp_path / "o.vgrid"
    write_raw(f, (2, 1, 1), [1.0, 2.0])
    g = load_density(f)
    assert g.dims == (2, 1, 1)
    np.testing.assert_array_equal(g.values[:, 0, 0], [1.0, 2.0])


@pytest.mark.parametrize("payload, error", [
    ([-1.0] + [0.0] * 7, NegativeDensityError),
    ([math.nan] + [0.0] * 7, NonFiniteDensityError),
    ([0.0] * 5, TruncatedPayloadError),
])
def test_invalid_payloads_have_distinct_errors(tmp_path, payload, error):
    f = tmp_path / "bad.vgrid"
    write_raw(f, (2, 2, 2), payload)
    with pytest.raises(error):
        load_density(f)


def test_non_power_of_two_and_bad_header(tmp_path):
    f = tmp_path / "npot.vgrid"
    write_raw(f, (3, 2, 2), np.zeros(12))
    with pytest.raises(NonPowerOfTwoError):
        load_density(f)
    f2 = tmp_path / "magic.vgrid"
    write_raw(f2, (2, 2, 2), np.zeros(8), magic=b"XXXX")
    with pytest.raises(MalformedHeaderError):
        load_density(f2)
    f3 = tmp_path / "short.vgrid"
    f3.write_bytes(b"VGRD")
    with pytest.raises(MalformedHeaderError):
        load_density(f3)
    # the four error kinds are distinct classes
    kinds = {MalformedHeaderError, NonPowerOfTwoError, NegativeDensityError, TruncatedPayloadError}
    assert len(kinds) == 4


# --- pyramid -----------------------------------------------------------------

def test_level_count():
    assert pyramid_level_count((1024, 1024, 1024)) == 11
    assert len(build_pyramid(DensityGrid(np.zeros((16, 16, 16))))) == 5


def test_constant_grid_stays_constant():
    p = build_pyramid(DensityGrid(np.full((8, 8, 8), 2.5)))
    for level in p.levels:
        np.testing.assert_array_equal(level.values, 2.5)


def test_two_cubed_mean():
    g = DensityGrid(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    p = build_pyramid(g)
    assert len(p) == 2
    assert p[1].values[0, 0, 0] == 3.5
    assert p[1].voxel_size == 2.0


def test_pyramid_rejects_npot():
    with pytest.raises(NonPowerOfTwoError):
        DensityGrid(np.zeros((6, 4, 4)))


@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 8, 8), (4, 8, 2), (16, 4, 4)]))
def test_mean_pooling_conserves_mass(seed, dims):
    v = np.random.default_rng(seed).random(dims).astype(np.float32)
    p = build_pyramid(DensityGrid(v))
    for a, b in zip(p.levels, p.levels[1:]):
        if b.dims == a.dims:
            continue
        ratio = np.prod(a.dims) / np.prod(b.dims)
        assert abs(b.values.sum(dtype=np.float64) * ratio - a.values.sum(dtype=np.float64)) <= \
            1e-5 * a.values.sum(dtype=np.float64)
    assert p.levels[-1].dims == (1, 1, 1)


# --- trilinear sampling ------------------------------------------------------

def test_voxel_center_identity_and_midpoint():
    rng = np.random.default_rng(1)
    g = DensityGrid(rng.random((4, 4, 4)), 0.5, np.zeros(3))
    idx = np.array([[1, 2, 3], [0, 0, 0], [3, 1, 2]])
    np.testing.assert_allclose(sample_trilinear(g, g.voxel_centers(idx)), g.values[tuple(idx.T)], rtol=1e-6)
    v = np.ones((4, 4, 4))
    v[1, 1, 1], v[2, 1, 1] = 2.0, 4.0
    g2 = DensityGrid(v, 1.0, np.zeros(3))
    mid = 0.5 * (g2.voxel_centers([[1, 1, 1]]) + g2.voxel_centers([[2, 1, 1]]))
    np.testing.assert_allclose(sample_trilinear(g2, mid), [3.0])


def test_outside_is_zero():
    g = DensityGrid(np.ones((4, 4, 4)), 1.0, np.zeros(3))
    assert sample_trilinear(g, [[-0.01, 2.0, 2.0]])[0] == 0.0
    assert sample_trilinear(g, [[2.0, 2.0, 4.5]])[0] == 0.0


@given(st.integers(0, 2**31 - 1))
def test_trilinear_continuous_across_voxel_boundaries(seed):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, 8)
    smooth = np.sin(3 * x)[:, None, None] + np.cos(2 * x)[None, :, None] + x[None, None, :] ** 2
    g = DensityGrid(smooth + 2.0, 1.0, np.zeros(3))
    # a voxel face at integer x inside the grid
    face = rng.integers(1, 8)
    p = np.array([face, rng.uniform(0.6, 7.4), rng.uniform(0.6, 7.4)])
    eps = np.array([1e-9, 0, 0])
    lo, hi = sample_trilinear(g, np.stack([p - eps, p + eps]))
    assert abs(hi - lo) < 1e-6


# --- optical depth -----------------------------------------------------------

def test_optical_depth_examples():
    z = DensityGrid(np.zeros((4, 4, 4)), 1.0, np.zeros(3))
    assert optical_depth(z, [0.1, 0.1, 0.1], [3.9, 3.9, 3.9]) == 0.0
    one = DensityGrid(np.ones((4, 4, 4)), 1.0, np.zeros(3))
    assert abs(optical_depth(one, [1.0, 2.0, 2.0], [3.0, 2.0, 2.0]) - 2.0) < 1e-6
    with pytest.raises(ValueError):
        optical_depth(one, [0, 0, 0], [1, 1, 1], step=0.0)


def test_optical_depth_ramp_against_dense_quadrature():
    n = 16
    x = (np.arange(n) + 0.5) / n
    ramp = np.broadcast_to(x[:, None, None] + 0.5 * x[None, :, None], (n, n, n)).copy()
    g = DensityGrid(ramp, 1.0 / n, np.zeros(3))
    p, q = np.array([0.1, 0.2, 0.3]), np.array([0.9, 0.7, 0.6])
    s = (np.arange(10**6) + 0.5) / 10**6
    oracle = sample_trilinear(g, p + s[:, None] * (q - p)).mean() * np.linalg.norm(q - p)
    got = optical_depth(g, p, q, step=g.voxel_size / 4)
    assert abs(got - oracle) / oracle < 1e-3


@given(st.integers(0, 2**31 - 1))
def test_optical_depth_additive(seed):
    rng = np.random.default_rng(seed)
    g = DensityGrid(rng.random((8, 8, 8)), 1.0 / 8, np.zeros(3))
    p = rng.uniform(0.05, 0.95, 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    step = 1.0 / 64
    q = p + 7 * step * d
    r = p + 19 * step * d
    a, b, c = optical_depth(g, p, q, step), optical_depth(g, q, r, step), optical_depth(g, p, r, step)
    assert abs(a + b - c) <= 1e-5 * max(c, 1e-12)


# --- medium properties -------------------------------------------------------

def test_medium_properties_ranges():
    m = MediumProperties((2.0, 3.0, 4.0), (0.9, 0.8, 0.7), MaterialClass.SOLID_LIQUID)
    assert m.albedo == (0.9, 0.8, 0.7)
    with pytest.raises(ValueError):
        MediumProperties((1.0,) * 3, (0.9,) * 3, MaterialClass.GAS)
    with pytest.raises(ValueError):
        MediumProperties((1.0,) * 3, (0.3,) * 3, MaterialClass.SKIN)
    with pytest.raises(ValueError):
        MediumProperties((1.0,) * 3, (1.0,) * 3, MaterialClass.AIR)
    with pytest.raises(ValueError):
        MediumProperties((0.0, 1.0, 1.0), (0.2,) * 3, MaterialClass.GAS)
