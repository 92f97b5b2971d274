import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scatterfield.templates import (
    DIFFUSE_COUNTS,
    HIGHLIGHT_COUNTS,
    TemplateKind,
    best_candidate,
    generate_diffuse_template,
    generate_highlight_template,
    layer_radius,
    load_template,
    overlap_factor,
    place_template,
    save_template,
    shell_sampler,
    uniformity_metric,
    uniformity_metric_bruteforce,
)


@pytest.fixture(scope="module")
def diffuse():
    return generate_diffuse_template(seed=0)


@pytest.fixture(scope="module")
def highlight():
    return generate_highlight_template(seed=0)


# --- uniformity metric -------------------------------------------------------

def test_metric_examples():
    assert uniformity_metric([[0, 0, 0], [0, 0, 2.5]]) == pytest.approx(2.5)
    tri = [[0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0]]
    assert uniformity_metric(tri) == pytest.approx(1.0)
    pts = np.random.default_rng(0).random((20, 3))
    assert uniformity_metric(pts) == uniformity_metric_bruteforce(pts)
    with pytest.raises(ValueError):
        uniformity_metric([[0, 0, 0]])


# --- radii -------------------------------------------------------------------

def test_radius_examples():
    assert overlap_factor(1) == pytest.approx(0.92)
    for i in (5, 6, 7):
        assert overlap_factor(i) == pytest.approx(0.60)
    assert layer_radius(1, 1.0) == pytest.approx(0.00359375)
    for i in range(1, 7):
        assert layer_radius(i + 1, 0.7) / layer_radius(i, 0.7) == pytest.approx(
            2 * overlap_factor(i + 1) / overlap_factor(i))
    with pytest.raises(ValueError):
        layer_radius(2, 0.0)


@given(st.floats(0.01, 10.0))
def test_radius_increasing(d):
    r = [layer_radius(i, d) for i in range(1, 8)]
    assert all(b > a for a, b in zip(r, r[1:]))


# --- diffuse -----------------------------------------------------------------

def test_diffuse_counts_and_origin(diffuse):
    assert diffuse.kind is TemplateKind.DIFFUSE
    assert diffuse.counts == DIFFUSE_COUNTS == (6, 8, 12, 16, 24, 32, 48, 48)
    assert diffuse.total_points == 194
    first = diffuse.layers[0].points
    assert np.sum(np.all(first == 0.0, axis=1)) == 1
    np.testing.assert_allclose(diffuse.layers[0].radius, 0.5 * diffuse.layers[1].radius)


def check_shells(t):
    r = t.radii
    assert np.all(np.diff(r) > 0)
    assert np.all(np.linalg.norm(t.layers[0].points, axis=1) <= r[0] * (1 + 1e-9))
    for i in range(1, len(r)):
        norms = np.linalg.norm(t.layers[i].points, axis=1)
        assert np.all(norms <= r[i] * (1 + 1e-9))
        assert np.all(norms > r[i - 1])


def test_shell_containment(diffuse):
    check_shells(diffuse)


@given(st.integers(0, 10_000))
def test_shell_containment_property(seed):
    check_shells(generate_diffuse_template(seed=seed))


def test_determinism(diffuse, highlight):
    again = generate_diffuse_template(seed=0)
    for a, b in zip(diffuse.layers, again.layers):
        np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(generate_diffuse_template(seed=1).layers[3].points, diffuse.layers[3].points)
    h2 = generate_highlight_template(seed=0)
    np.testing.assert_array_equal(h2.all_points(), highlight.all_points())


def test_best_candidate_beats_first_random_candidate():
    sampler = shell_sampler(0.5)
    for seed in range(5):
        first = best_candidate(24, sampler, np.random.default_rng(seed), first_only=True)
        got = best_candidate(24, sampler, np.random.default_rng(seed))
        assert uniformity_metric(got) > uniformity_metric(first)


def test_zero_count_rejected():
    with pytest.raises(ValueError):
        generate_diffuse_template(counts=(6, 8, 0, 16, 24, 32, 48, 48))
    with pytest.raises(ValueError):
        generate_highlight_template(counts=(32, 16, 0, 8))
    with pytest.raises(ValueError):
        generate_highlight_template(entry_to_p_distance=0.0)


# --- highlight ---------------------------------------------------------------

def test_highlight_counts(highlight):
    assert highlight.counts == HIGHLIGHT_COUNTS == (32, 16, 16, 8)
    assert highlight.total_points == 72


def test_layers_partition_the_segment(highlight):
    L = highlight.length
    for j, layer in enumerate(highlight.layers):
        z = layer.points[:, 2]
        assert np.all(z >= j * L / 4 - 1e-12)
        assert np.all(z <= (j + 1) * L / 4 + 1e-12)
    # inside the cone whose apex is p (z = L)
    pts = highlight.all_points()
    lateral = np.linalg.norm(pts[:, :2], axis=1)
    assert np.all(lateral <= (L - pts[:, 2]) * math.tan(highlight.cone_half_angle) + 1e-12)


def test_zero_cone_lies_on_the_ray():
    t = generate_highlight_template(cone_half_angle=0.0, seed=3)
    np.testing.assert_array_equal(t.all_points()[:, :2], 0.0)


# --- placement ---------------------------------------------------------------

def test_diffuse_placement(diffuse):
    np.testing.assert_array_equal(place_template(diffuse, np.zeros(3)), diffuse.all_points())
    p = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(place_template(diffuse, p, scale=2.0), p + 2.0 * diffuse.all_points())


def test_highlight_first_layer_near_entry(highlight):
    l = np.array([0.0, -1.0, 0.0])
    p = np.array([0.1, 0.0, 0.2])
    L = 0.8
    entry = p - L * l
    pts = place_template(highlight, p, omega=[0, 0, 1], light=l, entry=entry)
    axial = (pts[:32] - entry) @ l
    assert np.all(axial >= -1e-12) and np.all(axial <= L / 4 + 1e-12)


def test_highlight_rotation_equivariance(highlight):
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    R = q if np.linalg.det(q) > 0 else -q
    l = np.array([0.3, -1.0, 0.2])
    l /= np.linalg.norm(l)
    omega = np.array([0.2, 0.1, 1.0])
    entry = np.array([0.05, 0.4, -0.1])
    p = entry + 0.6 * l
    a = place_template(highlight, p, omega, l, entry)
    b = place_template(highlight, entry + R @ (p - entry), R @ omega, R @ l, entry)
    np.testing.assert_allclose(b - entry, (a - entry) @ R.T, atol=1e-6)


def test_vtmpl_round_trip(tmp_path, diffuse, highlight):
    for t in (diffuse, highlight):
        f = tmp_path / f"{t.kind.value}.vtmpl"
        save_template(t, f)
        back = load_template(f)
        assert back.counts == t.counts
        np.testing.assert_array_equal(back.all_points(), t.all_points())
        np.testing.assert_array_equal(back.radii, t.radii)
        assert back.cone_half_angle == t.cone_half_angle
