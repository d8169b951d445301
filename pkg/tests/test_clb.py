import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambientcyclegan.clb import (
    TRUNCATION_LEVEL,
    ClbParams,
    ClbRealization,
    Cluster,
    Lump,
    Normalization,
    add_cluster,
    calibrate_normalization,
    cluster_support_radius,
    move_cluster,
    rasterize,
    render,
    render_clusters,
    sample_clb,
)
from ambientcyclegan.errors import ParameterDomainError


def small(**kw):
    return replace(ClbParams.preset("opex").scaled_to((32, 32)), **kw)


def compact(**kw):
    """Lumps with a short tail so support bounds are smaller than the image."""
    base = dict(
        mean_clusters=10.0,
        mean_lumps_per_cluster=8.0,
        cluster_spread=4.0,
        lump_amplitude=1.0,
        lump_shape=2.1,
        lump_exponent=1.0,
        lump_lengths=(3.0, 1.5),
        image_size=(96, 96),
    )
    base.update(kw)
    return ClbParams(**base)


def polar_lump(params, px, py, theta):
    """Oracle: A exp(-alpha r^beta / l(phi)) with l the ellipse radius at the lump-frame angle."""
    h, w = params.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = xx - px, yy - py
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx) - theta
    lx, ly = params.lump_lengths
    ell = lx * ly / np.hypot(ly * np.cos(phi), lx * np.sin(phi))
    expo = params.lump_shape * r**params.lump_exponent / ell
    val = np.exp(-expo)
    return params.lump_amplitude * np.where(val >= TRUNCATION_LEVEL, val, 0.0)


# ---------------------------------------------------------------- params


def test_presets_match_declared_defaults():
    s = ClbParams.preset("simpiso")
    o = ClbParams.preset("opex")
    assert (s.mean_clusters, s.mean_lumps_per_cluster, s.cluster_spread) == (150, 20, 12)
    assert (s.lump_amplitude, s.lump_shape, s.lump_exponent, s.lump_lengths) == (1, 2.1, 0.5, (5, 2))
    assert o.cluster_spread == 8 and o.lump_lengths == (7, 3)
    assert o.image_size == (256, 256)
    assert small().image_size == (32, 32)


@pytest.mark.parametrize(
    "field,value",
    [("mean_clusters", 0), ("mean_lumps_per_cluster", -1), ("cluster_spread", 0), ("lump_shape", 0),
     ("lump_exponent", 0), ("lump_lengths", (0, 1)), ("lump_amplitude", math.nan), ("mean_clusters", math.inf)],
)
def test_invalid_params_rejected(field, value):
    with pytest.raises(ParameterDomainError):
        small(**{field: value})


def test_image_size_floor():
    with pytest.raises(ParameterDomainError):
        ClbParams.preset("opex", image_size=(15, 32))
    with pytest.raises(ParameterDomainError):
        small(image_size=(32, 8))
    ClbParams.preset("opex", image_size=(16, 16))


def test_unknown_preset():
    with pytest.raises(ParameterDomainError):
        ClbParams.preset("nope")


def test_truncation_radius_formula():
    p = compact()
    # lump value at the radius equals the truncation level for the longest axis
    r = p.truncation_radius
    assert math.isclose(math.exp(-p.lump_shape * r**p.lump_exponent / max(p.lump_lengths)), TRUNCATION_LEVEL, rel_tol=1e-9)


def test_scaled_to_keeps_density():
    p = ClbParams.preset("opex")
    q = p.scaled_to((64, 64))
    pad = 2 * p.margin
    assert math.isclose(q.mean_clusters / (64 + pad) ** 2, p.mean_clusters / (256 + pad) ** 2)
    assert q.cluster_spread == p.cluster_spread and q.image_size == (64, 64)


def test_params_roundtrip():
    p = small()
    assert ClbParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


# ---------------------------------------------------------------- sampling


def test_poisson_cluster_count_k10():
    p = compact(mean_clusters=10.0, image_size=(32, 32))
    counts = np.array([len(sample_clb(p, s).clusters) for s in range(1000)])
    assert 9.70 <= counts.mean() <= 10.30
    # variance within 4 sigma of its sampling spread (Poisson: var(s^2) ~ (mu + 2 mu^2)/M)
    assert abs(counts.var(ddof=1) - 10) <= 4 * math.sqrt((10 + 2 * 100) / 1000)


def test_lump_counts_and_centers_in_padded_domain():
    p = small(mean_clusters=30.0)
    n_clusters, n_lumps = 0, 0
    for s in range(200):
        r = sample_clb(p, s)
        for c in r.clusters:
            x, y = c.center
            assert -p.margin <= x <= 31 + p.margin and -p.margin <= y <= 31 + p.margin
        n_clusters += len(r.clusters)
        n_lumps += r.n_lumps
    assert abs(n_lumps / n_clusters - 20.0) < 4 * math.sqrt(20.0 / n_clusters)


def test_expected_total_lumps_default_preset():
    p = ClbParams.preset("simpiso")
    totals = [sample_clb(p, s).n_lumps for s in range(100)]
    assert all(isinstance(t, int) and t >= 0 for t in totals)
    # Var(K N) for compound Poisson = K (N + N^2) = 150 * 420
    assert abs(np.mean(totals) - 3000) < 4 * math.sqrt(150 * 420 / 100)


def test_offsets_gaussian_and_orientations_uniform():
    p = small(mean_clusters=40.0)
    offs, angles = [], []
    for s in range(60):
        for c in sample_clb(p, s).clusters:
            offs += [l.offset for l in c.lumps]
            angles += [l.orientation for l in c.lumps]
    offs, angles = np.array(offs), np.array(angles)
    assert np.allclose(offs.std(axis=0), p.cluster_spread, rtol=0.05)
    assert np.allclose(offs.mean(axis=0), 0, atol=0.3)
    assert angles.min() >= 0 and angles.max() < 2 * math.pi
    from scipy import stats

    assert stats.kstest(angles / (2 * math.pi), "uniform").pvalue > 1e-3


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_sampling_deterministic(seed):
    p = small()
    a, b = sample_clb(p, seed), sample_clb(p, seed)
    assert a == b
    assert np.array_equal(render(a), render(b))


def test_negative_seed_rejected():
    with pytest.raises(ParameterDomainError):
        sample_clb(small(), -1)


def test_realization_json_roundtrip():
    r = sample_clb(small(), 5)
    doc = json.loads(r.to_json())
    assert doc["format_version"] == 1 and doc["seed"] == 5
    assert ClbRealization.from_json(r.to_json()) == r


# ---------------------------------------------------------------- rendering


@pytest.mark.parametrize("theta", [0.0, 0.4, 2.0, 4.5])
@pytest.mark.parametrize("exponent", [0.5, 1.0, 2.0])
def test_single_lump_matches_polar_oracle(theta, exponent):
    p = compact(lump_exponent=exponent, image_size=(40, 48), lump_amplitude=1.7)
    px, py = 21.3, 17.8
    got = render_clusters(p, [Cluster((px, py), (Lump((0.0, 0.0), theta),))])
    want = polar_lump(p, px, py, theta)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def _oracle_render(params, r):
    return sum(
        polar_lump(params, c.center[0] + l.offset[0], c.center[1] + l.offset[1], l.orientation)
        for c in r.clusters
        for l in c.lumps
    )


@pytest.mark.parametrize("exponent", [1.0, 0.5])
def test_full_realization_matches_oracle(exponent):
    # exponent 1 takes the per-lump window path, 0.5 the whole-image path
    p = compact(image_size=(64, 64), lump_exponent=exponent)
    assert (2 * p.truncation_radius < 64) == (exponent == 1.0)
    r = sample_clb(p, 3)
    assert np.allclose(render(r), _oracle_render(p, r), atol=1e-9)


def test_empty_realization_constant():
    p = small()
    r = ClbRealization(p, (), 0)
    img = rasterize(r).pixels
    assert np.ptp(img) == 0


def test_isotropic_lump_radially_symmetric():
    p = compact(lump_lengths=(3.0, 3.0), image_size=(33, 33), lump_exponent=0.5)
    r = ClbRealization(p, (Cluster((16.0, 16.0), (Lump((0.0, 0.0), 0.0),)),), 0)
    img = rasterize(r, Normalization.from_range(0, 1)).pixels.astype(float)
    for k in range(4):
        assert np.allclose(np.rot90(img, k), img, atol=1e-6)
    assert np.allclose(img, img.T, atol=1e-6)


def test_amplitude_linearity():
    p = compact()
    q = compact(lump_amplitude=2.0)
    r = sample_clb(p, 11)
    assert np.array_equal(render_clusters(q, r.clusters), 2.0 * render(r))


@given(st.integers(0, 10_000), st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_union_linearity(s1, s2):
    p = compact(image_size=(48, 48))
    a, b = sample_clb(p, s1).clusters, sample_clb(p, s2).clusters
    assert np.allclose(render_clusters(p, a + b), render_clusters(p, a) + render_clusters(p, b), atol=1e-12)


def test_normalization_range_and_record():
    p = small()
    r = sample_clb(p, 1)
    obj = rasterize(r)
    assert obj.domain_tag == "X"
    assert obj.pixels.dtype == np.float32
    assert obj.pixels.min() >= -1 and obj.pixels.max() <= 1
    assert np.all(np.isfinite(obj.pixels))
    assert obj.normalization == calibrate_normalization(p)


def test_normalization_affine():
    n = Normalization.from_range(2.0, 6.0)
    assert np.allclose(n.apply(np.array([2.0, 4.0, 6.0, 10.0])), [-1, 0, 1, 1])
    assert Normalization.from_dict(n.to_dict()) == n


# ---------------------------------------------------------------- edits


def test_add_cluster_preserves_existing_and_appends():
    p = small()
    r = sample_clb(p, 2)
    e = add_cluster(r, (10.0, 12.0), 5, seed=9)
    assert e.clusters[:-1] == r.clusters
    assert e.clusters[-1].center == (10.0, 12.0) and len(e.clusters[-1].lumps) == 5


@pytest.mark.parametrize("center", [(-100.0, 0.0), (0.0, 200.0), (math.nan, 1.0)])
def test_add_cluster_out_of_bounds(center):
    with pytest.raises(ParameterDomainError):
        add_cluster(sample_clb(small(), 0), center, 3, 0)


def test_add_cluster_zero_lumps_rejected():
    with pytest.raises(ParameterDomainError):
        add_cluster(sample_clb(small(), 0), (5.0, 5.0), 0, 0)


def test_move_bad_index():
    r = sample_clb(small(), 0)
    with pytest.raises(IndexError):
        move_cluster(r, len(r.clusters), (1.0, 1.0))
    with pytest.raises(IndexError):
        move_cluster(r, -1, (1.0, 1.0))


def test_move_identity_and_inverse():
    r = sample_clb(small(mean_clusters=20.0), 4)
    c = r.clusters[0].center
    assert move_cluster(r, 0, c) == r
    moved = move_cluster(r, 0, (3.0, 4.0))
    assert moved.clusters[0].lumps == r.clusters[0].lumps
    assert moved.clusters[1:] == r.clusters[1:]
    assert move_cluster(moved, 0, c) == r


def test_add_then_move_back_is_identity_on_geometry():
    r = sample_clb(small(), 4)
    e = add_cluster(r, (8.0, 9.0), 4, 1)
    m = move_cluster(move_cluster(e, len(e.clusters) - 1, (20.0, 20.0)), len(e.clusters) - 1, (8.0, 9.0))
    assert m == e


def _outside(params, centers, radius):
    h, w = params.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.zeros((h, w), bool)
    for cx, cy in centers:
        inside |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    return ~inside


def edit_locality_violations(params, n_edits, seed=0):
    """Count edits whose unnormalized difference is nonzero outside the support bound."""
    rng = np.random.default_rng(seed)
    h, w = params.image_size
    bad = 0
    for i in range(n_edits):
        r = sample_clb(params, int(rng.integers(1 << 30)))
        center = (float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)))
        if i % 2 == 0 or not r.clusters:
            e = add_cluster(r, center, int(rng.integers(1, 30)), int(rng.integers(1 << 30)))
            cl = e.clusters[-1]
            centers = [cl.center]
        else:
            k = int(rng.integers(len(r.clusters)))
            e = move_cluster(r, k, center)
            cl = r.clusters[k]
            centers = [cl.center, center]
        diff = render(e) - render(r)
        out = _outside(params, centers, cluster_support_radius(params, cl))
        bad += int(np.any(diff[out] != 0))
    return bad


def test_edit_locality_compact_lumps():
    p = compact(image_size=(96, 96))
    assert cluster_support_radius(p, Cluster((0, 0), ())) < 48
    assert edit_locality_violations(p, 100) == 0


def test_support_bound_is_tight_in_direction():
    # a lump just inside the bound contributes, a pixel beyond it does not
    p = compact(lump_lengths=(3.0, 3.0), image_size=(128, 128), cluster_spread=1.0)
    lump = Cluster((10.0, 64.0), (Lump((0.0, 0.0), 0.0),))
    img = render_clusters(p, [lump])
    radius = cluster_support_radius(p, lump)
    cols = np.nonzero(img[64])[0]
    assert cols.max() - 10 <= radius
    assert cols.max() - 10 > p.truncation_radius - 1
