import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifol import autodiff as ad
from ifol.fem import dirichlet_from_sets
from ifol.field_net import (FieldNetConfig, FieldNetParams, LatentCode, decode, forward, hidden_weight_bound,
                            init_params, nodal_field, normalize_coords)
from ifol.mesh import generate_grid

CFG = FieldNetConfig(hidden=(16, 16), latent_dim=8)


def test_init_bounds_and_zero_biases():
    cfg = FieldNetConfig()
    p = init_params(cfg, 0)
    assert np.abs(p.block("W0")).max() <= 1.0 / cfg.in_dim
    assert np.abs(p.block("W1")).max() <= hidden_weight_bound(32, cfg.omega0)
    assert np.abs(p.block("W3")).max() <= hidden_weight_bound(32, cfg.omega0)
    assert np.abs(p.block("V0")).max() <= hidden_weight_bound(cfg.latent_dim, cfg.omega0)
    for name in ("b0", "b1", "b2", "b3", "m0", "m1", "m2"):
        np.testing.assert_array_equal(p.block(name), 0.0)
    # uniform draws fill most of the allowed interval
    assert np.abs(p.block("W1")).max() > 0.9 * hidden_weight_bound(32, cfg.omega0)


def test_init_is_seeded():
    a, b = init_params(CFG, 5), init_params(CFG, 5)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(CFG, 6).flat)


def test_params_are_immutable():
    p = init_params(CFG, 0)
    with pytest.raises(ValueError):
        p.flat[0] = 1.0
    with pytest.raises(ValueError):
        FieldNetParams(CFG, np.zeros(3), [0, 0], [1, 1])


def test_coordinate_normalisation():
    p = init_params(CFG, 0, bounds=[(2.0, 4.0), (-1.0, 0.0)])
    np.testing.assert_allclose(normalize_coords(p, [[2.0, -1.0], [4.0, 0.0], [3.0, -0.5]]),
                               [[-1, -1], [1, 1], [0, 0]])


def test_decode_matches_tape_forward(rng):
    p = init_params(CFG, 1)
    pts = rng.uniform(0, 1, (30, 2))
    lat = rng.standard_normal(CFG.latent_dim) * 0.1
    tape = forward(CFG, p.flat, lat, normalize_coords(p, pts))
    np.testing.assert_allclose(decode(pts, lat, p), tape, rtol=1e-12, atol=1e-12)
    lats = rng.standard_normal((3, CFG.latent_dim)) * 0.1
    np.testing.assert_allclose(decode(pts, lats, p), forward(CFG, p.flat, lats, normalize_coords(p, pts)),
                               rtol=1e-12, atol=1e-12)


def test_fast_forward_close(rng):
    p = init_params(FieldNetConfig(), 1)
    eta = rng.uniform(-1, 1, (40, 2))
    lat = rng.standard_normal(64) * 0.1
    np.testing.assert_allclose(forward(p.config, p.flat, lat, eta, fast=True), forward(p.config, p.flat, lat, eta),
                               atol=1e-4)


@given(st.integers(0, 2 ** 31), st.integers(1, 40))
def test_decode_independent_of_companions(seed, k):
    rng = np.random.default_rng(seed)
    p = init_params(CFG, 2)
    pts = rng.uniform(0, 1, (k + 5, 2))
    lat = rng.standard_normal(CFG.latent_dim)
    full = decode(pts, lat, p, chunk=7)
    alone = decode(pts[k:k + 1], lat, p)
    assert np.array_equal(full[k], alone[0])


def test_decode_bit_identical_on_nested_grids():
    p = init_params(FieldNetConfig(), 3)
    lat = np.random.default_rng(0).standard_normal(64)
    coarse, fine = generate_grid(2, (21, 21)), generate_grid(2, (41, 41))
    a = decode(coarse.coords, lat, p)
    b = decode(fine.coords, lat, p).reshape(41, 41)[::2, ::2].reshape(-1, 1)
    assert np.array_equal(a, b)


def test_gradient_through_forward(rng):
    p = init_params(CFG, 4)
    eta = rng.uniform(-1, 1, (6, 2))
    lat = rng.standard_normal(CFG.latent_dim) * 0.1
    f = lambda th, l: ad.sum(forward(CFG, th, l, eta) ** 2)  # noqa: E731
    _, (gt, gl) = ad.grad(f, p.flat, lat)
    h = 1e-6
    for i in rng.choice(p.flat.size, 10, replace=False):
        e = np.zeros(p.flat.size)
        e[i] = h
        fd = (float(ad.primal(f(p.flat + e, lat))) - float(ad.primal(f(p.flat - e, lat)))) / (2 * h)
        assert gt[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    e = np.zeros(CFG.latent_dim)
    e[0] = h
    fd = (float(ad.primal(f(p.flat, lat + e))) - float(ad.primal(f(p.flat, lat - e)))) / (2 * h)
    assert gl[0] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_nodal_field_hard_bc(rng):
    mesh = generate_grid(2, (5, 5))
    p = init_params(CFG, 0)
    spec = dirichlet_from_sets(mesh, [("left", 0, 0.3), ("right", 0, -1.25)])
    u = nodal_field(mesh, LatentCode(rng.standard_normal(8)), p, spec)
    assert np.all(u[mesh.node_sets["left"]] == 0.3)
    assert np.all(u[mesh.node_sets["right"]] == -1.25)


def test_bad_latent_shape():
    p = init_params(CFG, 0)
    with pytest.raises(ValueError):
        decode(np.zeros((2, 2)), np.zeros(3), p)
    with pytest.raises(ValueError):
        LatentCode([np.nan])
