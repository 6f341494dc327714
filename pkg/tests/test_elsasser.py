import numpy as np
import pytest

from mhdlab.grids import build_domain, boundary_fields
from mhdlab.elsasser import (
    FluidParams,
    FrictionSet,
    friction_transform,
    to_elsasser,
    from_elsasser,
    rho_pm,
    divergence,
    curl,
    gradient,
    perp_gradient,
    energy,
    energy_physical,
    apply_matrix,
)


def annulus(n_r=48, n_t=96):
    return build_domain("annulus", r_inner=1.0, r_outer=2.0,
                        sector=(0.0, 1.5 * np.pi), n_r=n_r, n_theta=n_t)


def const_field(dom, vx, vy):
    """Constant Cartesian vector as a grid-component field."""
    v = np.zeros((2,) + dom.shape)
    v[0], v[1] = vx, vy
    return dom.from_cartesian(v)


# ------------------------------------------------------------------- transform

def test_elsasser_zero():
    dom = annulus(16, 32)
    p = FluidParams(1.0, 1.0, 4.0)
    u = np.zeros((2,) + dom.shape)
    st = to_elsasser(u, u, p)
    assert np.all(st.zp == 0.0) and np.all(st.zm == 0.0)


def test_elsasser_hand_value():
    dom = annulus(16, 32)
    p = FluidParams(1.0, 1.0, 4.0)
    u = const_field(dom, 1.0, 0.0)
    B = const_field(dom, 1.0, 0.0)
    st = to_elsasser(u, B, p)
    zp_c = dom.to_cartesian(st.zp)
    zm_c = dom.to_cartesian(st.zm)
    assert np.allclose(zp_c[0], 3.0) and np.allclose(zp_c[1], 0.0)
    assert np.allclose(zm_c[0], -1.0) and np.allclose(zm_c[1], 0.0)


def test_elsasser_round_trip():
    dom = annulus(16, 32)
    p = FluidParams(0.7, 0.3, 2.5)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2,) + dom.shape)
    B = rng.normal(size=(2,) + dom.shape)
    u2, B2 = from_elsasser(to_elsasser(u, B, p), p)
    assert np.max(np.abs(u2 - u)) < 1e-14
    assert np.max(np.abs(B2 - B)) < 1e-14


def test_shape_mismatch_rejected():
    dom = annulus(16, 32)
    p = FluidParams(1.0, 1.0)
    u = np.zeros((2, 16, 32))
    B = np.zeros((2, 16, 30))
    with pytest.raises(ValueError):
        to_elsasser(u, B, p)


def test_lambda_identities():
    p = FluidParams(1.4, 0.6)
    assert np.isclose(p.lam_plus + p.lam_minus, 1.4)
    assert np.isclose(p.lam_plus - p.lam_minus, 0.6)
    with pytest.raises(ValueError):
        FluidParams(1.0, -0.1)


# ------------------------------------------------------------------- friction

def test_friction_transform_zero():
    dom = annulus(8, 16)
    fs = FrictionSet.preset(dom, "zero")
    for A in friction_transform(fs, 2.0):
        assert np.all(A == 0.0)


def test_friction_transform_hand_values():
    dom = annulus(8, 16)
    fs = FrictionSet.build(dom, M1=np.eye(2))
    Mp, Mm, Lp, Lm = friction_transform(fs, 1.0)
    for A in (Mp, Mm, Lp, Lm):
        assert np.allclose(A[0, 0], 0.5) and np.allclose(A[1, 1], 0.5)
        assert np.allclose(A[0, 1], 0.0)


def test_friction_transform_rho_identity():
    dom = annulus(8, 16)
    rho = 0.7
    fs = FrictionSet.preset(dom, "rho_identity", rho=rho)
    Mp, Mm, Lp, Lm = friction_transform(fs, 1.0)
    assert np.allclose((Mp - Mm)[0, 0], rho) and np.allclose((Mp - Mm)[1, 1], rho)
    assert np.allclose((Lp - Lm)[0, 0], rho) and np.allclose((Lp - Lm)[1, 1], rho)


def test_friction_transform_linear_superposition():
    dom = annulus(8, 16)
    rng = np.random.default_rng(1)
    A1, A2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    fa = FrictionSet.build(dom, M1=A1)
    fb = FrictionSet.build(dom, M1=A2)
    fab = FrictionSet.build(dom, M1=A1 + A2)
    for Xa, Xb, Xab in zip(friction_transform(fa, 3.0), friction_transform(fb, 3.0),
                           friction_transform(fab, 3.0)):
        assert np.max(np.abs(Xa + Xb - Xab)) < 1e-13


def test_m2_zero_with_l2_zero_decouples():
    dom = annulus(8, 16)
    rng = np.random.default_rng(2)
    fs = FrictionSet.build(dom, M1=rng.normal(size=(2, 2)), L1=rng.normal(size=(2, 2)))
    Mp, Mm, Lp, Lm = friction_transform(fs, 2.0)
    assert np.max(np.abs(Mp - Mm)) < 1e-14
    assert np.max(np.abs(Lp - Lm)) < 1e-14


# ------------------------------------------------------------------- rho_pm

def test_rho_zero_matrices():
    dom = annulus(16, 32)
    bf = boundary_fields(dom)
    fs = FrictionSet.preset(dom, "zero")
    Mp, Mm, Lp, Lm = friction_transform(fs, 1.0)
    z = np.ones((2,) + dom.shape)
    rp, rm = rho_pm(dom, bf, Mp, Mm, Lp, Lm, z, z)
    assert np.all(rp == 0.0) and np.all(rm == 0.0)


def test_rho_unit_tangent_value():
    dom = annulus(16, 32)
    bf = boundary_fields(dom)
    tau = np.zeros((2,) + dom.shape)
    tau[1] = 1.0  # unit azimuthal field is tangential on the annulus
    half = 0.5 * np.eye(2)
    fs = FrictionSet.build(dom)
    Mp = Mm = Lp = Lm = FrictionSet._expand(dom, half)
    rp, rm = rho_pm(dom, bf, Mp, Mm, Lp, Lm, tau, tau)
    # M z+ + L z- = tau, doubled = 2 tau
    assert np.max(np.abs(rp[1] - 2.0)) < 1e-13
    assert np.max(np.abs(rp[0])) < 1e-13


def test_rho_always_tangential():
    dom = annulus(16, 32)
    bf = boundary_fields(dom)
    fs = FrictionSet.preset(dom, "random_smooth", seed=4)
    Mp, Mm, Lp, Lm = friction_transform(fs, 2.0)
    rng = np.random.default_rng(5)
    zp = rng.normal(size=(2,) + dom.shape)
    zm = rng.normal(size=(2,) + dom.shape)
    rp, rm = rho_pm(dom, bf, Mp, Mm, Lp, Lm, zp, zm)
    assert np.max(np.abs(bf.normal_part(rp))) < 1e-12
    assert np.max(np.abs(bf.normal_part(rm))) < 1e-12


# ------------------------------------------------------------------- operators

def test_rigid_rotation_curl():
    for dom in (annulus(), build_domain("channel", a_ext=-1.0, a=0.0, b=1.0,
                                        b_ext=2.0, height=1.0, n_x=48, n_y=24)):
        X = dom.points_xy()
        v = dom.from_cartesian(np.stack([-X[1], X[0]]))
        w = curl(dom, v)
        interior = np.zeros(dom.shape, bool)
        interior[2:-2, :] = True
        assert np.max(np.abs(w[interior] - 2.0)) < 1e-10


def test_gradient_fields_curl_free():
    # curl(grad f) vanishes on the compatible stencil pair (stronger than h^2)
    for n in (24, 96):
        dom = annulus(n, 2 * n)
        R, TH = dom.mesh()
        f = np.exp(-R) * np.cos(3 * TH)
        w = curl(dom, gradient(dom, f))
        assert np.max(np.abs(w)) < 1e-11


def test_harmonic_perp_gradient():
    # Q = perp-grad(log r) = -e_theta / r: discrete curl and div vanish
    for n in (24, 96):
        dom = annulus(n, 2 * n)
        R, _ = dom.mesh()
        q = np.zeros((2,) + dom.shape)
        q[1] = -1.0 / R
        assert np.max(np.abs(curl(dom, q))) < 1e-12
        assert np.max(np.abs(divergence(dom, q))) < 1e-12


def test_div_perp_grad_identically_zero():
    rng = np.random.default_rng(6)
    for dom in (annulus(24, 48), build_domain("channel", a_ext=-1.0, a=0.0,
                                              b=1.0, b_ext=2.0, height=1.0,
                                              n_x=24, n_y=16)):
        f = rng.normal(size=dom.shape)
        assert np.max(np.abs(divergence(dom, perp_gradient(dom, f)))) < 1e-11
        assert np.max(np.abs(curl(dom, gradient(dom, f)))) < 1e-11


# ------------------------------------------------------------------- energy

def test_energy_zero_state():
    dom = annulus(16, 32)
    p = FluidParams(1.0, 1.0)
    st = to_elsasser(np.zeros((2,) + dom.shape), np.zeros((2,) + dom.shape), p)
    assert energy(dom, st) == 0.0


def test_energy_constant_field_value():
    dom = annulus(32, 64)
    p = FluidParams(1.0, 1.0, 4.0)
    area = dom.integrate(np.ones(dom.shape))
    u = const_field(dom, 1.0, 0.0)
    B = const_field(dom, 1.0, 0.0)
    st = to_elsasser(u, B, p)
    # per unit area: |u|^2 + mu |B|^2 = 5 = ((3)^2 + (-1)^2)/2
    assert abs(energy(dom, st) / area - 5.0) < 1e-12
    assert abs(energy_physical(dom, u, B, p) / area - 5.0) < 1e-12


def test_energy_parseval_random_states():
    dom = annulus(24, 48)
    p = FluidParams(0.9, 0.4, 2.2)
    rng = np.random.default_rng(8)
    for _ in range(5):
        u = rng.normal(size=(2,) + dom.shape)
        B = rng.normal(size=(2,) + dom.shape)
        st = to_elsasser(u, B, p)
        e1 = energy(dom, st)
        e2 = energy_physical(dom, u, B, p)
        assert abs(e1 - e2) <= 1e-12 * e1


def test_energy_even_in_B():
    dom = annulus(16, 32)
    p = FluidParams(1.0, 1.0, 3.0)
    rng = np.random.default_rng(9)
    u = rng.normal(size=(2,) + dom.shape)
    B = rng.normal(size=(2,) + dom.shape)
    assert np.isclose(energy(dom, to_elsasser(u, B, p)),
                      energy(dom, to_elsasser(u, -B, p)))


def test_apply_matrix_identity():
    dom = annulus(12, 24)
    rng = np.random.default_rng(10)
    v = rng.normal(size=(2,) + dom.shape)
    I = FrictionSet._expand(dom, np.eye(2))
    assert np.max(np.abs(apply_matrix(dom, I, v) - v)) < 1e-14
