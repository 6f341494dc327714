import numpy as np
import pytest

from mhdlab.grids import build_domain, boundary_fields, plateau_bump
from mhdlab.elsasser import FrictionSet, friction_transform, divergence, curl
from mhdlab.return_method import (
    annulus_profile,
    channel_profile,
    flow_map,
    FlowMap,
    flushing_check,
    full_revolution_amplitude,
    profile_conditions,
)


def annulus(n_r=48, n_t=96):
    return build_domain("annulus", r_inner=1.0, r_outer=2.0,
                        sector=(0.0, 1.5 * np.pi), n_r=n_r, n_theta=n_t)


def channel(n_x=60, n_y=24):
    return build_domain("channel", a_ext=-1.0, a=0.0, b=1.0, b_ext=2.0,
                        height=1.0, n_x=n_x, n_y=n_y)


# ------------------------------------------------------------------ profiles

def test_annulus_profile_magnitude():
    dom = annulus()
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    R, _ = dom.mesh()
    t = 0.5
    v = prof.z0(t)
    g = prof.gamma(t)
    assert np.max(np.abs(np.hypot(*v) - g / R)) < 1e-12 * g


def test_annulus_profile_tangential_and_harmonic():
    dom = annulus()
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    v = prof.z0(0.4)
    assert np.max(np.abs(v[0])) == 0.0          # purely azimuthal
    assert np.max(np.abs(divergence(dom, v))) < 1e-11
    assert np.max(np.abs(curl(dom, v))) < 1e-11
    assert prof.divergence_free and prof.curl_free and prof.tangential_everywhere


def test_annulus_xi0_supported_off_sector():
    dom = annulus()
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    for t in (0.05, 0.5, 0.93):
        xi = prof.xi0(t)
        assert np.max(np.abs(xi[:, dom.closed_mask])) == 0.0
    assert prof.support_gap > 0.0


def test_wrong_domain_rejected():
    with pytest.raises(ValueError):
        annulus_profile(channel(), M_E=1.0, T=1.0)
    with pytest.raises(ValueError):
        channel_profile(annulus(), M1=1.0, T=1.0)


def test_channel_profile_constant_inside():
    dom = channel()
    prof = channel_profile(dom, M1=4.0, T=1.0)
    t = 0.5
    v = prof.z0(t)
    g = prof.gamma(t)
    inside = dom.physical_mask
    assert np.max(np.abs(v[0][inside] - g)) < 1e-12 * g
    assert np.max(np.abs(v[1])) == 0.0
    # sigma0 and xi0 live in the end slabs only (round-off tails allowed at
    # the exact seam nodes where the quintic ramp closes)
    assert np.max(np.abs(prof.sigma0(t)[dom.closed_mask])) < 1e-12 * g
    assert np.max(np.abs(prof.xi0(t)[:, dom.closed_mask])) < 1e-12 * g ** 2


def test_gamma_bump_properties():
    T, M = 2.0, 7.0
    ts = np.linspace(0, T, 400)
    g = plateau_bump(ts, T, M)
    assert g[0] == 0.0 and g[-1] == 0.0
    plateau = (ts >= T / 8) & (ts <= 7 * T / 8)
    assert np.all(g[plateau] >= M - 1e-12)
    assert np.max(g) <= M + 1e-12
    # symmetry about T/2 (needed by the forward/backward cascade composition)
    assert np.max(np.abs(g - g[::-1])) < 1e-12


# ------------------------------------------------------------------ flow map

def test_flow_map_identity_at_equal_times():
    dom = annulus()
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    x = np.array([1.3, 0.7])
    y = flow_map(prof, x, 0.4, 0.4)
    assert np.all(y == x)


def test_flow_map_circular_motion_oracle():
    dom = annulus()
    T = 1.0
    prof = annulus_profile(dom, M_E=5.0, T=T)
    # on the plateau gamma == M_E: angular advance = -M_E dt / r^2, radius fixed
    r0, th0 = 1.5, 0.3
    t0, t1 = 0.4, 0.6
    fm = FlowMap(prof, dt=1e-3)
    p1, p2 = fm(np.array([r0]), np.array([th0]), t0, t1)
    assert abs(p1[0] - r0) < 1e-8
    assert abs(p2[0] - (th0 - 5.0 * (t1 - t0) / r0 ** 2)) < 1e-8


def test_flow_map_radius_preserved_full_horizon():
    dom = annulus()
    prof = annulus_profile(dom, M_E=full_revolution_amplitude(dom, 1.0), T=1.0)
    fm = FlowMap(prof, dt=1e-3)
    r0 = np.array([1.1, 1.5, 1.9])
    th0 = np.array([0.0, 2.0, 4.0])
    p1, _p2 = fm(r0, th0, 0.0, 1.0)
    assert np.max(np.abs(p1 - r0)) < 1e-8


def test_flushing_all_samples_exit():
    dom = annulus()
    T = 1.0
    M_E = full_revolution_amplitude(dom, T)
    # full-revolution criterion: gamma_min * T_plateau / r2^2 >= 2 pi
    assert M_E * 0.75 * T / dom.r_outer ** 2 >= 2.0 * np.pi
    prof = annulus_profile(dom, M_E=M_E, T=T)
    rep = flushing_check(prof, n_samples=40, dt=2e-3)
    assert all(r["exit_time"] is not None for r in rep)


def test_flushing_channel():
    dom = channel()
    prof = channel_profile(dom, M1=3.0, T=1.0)
    rep = flushing_check(prof, n_samples=30, dt=2e-3)
    assert all(r["exit_time"] is not None for r in rep)


# ------------------------------------------------------------------ conditions

def test_profile_conditions_annulus_rho_identity():
    dom = annulus()
    bf = boundary_fields(dom)
    fs = FrictionSet.preset(dom, "theorem_1b", rho=0.5, seed=2)
    pm = friction_transform(fs, 1.0)
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    rep = profile_conditions(prof, pm, bf)
    assert rep["passed"], rep


def test_profile_conditions_resolution_refinement():
    # the annulus profile hits the compatible stencils exactly, so the
    # residuals sit at round-off on every grid (stronger than O(h^2) decay)
    for n in (24, 96):
        dom = annulus(n, 2 * n)
        bf = boundary_fields(dom)
        fs = FrictionSet.preset(dom, "theorem_1b", rho=0.5, seed=2)
        pm = friction_transform(fs, 1.0)
        prof = annulus_profile(dom, M_E=5.0, T=1.0)
        rep = profile_conditions(prof, pm, bf)
        for key in ("div", "curl", "tangency", "div_slip_diff"):
            assert rep[key] < 1e-12 * rep["scale"], (n, key, rep)


def test_profile_conditions_channel_divergence():
    dom = channel()
    bf = boundary_fields(dom)
    fs = FrictionSet.preset(dom, "zero")
    pm = friction_transform(fs, 1.0)
    prof = channel_profile(dom, M1=3.0, T=1.0)
    rep = profile_conditions(prof, pm, bf)
    # divergence vanishes on the physical region but not in the slabs
    assert rep["div_omega"] < 1e-10 * rep["scale"]
    assert rep["div"] > 1e-3
    assert not prof.divergence_free


def test_profile_conditions_injected_fault():
    dom = annulus()
    bf = boundary_fields(dom)
    fs = FrictionSet.preset(dom, "zero")
    pm = friction_transform(fs, 1.0)
    prof = annulus_profile(dom, M_E=5.0, T=1.0)
    base_z0 = prof.z0

    def bad_z0(t):
        v = base_z0(t)
        v[0] = v[0] + 0.05 * np.max(np.abs(v))  # radial leak
        return v

    prof.z0 = bad_z0
    rep = profile_conditions(prof, pm, bf)
    assert rep["tangency"] > 1e-3
    assert not rep["passed"]
