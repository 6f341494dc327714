"""Return-method trajectories: explicit profiles, flow map, validators.

The reference field starts and ends at rest, is tangential to the extended
boundary, and flushes every particle out of the physical region within the
control horizon.  Two explicit constructions are provided:

* annulus -- z0 = gamma(t) perp_grad(log|x|), a purely azimuthal harmonic
  field; the control force and pressure are assembled from a periodic
  pseudo-potential whose angular derivative is 1 across the physical
  sector, so the force vanishes there.
* channel -- z0 = gamma1(t) d/dx(chi1(x) x) e_x, spatially constant on the
  physical rectangle; its divergence and self-advection are supported in
  the end slabs and become sigma0 and xi0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grids import (
    ExtendedDomain,
    smoothstep5,
    smoothstep5_d,
    plateau_bump,
    plateau_bump_d,
    plateau_bump_int,
)
from .elsasser import divergence, curl, slip_operator, jacobian


# ----------------------------------------------------------------------------
# profile container
# ----------------------------------------------------------------------------

@dataclass
class ReturnProfile:
    """Evaluable return-method quadruple (z0, p0, xi0, sigma0) + flow data."""

    kind: str
    domain: ExtendedDomain
    T: float
    amplitude: float                     # M_E (annulus) or M_1 (channel)
    z0: Callable = None                  # t -> (2, n1, n2) grid components
    p0: Callable = None                  # t -> scalar field
    xi0: Callable = None                 # t -> (2, n1, n2), zero on physical
    sigma0: Callable = None              # t -> scalar field (zero average)
    jac_z0: Callable = None              # t -> (2, 2, n1, n2) grid-frame J
    divergence_free: bool = True
    curl_free: bool = True
    tangential_everywhere: bool = True
    support_gap: float = 0.0             # distance of supp(xi0) from Omega

    # time profile helpers
    gamma: Callable = None               # t -> amplitude
    gamma_int: Callable = None           # t -> integral of gamma over [0, t]

    def velocity_at_points(self, p1, p2, t):
        """Analytic velocity in grid components at grid coordinates."""
        raise NotImplementedError

    def angular_rate(self, r, t):
        """Annulus only: d(theta)/dt of the flow at radius r."""
        raise NotImplementedError


class AnnulusProfile(ReturnProfile):
    def velocity_at_points(self, p1, p2, t):
        g = float(self.gamma(t))
        return np.zeros_like(p1), -g / np.asarray(p1)

    def angular_rate(self, r, t):
        return -float(self.gamma(t)) / np.asarray(r) ** 2

    def angle_advance(self, r, t0, t1):
        """Exact angular displacement of the flow between t0 and t1."""
        dG = float(self.gamma_int(t1)) - float(self.gamma_int(t0))
        return -dG / np.asarray(r) ** 2


class ChannelProfile(ReturnProfile):
    def velocity_at_points(self, p1, p2, t):
        g = float(self.gamma(t))
        return g * self._gfun(np.asarray(p1)), np.zeros_like(p2)

    def _gfun(self, x):
        raise NotImplementedError


# ----------------------------------------------------------------------------
# annulus construction
# ----------------------------------------------------------------------------

def _sector_potential_derivative(domain, gap_frac=0.2):
    """Periodic A'(theta): equal to 1 on the closed physical sector plus a
    margin, dipping inside the control sector so the circle average is zero.
    Returns (A'(theta) samples, the margin actually used)."""
    th_a, th_b = domain.sector
    width = np.mod(th_b - th_a, 2.0 * np.pi)
    ctrl = 2.0 * np.pi - width
    margin = gap_frac * ctrl
    th = domain.c2
    # bump supported strictly inside the control sector
    s = np.mod(th - th_b - margin, 2.0 * np.pi) / (ctrl - 2.0 * margin)
    bump = np.where((s >= 0.0) & (s <= 1.0),
                    smoothstep5(2.0 * np.clip(s, 0, 1)) * smoothstep5(2.0 - 2.0 * np.clip(s, 0, 1)),
                    0.0)
    # normalize so that int A' dtheta = 0 with A' = 1 - c*bump
    c = 2.0 * np.pi / (np.sum(bump) * domain.h2)
    return 1.0 - c * bump, margin


def annulus_profile(domain, M_E, T):
    """Return trajectory z0 = gamma(t) perp_grad(log|x|) on the annulus."""
    if not domain.is_annulus:
        raise ValueError("annulus_profile requires an annulus domain")
    prof = AnnulusProfile(kind="annulus", domain=domain, T=float(T), amplitude=float(M_E))
    r = domain.c1[:, None]
    Aprime, margin = _sector_potential_derivative(domain)
    prof.support_gap = margin * domain.r_inner

    gamma = lambda t: plateau_bump(t, T, M_E)
    dgamma = lambda t: plateau_bump_d(t, T, M_E)
    prof.gamma = gamma
    prof.gamma_int = lambda t: plateau_bump_int(t, T, M_E)

    n1, n2 = domain.shape

    def z0(t):
        v = np.zeros((2, n1, n2))
        v[1] = -float(gamma(np.clip(t, 0.0, T))) / r if 0.0 <= t <= T else 0.0
        return v

    def p0(t):
        if not (0.0 <= t <= T):
            return np.zeros((n1, n2))
        # -d_t(psi*) - |z0|^2/2 with psi* the sector pseudo-potential
        A = np.cumsum(Aprime) * domain.h2
        return float(dgamma(t)) * A[None, :] * np.ones((n1, 1)) \
            - 0.5 * float(gamma(t)) ** 2 / r ** 2

    def xi0(t):
        v = np.zeros((2, n1, n2))
        if 0.0 <= t <= T:
            v[1] = float(dgamma(t)) * (Aprime[None, :] - 1.0) / r
        return v

    def sigma0(t):
        return np.zeros((n1, n2))

    def jac_z0(t):
        # grid-frame Jacobian of beta(r, t) e_theta with beta = -gamma/r:
        # J[0,1] = -beta/r, J[1,0] = d_r beta, others zero
        g = float(gamma(np.clip(t, 0.0, T))) if 0.0 <= t <= T else 0.0
        J = np.zeros((2, 2, n1, n2))
        beta = -g / r
        J[0, 1] = (-beta / r) * np.ones((1, n2))
        J[1, 0] = (g / r ** 2) * np.ones((1, n2))
        return J

    prof.z0, prof.p0, prof.xi0, prof.sigma0, prof.jac_z0 = z0, p0, xi0, sigma0, jac_z0
    _verify_flags(prof)
    return prof


# ----------------------------------------------------------------------------
# channel construction
# ----------------------------------------------------------------------------

def channel_profile(domain, M1, T):
    """z0 = gamma1(t) d/dx(chi1 x) e_x, constant on the physical rectangle."""
    if domain.is_annulus:
        raise ValueError("channel_profile requires a channel domain")
    prof = ChannelProfile(kind="channel", domain=domain, T=float(T), amplitude=float(M1))
    a_ext, a, b, b_ext = domain.a_ext, domain.a, domain.b, domain.b_ext
    ml = 0.5 * (a - a_ext)
    mr = 0.5 * (b_ext - b)
    prof.support_gap = min(ml, mr)

    def chi1(x):
        up = smoothstep5((x - a_ext) / ml - 0.0)
        dn = smoothstep5((b_ext - x) / mr - 0.0)
        return up * dn

    def chi1_d(x):
        up = smoothstep5((x - a_ext) / ml)
        dn = smoothstep5((b_ext - x) / mr)
        dup = smoothstep5_d((x - a_ext) / ml) / ml
        ddn = -smoothstep5_d((b_ext - x) / mr) / mr
        return dup * dn + up * ddn

    gfun = lambda x: chi1(x) + x * chi1_d(x)
    prof._gfun = gfun
    gamma = lambda t: plateau_bump(t, T, M1)
    dgamma = lambda t: plateau_bump_d(t, T, M1)
    prof.gamma = gamma
    prof.gamma_int = lambda t: plateau_bump_int(t, T, M1)

    x = domain.c1[:, None]
    n1, n2 = domain.shape
    g = gfun(domain.c1)[:, None]
    gd = np.gradient(gfun(domain.c1), domain.c1)[:, None]  # used only off Omega

    def z0(t):
        v = np.zeros((2, n1, n2))
        if 0.0 <= t <= T:
            v[0] = float(gamma(t)) * g
        return v

    def p0(t):
        if not (0.0 <= t <= T):
            return np.zeros((n1, n2))
        return -float(dgamma(t)) * (chi1(domain.c1) * domain.c1)[:, None] * np.ones((1, n2))

    def xi0(t):
        v = np.zeros((2, n1, n2))
        if 0.0 <= t <= T:
            v[0] = float(gamma(t)) ** 2 * g * gd
        return v

    def sigma0(t):
        if not (0.0 <= t <= T):
            return np.zeros((n1, n2))
        s = float(gamma(t)) * gd * np.ones((1, n2))
        return s - 0.0

    def jac_z0(t):
        J = np.zeros((2, 2, n1, n2))
        if 0.0 <= t <= T:
            J[0, 0] = float(gamma(t)) * gd
        return J

    prof.z0, prof.p0, prof.xi0, prof.sigma0, prof.jac_z0 = z0, p0, xi0, sigma0, jac_z0
    prof.divergence_free = False   # holds on Omega, fails in the end slabs
    _verify_flags(prof)
    return prof


def _verify_flags(prof, n_t=5):
    """Numerically verify the structural flags at registration time."""
    dom = prof.domain
    ts = np.linspace(0.1 * prof.T, 0.9 * prof.T, n_t)
    div_max = curl_max = tang_max = 0.0
    xi_leak = 0.0
    scale = 1e-300
    from .grids import boundary_fields
    bf = boundary_fields(dom)
    for t in ts:
        v = prof.z0(t)
        scale = max(scale, float(np.max(np.hypot(*v))))
        div_max = max(div_max, float(np.max(np.abs(divergence(dom, v)))))
        curl_max = max(curl_max, float(np.max(np.abs(curl(dom, v)))))
        tang_max = max(tang_max, float(np.max(np.abs(bf.normal_part(v)))))
        xi = prof.xi0(t)
        if np.max(np.abs(xi)) > 0:
            xi_leak = max(xi_leak, float(np.max(np.abs(xi[:, dom.closed_mask]))))
        sg = prof.sigma0(t)
        if np.max(np.abs(sg)) > 0:
            if float(np.max(np.abs(sg[dom.closed_mask]))) > 1e-12 * np.max(np.abs(sg)):
                raise ValueError("sigma0 support touches the physical region")
    tol = 50.0 * max(dom.h1, dom.h2) ** 2 * max(scale, 1.0)
    prof.divergence_free = div_max <= tol
    prof.curl_free = curl_max <= tol
    prof.tangential_everywhere = tang_max <= 1e-10 * max(scale, 1.0)
    if xi_leak > 1e-12 * max(scale, 1.0):
        raise ValueError(f"xi0 leaks into the physical closure: {xi_leak:.3e}")
    # endpoints at rest
    for t in (0.0, prof.T):
        if np.max(np.abs(prof.z0(t))) > 1e-12 * max(scale, 1.0):
            raise ValueError("z0 must vanish at t = 0 and t = T")


# ----------------------------------------------------------------------------
# flow map
# ----------------------------------------------------------------------------

@dataclass
class FlowMap:
    profile: ReturnProfile
    dt: float = 1e-3
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, p1, p2, s, t):
        """Integrate grid-coordinate trajectories from time s to time t."""
        p1 = np.array(p1, dtype=float, copy=True)
        p2 = np.array(p2, dtype=float, copy=True)
        if t == s:
            return p1, p2
        prof = self.profile
        dom = prof.domain
        n = max(1, int(np.ceil(abs(t - s) / self.dt)))
        h = (t - s) / n

        def rate(a1, a2, tv):
            v1, v2 = prof.velocity_at_points(a1, a2, tv)
            if dom.is_annulus:
                return v1, v2 / a1
            return v1, v2

        tv = s
        for _ in range(n):
            k1 = rate(p1, p2, tv)
            k2 = rate(p1 + 0.5 * h * k1[0], p2 + 0.5 * h * k1[1], tv + 0.5 * h)
            k3 = rate(p1 + 0.5 * h * k2[0], p2 + 0.5 * h * k2[1], tv + 0.5 * h)
            k4 = rate(p1 + h * k3[0], p2 + h * k3[1], tv + h)
            p1 = p1 + h * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
            p2 = p2 + h * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
            tv += h
        return p1, p2


def flow_map(profile, x, s, t, dt=1e-3):
    """Trajectory of a single point given in grid coordinates (r, theta) or
    (x, y); returns the image point."""
    fm = FlowMap(profile, dt=dt)
    p1, p2 = fm(np.atleast_1d(x[0]), np.atleast_1d(x[1]), s, t)
    return np.array([p1[0], p2[0]])


def flushing_check(profile, n_samples=64, dt=2e-3, n_t=400, seed=0):
    """First exit time from the closed physical region per sample.

    Returns a list of (sample id, start point, exit time or None) and raises
    no error; callers decide how to treat stuck samples.
    """
    dom = profile.domain
    rng = np.random.default_rng(seed)
    if dom.is_annulus:
        th_a, th_b = dom.sector
        width = np.mod(th_b - th_a, 2.0 * np.pi)
        p1 = rng.uniform(dom.r_inner + 1e-3, dom.r_outer - 1e-3, n_samples)
        p2 = np.mod(th_a + rng.uniform(0.0, width, n_samples), 2.0 * np.pi)

        def outside(a1, a2):
            ang = np.mod(a2 - th_a, 2.0 * np.pi)
            return (ang > width + 1e-9) | (ang < -1e-9)
    else:
        p1 = rng.uniform(dom.a + 1e-3, dom.b - 1e-3, n_samples)
        p2 = rng.uniform(1e-3, dom.height - 1e-3, n_samples)

        def outside(a1, a2):
            return (a1 > dom.b + 1e-9) | (a1 < dom.a - 1e-9)

    fm = FlowMap(profile, dt=dt)
    ts = np.linspace(0.0, profile.T, n_t + 1)
    exit_time = np.full(n_samples, np.nan)
    a1, a2 = p1.copy(), p2.copy()
    for i in range(1, len(ts)):
        a1, a2 = fm(a1, a2, ts[i - 1], ts[i])
        newly = outside(a1, a2) & np.isnan(exit_time)
        exit_time[newly] = ts[i]
    return [
        {"sample": i, "start": (float(p1[i]), float(p2[i])),
         "exit_time": (None if np.isnan(exit_time[i]) else float(exit_time[i]))}
        for i in range(n_samples)
    ]


def full_revolution_amplitude(domain, T, margin=1.25):
    """Sufficient amplitude M_E: the slowest particle (at r_outer) completes
    a full revolution during the plateau [T/8, 7T/8]."""
    return margin * 2.0 * np.pi * domain.r_outer ** 2 / (0.75 * T)


# ----------------------------------------------------------------------------
# structural condition report
# ----------------------------------------------------------------------------

def profile_conditions(profile, friction_pm, boundary, n_t=4):
    """Residuals of the conditions the moment-control construction needs:
    div z0 = 0, curl z0 = 0, z0 . n = 0, div(N+(z0,z0) - N-(z0,z0)) = 0.

    friction_pm = (Mp, Mm, Lp, Lm).  Residuals are reported on the closed
    physical region and globally; `passed` uses an O(h^2)-scaled threshold.
    """
    dom = profile.domain
    Mp, Mm, Lp, Lm = friction_pm
    ts = np.linspace(0.15 * profile.T, 0.85 * profile.T, n_t)
    out = {"div": 0.0, "curl": 0.0, "tangency": 0.0, "div_slip_diff": 0.0,
           "div_omega": 0.0, "scale": 1e-300}
    for t in ts:
        v = profile.z0(t)
        J = profile.jac_z0(t) if profile.jac_z0 is not None else jacobian(dom, v)
        out["scale"] = max(out["scale"], float(np.max(np.hypot(*v))))
        out["div"] = max(out["div"], float(np.max(np.abs(divergence(dom, v)))))
        out["curl"] = max(out["curl"], float(np.max(np.abs(curl(dom, v)))))
        out["tangency"] = max(out["tangency"], float(np.max(np.abs(boundary.normal_part(v)))))
        Np = slip_operator(dom, boundary, Mp, Lp, v, v, jac_hp=J)
        Nm = slip_operator(dom, boundary, Mm, Lm, v, v, jac_hp=J)
        d = divergence(dom, Np - Nm)
        out["div_slip_diff"] = max(out["div_slip_diff"], float(np.max(np.abs(d))))
        out["div_omega"] = max(out["div_omega"],
                               float(np.max(np.abs(divergence(dom, v)[dom.physical_mask]))))
    h = max(dom.h1, dom.h2)
    s = max(out["scale"], 1.0)
    out["passed"] = (out["div"] <= 60 * h ** 2 * s and out["curl"] <= 60 * h ** 2 * s
                     and out["tangency"] <= 1e-10 * s
                     and out["div_slip_diff"] <= 200 * h ** 2 * s)
    return out
