"""Boundary-layer profiles in the fast variable, correctors, weighted norms.

The layer profiles v+- live on (strip nodes) x (graded fast grid).  The
coupled equations are advanced in the diagonal combinations S = v+ + v-
(diffusivity nu1) and W = v+ - v- (nu2): Crank-Nicolson in z with the
Neumann shear data at z = 0 and homogeneous Dirichlet at the far end,
exact per-ring transport of the tangential components along the return
flow (annulus) or semi-Lagrangian transport with the stretching term
(channel), followed by the tangential projection.

On the annulus strip the tangential projection reduces the fields to their
azimuthal components, which the transport advects exactly; the diagonal
scheme therefore propagates exact zeros (no magnetic layer when the shear
data of the two channels coincide).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grids import ExtendedDomain, BoundaryFields, CutoffChi, lagrange4_weights
from .elsasser import FluidParams, slip_operator, divergence
from .solver import poisson_neumann, solve_tridiag, tridiag_matvec


# ----------------------------------------------------------------------------
# fast grid
# ----------------------------------------------------------------------------

@dataclass
class FastGrid:
    """Graded nodes on [0, z_max] resolving the wall layer and the tails."""

    z: np.ndarray
    w: np.ndarray            # cell quadrature weights (trapezoid)
    z_max: float

    @classmethod
    def build(cls, z_max=40.0, n=140, ratio=1.05):
        if z_max < 30.0:
            raise ValueError("z_max must be at least 30")
        dz0 = z_max * (ratio - 1.0) / (ratio ** (n - 1) - 1.0)
        steps = dz0 * ratio ** np.arange(n - 1)
        z = np.concatenate([[0.0], np.cumsum(steps)])
        z[-1] = z_max
        w = np.zeros(n)
        w[:-1] += 0.5 * np.diff(z)
        w[1:] += 0.5 * np.diff(z)
        return cls(z=z, w=w, z_max=z_max)

    @property
    def n(self):
        return self.z.size

    def quad(self, f, axis=-1):
        return np.tensordot(f, self.w, axes=([axis], [0]))

    def moments_even(self, f, k):
        """integral z^k f dz over [0, inf) by quadrature (half line)."""
        return np.tensordot(f, self.w * self.z ** k, axes=([-1], [0]))

    def interp(self, f, z_vals):
        """Cubic (4-point Lagrange) interpolation of f(..., z) at z_vals;
        values beyond z_max evaluate to 0."""
        z_vals = np.asarray(z_vals)
        idx = np.searchsorted(self.z, z_vals) - 1
        idx = np.clip(idx, 1, self.n - 3)
        out = np.zeros(f.shape[:-1] + z_vals.shape)
        # nonuniform 4-point Lagrange
        zs = np.stack([self.z[idx - 1], self.z[idx], self.z[idx + 1], self.z[idx + 2]])
        vals = [f[..., idx - 1], f[..., idx], f[..., idx + 1], f[..., idx + 2]]
        for a in range(4):
            L = np.ones_like(z_vals, dtype=float)
            for bq in range(4):
                if bq != a:
                    L = L * (z_vals - zs[bq]) / (zs[a] - zs[bq])
            out = out + vals[a] * L
        return np.where(z_vals[(None,) * (f.ndim - 1)] <= self.z_max, out, 0.0)

    def d_z(self, f):
        """Second-order first derivative in z (one-sided at the ends)."""
        z = self.z
        df = np.empty_like(f)
        dz_f = z[2:] - z[1:-1]
        dz_b = z[1:-1] - z[:-2]
        A = -dz_f / (dz_b * (dz_b + dz_f))
        B = (dz_f - dz_b) / (dz_b * dz_f)
        C = dz_b / (dz_f * (dz_b + dz_f))
        df[..., 1:-1] = A * f[..., :-2] + B * f[..., 1:-1] + C * f[..., 2:]
        h0, h1 = z[1] - z[0], z[2] - z[1]
        df[..., 0] = (-(2 * h0 + h1) / (h0 * (h0 + h1)) * f[..., 0]
                      + (h0 + h1) / (h0 * h1) * f[..., 1]
                      - h0 / (h1 * (h0 + h1)) * f[..., 2])
        hm, hm1 = z[-1] - z[-2], z[-2] - z[-3]
        df[..., -1] = ((2 * hm + hm1) / (hm * (hm + hm1)) * f[..., -1]
                       - (hm + hm1) / (hm * hm1) * f[..., -2]
                       + hm / (hm1 * (hm + hm1)) * f[..., -3])
        return df

    def cumint_from_top(self, f):
        """-integral_z^inf f ds by downward trapezoid accumulation."""
        df = 0.5 * (f[..., 1:] + f[..., :-1]) * np.diff(self.z)
        out = np.zeros_like(f)
        out[..., :-1] = -np.cumsum(df[..., ::-1], axis=-1)[..., ::-1]
        return out


# ----------------------------------------------------------------------------
# strips
# ----------------------------------------------------------------------------

@dataclass
class Strip:
    """x-support of the boundary layer: ring bands (annulus) or full grid."""

    domain: ExtendedDomain
    rings: np.ndarray                 # ring indices (annulus) or all rows
    full: bool

    @classmethod
    def build(cls, domain, boundary, width=None):
        d = boundary.d if width is None else width
        if domain.is_annulus:
            phi_r = boundary.phi[:, 0]
            rings = np.where(phi_r < d)[0]
            return cls(domain=domain, rings=rings, full=False)
        return cls(domain=domain, rings=np.arange(domain.n1), full=True)

    def take(self, f):
        """Restrict a full-grid field (..., n1, n2) to the strip."""
        return f[..., self.rings, :]

    def embed(self, f, fill=0.0):
        """Embed a strip field (..., ns, n2) into the full grid."""
        shape = f.shape[:-2] + self.domain.shape
        out = np.full(shape, fill)
        out[..., self.rings, :] = f
        return out


# ----------------------------------------------------------------------------
# coefficients
# ----------------------------------------------------------------------------

@dataclass
class BLCoefficients:
    strip: Strip
    f_stretch: np.ndarray = None      # callable cache: f(x) on the strip
    g_plus: Callable = None           # t -> (2, ns, n2) tangential shear data
    g_minus: Callable = None
    profile: object = None


def coefficients(profile, chi, friction_pm, boundary, strip=None):
    """Stretching coefficient and Neumann shear data for the layer.

    g+-(x, t) = 2 chi(x) N+-(z0, z0)(x, t); the stretching coefficient
    f = -(z0 . n)/phi with the boundary-limit fallback -d_n(z0 . n).
    """
    dom = profile.domain
    if strip is None:
        from .grids import boundary_fields as _bf
        strip = Strip.build(dom, boundary)
    Mp, Mm, Lp, Lm = friction_pm

    def g_factory(M, L):
        def g(t):
            v = profile.z0(t)
            J = profile.jac_z0(t)
            N = slip_operator(dom, boundary, M, L, v, v, jac_hp=J)
            return strip.take(2.0 * chi.chi[None] * N)
        return g

    co = BLCoefficients(strip=strip, profile=profile)
    co.g_plus = g_factory(Mp, Lp)
    co.g_minus = g_factory(Mm, Lm)

    if profile.kind == "annulus":
        co.f_stretch = lambda t: np.zeros((strip.rings.size, dom.n2))
    else:
        phi = boundary.phi
        n1, n2 = dom.shape

        def f_stretch(t):
            v = profile.z0(t)
            zn = v[0] * boundary.normal[0] + v[1] * boundary.normal[1]
            safe = phi > 2.0 * max(dom.h1, dom.h2)
            out = np.zeros_like(phi)
            out[safe] = -zn[safe] / phi[safe]
            # boundary limit: -d_n (z0 . n) via one-sided normal derivative
            from .elsasser import gradient
            g = gradient(dom, zn)
            dn = g[0] * boundary.nhat[0] + g[1] * boundary.nhat[1]
            out[~safe] = -dn[~safe]
            return strip.take(out)

        co.f_stretch = f_stretch
    return co


# ----------------------------------------------------------------------------
# the layer fields and their stepping
# ----------------------------------------------------------------------------

@dataclass
class BLFields:
    """v+- on (strip x) x (theta) x (fast grid), plus stepping machinery."""

    domain: ExtendedDomain
    boundary: BoundaryFields
    strip: Strip
    fast: FastGrid
    params: FluidParams
    v_plus: np.ndarray = None          # (2, ns, n2, nz) grid components
    v_minus: np.ndarray = None
    t: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, domain, boundary, params, fast=None, strip=None):
        fast = fast or FastGrid.build()
        strip = strip or Strip.build(domain, boundary)
        ns = strip.rings.size
        shape = (2, ns, domain.n2, fast.n)
        return cls(domain=domain, boundary=boundary, strip=strip, fast=fast,
                   params=params, v_plus=np.zeros(shape), v_minus=np.zeros(shape))

    # -- z-diffusion ---------------------------------------------------------
    def _cn_system(self, a):
        key = ("cn", a)
        if key not in self._cache:
            z = self.fast.z
            n = z.size
            hf = np.diff(z)
            sub = np.zeros(n)
            dia = np.ones(n)
            sup = np.zeros(n)
            hbar = 0.5 * (hf[1:] + hf[:-1])
            sub[1:-1] = -a / (hf[:-1] * hbar)
            sup[1:-1] = -a / (hf[1:] * hbar)
            dia[1:-1] = 1.0 + a * (1.0 / hf[:-1] + 1.0 / hf[1:]) / hbar
            # z = 0: flux-form row with the Neumann datum as the bottom flux
            dia[0] = 1.0 + a / (hf[0] * 0.5 * hf[0])
            sup[0] = -a / (hf[0] * 0.5 * hf[0])
            # far end: homogeneous Dirichlet
            dia[-1] = 1.0
            sub[-1] = 0.0
            self._cache[key] = (sub, dia, sup)
        return self._cache[key]

    def _apply_explicit(self, v, a, g_bottom):
        """(I + a D2) v with the Neumann flux folded into the z = 0 row."""
        sub, dia, sup = self._cn_system(a)
        expl_sub = np.where(np.arange(len(dia)) > 0, -sub, 0.0)
        out = tridiag_matvec(-sub, 2.0 - dia, -sup, v)
        # boundary rows: z=0 handled below; far end keeps the value
        out[..., -1] = v[..., -1]
        hf0 = self.fast.z[1] - self.fast.z[0]
        out[..., 0] = out[..., 0] - a * g_bottom / (0.5 * hf0)
        return out

    def _diffuse(self, v, a, g_old, g_new, mu_mid=None, dt=None):
        """Crank-Nicolson z-diffusion with Neumann data g at z = 0."""
        sub, dia, sup = self._cn_system(a)
        rhs = self._apply_explicit(v, a, g_old)
        if mu_mid is not None:
            rhs = rhs + dt * mu_mid
            rhs[..., -1] = v[..., -1]
        hf0 = self.fast.z[1] - self.fast.z[0]
        rhs[..., 0] = rhs[..., 0] - a * g_new / (0.5 * hf0)
        shape = v.shape
        return solve_tridiag(np.broadcast_to(sub, shape), np.broadcast_to(dia, shape),
                             np.broadcast_to(sup, shape), rhs)

    # -- transport -----------------------------------------------------------
    def _transport(self, profile, v, t0, dt, sign):
        """Exact per-ring transport (annulus) of the tangential component;
        channel path: semi-Lagrangian in x with stretching and f z d_z."""
        dom = self.domain
        if profile.kind == "annulus":
            rr = dom.c1[self.strip.rings]
            dTh = float(profile.gamma_int(t0 + dt)) - float(profile.gamma_int(t0))
            delta = -dTh / rr ** 2
            out = np.empty_like(v)
            for c in range(2):
                # shift theta axis (axis=-2) for the whole z stack
                f = np.moveaxis(v[c], -1, 0)        # (nz, ns, n2)
                k = np.fft.rfftfreq(dom.n2, d=1.0 / dom.n2)
                phase = np.exp(-1j * k[None, :] * delta[:, None])
                F = np.fft.rfft(f, axis=-1)
                out[c] = np.moveaxis(np.fft.irfft(F * phase[None], n=dom.n2, axis=-1), 0, -1)
            # tangential projection keeps the radial component zero
            out[0] = 0.0
            return out
        raise NotImplementedError("generic strip transport is channel-specific")

    def _transport_channel(self, profile, coeffs, v, t0, dt, sign):
        dom = self.domain
        tm = t0 + 0.5 * dt
        g = profile.gamma(tm)
        vel = g * profile._gfun(dom.c1)
        # feet for 1D advection in x
        x0 = dom.c1 - dt * vel
        idx = np.clip((x0 - dom.c1[0]) / dom.h1, 1, dom.n1 - 3)
        i0 = np.floor(idx).astype(int)
        s = idx - i0
        wts = lagrange4_weights(s)
        out = np.zeros_like(v)
        for a_off, wa in zip((-1, 0, 1, 2), wts):
            ii = np.clip(i0 + a_off, 0, dom.n1 - 1)
            out += wa[None, :, None, None] * v[:, ii, :, :]
        # stretching: dv/dt = -sign * J v with J = gamma g'(x) e_x e_x
        J00 = g * np.gradient(profile._gfun(dom.c1), dom.c1)
        fac = (1.0 - 0.5 * dt * sign * J00) / (1.0 + 0.5 * dt * sign * J00)
        out[0] *= fac[None, :, None][0]
        # f z d_z term, explicit upwind-free central
        fzn = coeffs.f_stretch(tm)
        zdz = self.fast.z[None, None, None, :] * self.fast.d_z(out)
        out = out - dt * fzn[None, :, :, None] * zdz
        amp = np.max(np.abs(dt * fzn)) * np.max(self.fast.z[1:] / np.diff(self.fast.z))
        if amp > 0.95:
            raise FloatingPointError("explicit stretching term unstable: reduce dt")
        return self.boundary_project(out)

    def boundary_project(self, v):
        nh = self.strip.take(self.boundary.nhat)
        vn = v[0] * nh[0][..., None] + v[1] * nh[1][..., None]
        return v - vn[None] * nh[..., None]

    # -- one step --------------------------------------------------------------
    def advance(self, coeffs, dt, mu_eval=None):
        """One time step; mu_eval(t) -> (mu_plus, mu_minus) on the strip."""
        p = self.params
        t0 = self.t
        prof = coeffs.profile
        S = self.v_plus + self.v_minus
        W = self.v_plus - self.v_minus
        if self.domain.is_annulus:
            S = self._transport(prof, S, t0, dt, +1)
            W = self._transport(prof, W, t0, dt, -1)
        else:
            S = self._transport_channel(prof, coeffs, S, t0, dt, +1)
            W = self._transport_channel(prof, coeffs, W, t0, dt, -1)

        gp0, gm0 = coeffs.g_plus(t0), coeffs.g_minus(t0)
        gp1, gm1 = coeffs.g_plus(t0 + dt), coeffs.g_minus(t0 + dt)
        if mu_eval is not None:
            mup, mum = mu_eval(t0 + 0.5 * dt)
            mu_S = mup + mum
            mu_W = mup - mum
        else:
            mu_S = mu_W = None
        aS = 0.5 * dt * p.nu1
        aW = 0.5 * dt * p.nu2
        S = self._diffuse(S, aS, gp0 + gm0, gp1 + gm1, mu_S, dt)
        W = self._diffuse(W, aW, gp0 - gm0, gp1 - gm1, mu_W, dt)
        self.v_plus = self.boundary_project(0.5 * (S + W))
        self.v_minus = self.boundary_project(0.5 * (S - W))
        self.t = t0 + dt
        return self

    # -- evaluation --------------------------------------------------------------
    def eval_fast(self, f, eps):
        """[[f]]_eps: interpolate a strip-stack field at z = phi(x)/sqrt(eps),
        returning a full-grid field (zero off the strip)."""
        phi = self.strip.take(self.boundary.phi)
        zv = phi / np.sqrt(eps)
        ns, n2 = zv.shape
        flat = f.reshape((-1, ns, n2, self.fast.n))
        out = np.zeros((flat.shape[0], ns, n2))
        for q in range(flat.shape[0]):
            out[q] = _interp_z_pointwise(self.fast, flat[q], zv)
        out = out.reshape(f.shape[:-3] + (ns, n2))
        return self.strip.embed(out)

    def max_normal_component(self):
        nh = self.strip.take(self.boundary.nhat)
        worst = 0.0
        for v in (self.v_plus, self.v_minus):
            vn = v[0] * nh[0][..., None] + v[1] * nh[1][..., None]
            worst = max(worst, float(np.max(np.abs(vn))))
        return worst

    def far_field_max(self):
        return max(float(np.max(np.abs(self.v_plus[..., -1]))),
                   float(np.max(np.abs(self.v_minus[..., -1]))))


def _interp_z_pointwise(fast, f, zv):
    """Interpolate f(ns, n2, nz) at per-node z values zv(ns, n2)."""
    idx = np.searchsorted(fast.z, zv) - 1
    idx = np.clip(idx, 1, fast.n - 3)
    ii = idx[..., None] + np.arange(-1, 3)[None, None, :]
    zs = fast.z[ii]                                  # (ns, n2, 4)
    vals = np.take_along_axis(f, ii, axis=-1)
    out = np.zeros(zv.shape)
    for a in range(4):
        L = np.ones_like(zv)
        for bq in range(4):
            if bq != a:
                L = L * (zv - zs[..., bq]) / (zs[..., a] - zs[..., bq])
        out += vals[..., a] * L
    return np.where(zv <= fast.z_max, out, 0.0)


# ----------------------------------------------------------------------------
# correctors
# ----------------------------------------------------------------------------

@dataclass
class CorrectorFields:
    theta_plus: np.ndarray
    theta_minus: np.ndarray
    grad_theta_plus: np.ndarray
    grad_theta_minus: np.ndarray
    zeta_plus: np.ndarray
    zeta_minus: np.ndarray
    compatibility_defect: float
    case_flag: str


def _strip_divergence(domain, strip, v):
    """x-divergence of a strip-stack tangential field per z level."""
    full = strip.embed(v)                        # (2, n1, n2, nz)
    nz = v.shape[-1]
    div_full = np.empty((domain.n1, domain.n2, nz))
    for q in range(nz):
        div_full[..., q] = divergence(domain, full[..., q])
    return strip.take(div_full)


def correctors_q_w(fields, coeffs, friction_pm, t=None):
    """Pressure-layer profile q+- and the second corrector w+-.

    q+- integrates the normal part of the transport terms downward from the
    far field; w+- lifts the divergence (normal part) and the slip trace
    (tangential part) of v+-.
    """
    dom = fields.domain
    strip = fields.strip
    prof = coeffs.profile
    t = fields.t if t is None else t
    if np.max(np.abs(fields.strip.take(fields.boundary.nhat))) == 0.0:
        raise ValueError("corrector construction needs a nonzero normal on the strip")

    J = strip.take(prof.jac_z0(t))
    nh = strip.take(fields.boundary.nhat)
    from .elsasser import advective

    out_q = {}
    for key, v_self, v_other in (("+", fields.v_plus, fields.v_minus),
                                 ("-", fields.v_minus, fields.v_plus)):
        full = strip.embed(v_self)
        nz = fields.fast.n
        adv_n = np.empty(v_self.shape[1:])
        for q in range(nz):
            a = advective(dom, prof.z0(t), full[..., q])
            adv_n[..., q] = strip.take(a[0] * fields.boundary.nhat[0]
                                       + a[1] * fields.boundary.nhat[1])
        stretch = np.stack([J[0, 0] * v_other[0] + J[0, 1] * v_other[1],
                            J[1, 0] * v_other[0] + J[1, 1] * v_other[1]])
        integrand = adv_n + stretch[0] * nh[0][..., None] + stretch[1] * nh[1][..., None]
        out_q[key] = fields.fast.cumint_from_top(integrand)

    w_p, w_m = build_w(fields, coeffs, friction_pm, t=t)
    return (out_q["+"], out_q["-"]), (w_p, w_m)


def build_w(fields, coeffs, friction_pm, t=None):
    """w+- = wbar n - 2 exp(-z) N+-(v+, v-)|_{z=0} on the strip stack."""
    dom = fields.domain
    strip = fields.strip
    Mp, Mm, Lp, Lm = friction_pm
    t = fields.t if t is None else t
    nh = strip.take(fields.boundary.nhat)
    vp0 = strip.embed(fields.v_plus[..., 0])
    vm0 = strip.embed(fields.v_minus[..., 0])
    Np = strip.take(slip_operator(dom, fields.boundary, Mp, Lp, vp0, vm0))
    Nm = strip.take(slip_operator(dom, fields.boundary, Mm, Lm, vm0, vp0))
    div_p = _strip_divergence(dom, strip, fields.v_plus)
    div_m = _strip_divergence(dom, strip, fields.v_minus)
    wbar_p = fields.fast.cumint_from_top(div_p)
    wbar_m = fields.fast.cumint_from_top(div_m)
    ez = np.exp(-fields.fast.z)
    w_p = (wbar_p[None] * nh[:, :, :, None]
           - 2.0 * ez[None, None, None, :] * Np[:, :, :, None])
    w_m = (wbar_m[None] * nh[:, :, :, None]
           - 2.0 * ez[None, None, None, :] * Nm[:, :, :, None])
    return w_p, w_m


def theta_zeta(fields, coeffs, friction_pm, eps, t=None, case_flag="auto",
               poisson_tol=1e-6):
    """Neumann correctors theta+- for the evaluated layer divergence, and
    the zeta force per the active case."""
    dom = fields.domain
    strip = fields.strip
    t = fields.t if t is None else t
    w_p, w_m = build_w(fields, coeffs, friction_pm, t=t)
    prof = coeffs.profile

    out = {}
    defect = 0.0
    from .elsasser import gradient
    for key, w_f, v_f in (("+", w_p, fields.v_plus), ("-", w_m, fields.v_minus)):
        w_eval = np.stack([fields.eval_fast(w_f[c], eps) for c in range(2)])
        v_eval = np.stack([fields.eval_fast(v_f[c], eps) for c in range(2)])
        combo = v_eval / np.sqrt(eps) + w_eval
        rhs = -divergence(dom, combo)
        flux = {}
        for name, axis, idx, sgn in dom.boundary_components():
            wn = fields.boundary.normal_part(np.stack([
                strip.embed(w_f[0][..., 0]), strip.embed(w_f[1][..., 0])]))
            flux[name] = -(wn[idx, :] if axis == 0 else wn[:, idx])
        tot_rhs = dom.integrate(rhs)
        tot_flux = dom.boundary_integral(flux)
        scale = dom.integrate(np.abs(rhs)) + 1e-300
        defect = max(defect, abs(tot_rhs - tot_flux) / max(scale, 1.0))
        th = poisson_neumann(dom, rhs, flux, tol=max(poisson_tol, 1e-5))
        out[key] = (th, gradient(dom, th))

    # zeta cases
    wn0 = fields.boundary.normal_part(np.stack([
        strip.embed((w_p - w_m)[0][..., 0]), strip.embed((w_p - w_m)[1][..., 0])]))
    first_case = float(np.max(np.abs(wn0))) <= 1e-8 * (1.0 + float(np.max(np.abs(w_p))))
    if case_flag == "auto":
        case = "first" if first_case else "second"
    else:
        case = case_flag

    zp = np.zeros((2,) + dom.shape)
    zm = np.zeros((2,) + dom.shape)
    if case != "zero" and np.max(np.abs(prof.z0(t))) > 0.0:
        from .elsasser import advective
        z0 = prof.z0(t)
        J = prof.jac_z0(t)
        thp, gthp = out["+"]
        thm, gthm = out["-"]

        def stretch(g):
            return np.stack([J[0, 0] * g[0] + J[0, 1] * g[1],
                             J[1, 0] * g[0] + J[1, 1] * g[1]])

        if case == "second":
            zp = stretch(gthm - gthp)
            zm = stretch(gthp - gthm)
        else:
            adv_p = advective(dom, z0, gthp)
            adv_m = advective(dom, z0, gthm)
            zdot_p = z0[0] * gthp[0] + z0[1] * gthp[1]
            zdot_m = z0[0] * gthm[0] + z0[1] * gthm[1]
            zp = adv_p + stretch(gthm) - gradient(dom, zdot_p) - stretch(gthm - gthp)
            zm = adv_m + stretch(gthp) - gradient(dom, zdot_m) - stretch(gthp - gthm)

    return CorrectorFields(theta_plus=out["+"][0], theta_minus=out["-"][0],
                           grad_theta_plus=out["+"][1], grad_theta_minus=out["-"][1],
                           zeta_plus=zp, zeta_minus=zm,
                           compatibility_defect=float(defect), case_flag=case)


# ----------------------------------------------------------------------------
# weighted norms
# ----------------------------------------------------------------------------

def weighted_norm(domain, fast, f, k=0, m=0, p=0, strip=None):
    """|| f ||_{H^{k,m,p}}: sum over x-derivatives up to order m and
    z-derivatives r <= p of the (1 + z^{2k})-weighted L2 norms.

    f has shape (n1, n2, nz) (scalar) on the full grid, or a strip stack
    with ``strip`` given.
    """
    if strip is not None:
        f = strip.embed(f)
    total = 0.0
    wz = fast.w * (1.0 + fast.z ** (2 * k))
    for r in range(p + 1):
        g = f
        for _ in range(r):
            g = fast.d_z(g)
        derivs = [g]
        if m >= 1:
            derivs += [domain.d1(np.moveaxis(g, -1, 0)), domain.d2(np.moveaxis(g, -1, 0))]
        for j, d in enumerate(derivs):
            if j == 0:
                total += np.sum(domain.quad_w[..., None] * d ** 2 * wz)
            else:
                d = np.moveaxis(d, 0, -1)
                total += np.sum(domain.quad_w[..., None] * d ** 2 * wz)
        if m >= 2:
            for dfun in (domain.d1, domain.d2):
                for dfun2 in (domain.d1, domain.d2):
                    d = dfun2(dfun(np.moveaxis(g, -1, 0)))
                    d = np.moveaxis(d, 0, -1)
                    total += np.sum(domain.quad_w[..., None] * d ** 2 * wz)
    return float(np.sqrt(total))
