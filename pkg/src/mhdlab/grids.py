"""Extended computational domains and boundary-adjacent fields.

Two geometries are supported:

* ``annulus``  -- polar tensor grid on r in [r_inner, r_outer], periodic in
  theta.  The physical region is an angular sector; the complement of the
  sector is the control region attached through the controlled cuts.
* ``channel``  -- Cartesian grid on [a_ext, b_ext] x [0, height].  The
  physical region is the sub-rectangle (a, b) x (0, height); the two end
  slabs are the control regions.

Vector fields are stored in grid-aligned orthonormal components:
(v_r, v_theta) on the annulus, (v_x, v_y) on the channel, with shape
(2, n1, n2).  Axis 0 of a scalar field is r (resp. x), axis 1 is theta
(resp. y).

The 1D difference operators are central in the interior with second-order
one-sided closures at non-periodic boundaries.  The quadrature weights in
non-periodic directions are chosen so that the discrete divergence theorem
sum(W * div(v)) == boundary_flux(v) holds to round-off for every grid field
(solving Dr^T w = e_n - e_1 gives the closure h*[1/4, 5/4, 1, ..., 5/4, 1/4]).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


# ----------------------------------------------------------------------------
# smooth profile helpers
# ----------------------------------------------------------------------------

def smoothstep5(u):
    """Quintic smoothstep: 0 for u<=0, 1 for u>=1, C^2 monotone between."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 + u * (-15.0 + 6.0 * u))


def smoothstep5_d(u):
    """Derivative of :func:`smoothstep5` with respect to u."""
    uc = np.clip(u, 0.0, 1.0)
    inside = (u > 0.0) & (u < 1.0)
    return np.where(inside, 30.0 * uc * uc * (1.0 + uc * (-2.0 + uc)), 0.0)


def plateau_bump(t, t_end, value, ramp_frac=None, quiet_frac=1.0 / 12.0):
    """C^2 bump on [0, t_end]: zero on the quiet margins near both ends,
    equal to ``value`` on the plateau [t_end/8, 7 t_end/8], symmetric.

    The quiet margins (exact zeros) leave room for switch-on bookkeeping.
    """
    q = quiet_frac * t_end
    tr = 0.125 * t_end - q if ramp_frac is None else ramp_frac * t_end
    t = np.asarray(t)
    up = smoothstep5((t - q) / tr)
    down = smoothstep5((t_end - q - t) / tr)
    return value * up * down


def plateau_bump_d(t, t_end, value, ramp_frac=None, quiet_frac=1.0 / 12.0):
    q = quiet_frac * t_end
    tr = 0.125 * t_end - q if ramp_frac is None else ramp_frac * t_end
    t = np.asarray(t)
    up = smoothstep5((t - q) / tr)
    down = smoothstep5((t_end - q - t) / tr)
    dup = smoothstep5_d((t - q) / tr) / tr
    ddown = -smoothstep5_d((t_end - q - t) / tr) / tr
    return value * (dup * down + up * ddown)


def plateau_bump_int(t, t_end, value, n=8192, quiet_frac=1.0 / 12.0):
    """Cumulative integral of :func:`plateau_bump` from 0 to t (vectorized)."""
    ts = np.linspace(0.0, t_end, n)
    g = plateau_bump(ts, t_end, value, quiet_frac=quiet_frac)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(ts))])
    return np.interp(np.asarray(t), ts, cum)


# ----------------------------------------------------------------------------
# 1D stencils and quadrature
# ----------------------------------------------------------------------------

def sbp_weights(n, h):
    """Quadrature weights making sum(w * D(f)) = f[-1] - f[0] exact.

    D is the central difference with (-3, 4, -1)/(2h) one-sided closures.
    """
    if n < 5:
        raise ValueError("need at least 5 nodes per non-periodic direction")
    w = np.full(n, h)
    w[0] = w[-1] = 0.25 * h
    w[1] = w[-2] = 1.25 * h
    return w


def d_nonperiodic(f, h, axis=0):
    """Second-order first derivative, one-sided at the two ends."""
    f = np.asarray(f)
    df = np.empty_like(f)
    fm = np.moveaxis(f, axis, 0)
    dm = np.moveaxis(df, axis, 0)
    dm[1:-1] = (fm[2:] - fm[:-2]) / (2.0 * h)
    dm[0] = (-3.0 * fm[0] + 4.0 * fm[1] - fm[2]) / (2.0 * h)
    dm[-1] = (3.0 * fm[-1] - 4.0 * fm[-2] + fm[-3]) / (2.0 * h)
    return df


def d_periodic(f, h, axis=0):
    """Second-order central first derivative on a periodic axis."""
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)


def lagrange4_weights(s):
    """Weights of 4-point Lagrange interpolation at offset s from node 1.

    Nodes sit at -1, 0, 1, 2 in index units; s in [0, 1] interpolates
    between the middle pair.
    """
    return (
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s * s - 1.0) * (s - 2.0) / 2.0,
        -s * (s + 1.0) * (s - 2.0) / 2.0,
        s * (s * s - 1.0) / 6.0,
    )


# ----------------------------------------------------------------------------
# the extended domain
# ----------------------------------------------------------------------------

@dataclass
class ExtendedDomain:
    """Tensor grid for the extended domain E with the physical region marked."""

    kind: str
    n1: int
    n2: int
    # annulus parameters
    r_inner: float = 0.0
    r_outer: float = 0.0
    sector: tuple = (0.0, 0.0)          # (theta_a, theta_b) delimiting Omega
    # channel parameters
    a_ext: float = 0.0
    a: float = 0.0
    b: float = 0.0
    b_ext: float = 0.0
    height: float = 0.0

    # populated by build_domain
    c1: np.ndarray = field(default=None, repr=False)
    c2: np.ndarray = field(default=None, repr=False)
    h1: float = 0.0
    h2: float = 0.0
    quad_w: np.ndarray = field(default=None, repr=False)
    physical_mask: np.ndarray = field(default=None, repr=False)
    closed_mask: np.ndarray = field(default=None, repr=False)

    _cache: dict = field(default_factory=dict, repr=False)

    # -- basic queries ------------------------------------------------------
    @property
    def is_annulus(self):
        return self.kind == "annulus"

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def thickness(self):
        if self.is_annulus:
            return self.r_outer - self.r_inner
        return min(self.b_ext - self.a_ext, self.height)

    def mesh(self):
        return np.meshgrid(self.c1, self.c2, indexing="ij")

    def points_xy(self):
        """Cartesian coordinates of all nodes, shape (2, n1, n2)."""
        C1, C2 = self.mesh()
        if self.is_annulus:
            return np.stack([C1 * np.cos(C2), C1 * np.sin(C2)])
        return np.stack([C1, C2])

    # -- frame conversion ---------------------------------------------------
    def to_cartesian(self, v):
        """Grid components -> Cartesian components (same shape)."""
        if not self.is_annulus:
            return v.copy()
        th = self.c2[None, :]
        c, s = np.cos(th), np.sin(th)
        vx = v[0] * c - v[1] * s
        vy = v[0] * s + v[1] * c
        return np.stack([vx, vy])

    def from_cartesian(self, v):
        if not self.is_annulus:
            return v.copy()
        th = self.c2[None, :]
        c, s = np.cos(th), np.sin(th)
        vr = v[0] * c + v[1] * s
        vt = -v[0] * s + v[1] * c
        return np.stack([vr, vt])

    # -- derivatives --------------------------------------------------------
    def d1(self, f):
        """Derivative along axis 0 (r or x)."""
        return d_nonperiodic(f, self.h1, axis=-2 if f.ndim > 2 else 0)

    def d2(self, f):
        """Derivative along axis 1 (theta or y)."""
        ax = -1 if f.ndim > 2 else 1
        if self.is_annulus:
            return d_periodic(f, self.h2, axis=ax)
        return d_nonperiodic(f, self.h2, axis=ax)

    # -- quadrature ---------------------------------------------------------
    def integrate(self, f):
        return float(np.sum(self.quad_w * f))

    def norm_l2(self, f):
        """L2 norm over E; f may be a scalar (n1,n2) or vector (2,n1,n2)."""
        if f.ndim == 3:
            return float(np.sqrt(np.sum(self.quad_w * (f[0] ** 2 + f[1] ** 2))))
        return float(np.sqrt(np.sum(self.quad_w * f * f)))

    def boundary_components(self):
        """List of (name, axis, index, outward_sign) for the walls of E."""
        if self.is_annulus:
            return [("inner", 0, 0, -1.0), ("outer", 0, self.n1 - 1, +1.0)]
        return [
            ("left", 0, 0, -1.0),
            ("right", 0, self.n1 - 1, +1.0),
            ("bottom", 1, 0, -1.0),
            ("top", 1, self.n2 - 1, +1.0),
        ]

    def boundary_values(self, f, name):
        """Restrict a scalar field to the named boundary component."""
        for nm, axis, idx, _sgn in self.boundary_components():
            if nm == name:
                return f[idx, :] if axis == 0 else f[:, idx]
        raise KeyError(name)

    def boundary_weights(self, name):
        """Quadrature weights along the named boundary component."""
        key = ("bw", name)
        if key not in self._cache:
            if self.is_annulus:
                rad = self.r_inner if name == "inner" else self.r_outer
                self._cache[key] = np.full(self.n2, rad * self.h2)
            else:
                if name in ("left", "right"):
                    self._cache[key] = sbp_weights(self.n2, self.h2)
                else:
                    self._cache[key] = sbp_weights(self.n1, self.h1)
        return self._cache[key]

    def boundary_flux(self, v):
        """Outward flux of a grid-component vector field through d(E)."""
        total = 0.0
        for name, axis, idx, sgn in self.boundary_components():
            vn = (v[axis][idx, :] if axis == 0 else v[axis][:, idx]) * sgn
            total += float(np.sum(self.boundary_weights(name) * vn))
        return total

    def boundary_integral(self, comp_values):
        """Integrate per-component boundary samples over d(E)."""
        total = 0.0
        for name, vals in comp_values.items():
            total += float(np.sum(self.boundary_weights(name) * vals))
        return total

    # -- interpolation (semi-Lagrangian support) -----------------------------
    def interp_cubic(self, f, p1, p2):
        """4-point Lagrange interpolation of scalar field f at points
        (p1, p2) given in grid coordinates (r/theta or x/y)."""
        g1 = (np.asarray(p1) - self.c1[0]) / self.h1
        i1 = np.floor(g1).astype(int)
        i1 = np.clip(i1, 1, self.n1 - 3)
        s1 = g1 - i1
        w1 = lagrange4_weights(s1)

        if self.is_annulus:
            g2 = (np.asarray(p2) - self.c2[0]) / self.h2
            i2 = np.floor(g2).astype(int)
            s2 = g2 - i2
            idx2 = [(i2 + k) % self.n2 for k in (-1, 0, 1, 2)]
        else:
            g2 = (np.asarray(p2) - self.c2[0]) / self.h2
            i2 = np.floor(g2).astype(int)
            i2 = np.clip(i2, 1, self.n2 - 3)
            s2 = g2 - i2
            idx2 = [np.clip(i2 + k, 0, self.n2 - 1) for k in (-1, 0, 1, 2)]
        w2 = lagrange4_weights(s2)

        out = np.zeros(np.shape(g1), dtype=f.dtype)
        for a_off, wa in zip((-1, 0, 1, 2), w1):
            ia = np.clip(i1 + a_off, 0, self.n1 - 1)
            row = np.zeros_like(out)
            for jb, wb in zip(idx2, w2):
                row += wb * f[ia, jb]
            out += wa * row
        return out

    def shift_theta(self, f, delta):
        """Exact spectral shift f(theta) -> f(theta - delta) per ring.

        ``delta`` is a scalar or an (n1,) array (shift may vary with r).
        Annulus only; theta must be the last axis.
        """
        if not self.is_annulus:
            raise ValueError("spectral theta shift is an annulus operation")
        k = np.fft.rfftfreq(self.n2, d=1.0 / self.n2)
        delta = np.asarray(delta, dtype=float)
        phase = np.exp(-1j * k[None, :] * delta.reshape(-1, 1))
        F = np.fft.rfft(f, axis=-1)
        if f.ndim == 3:
            phase = phase[None, :, :]
        return np.fft.irfft(F * phase, n=self.n2, axis=-1)


# ----------------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------------

def build_domain(kind, **kw):
    """Build an :class:`ExtendedDomain` from geometry parameters.

    Annulus: r_inner, r_outer, sector=(theta_a, theta_b), n_r, n_theta.
    Channel: a_ext, a, b, b_ext, height, n_x, n_y.
    """
    if kind == "annulus":
        r1, r2 = float(kw["r_inner"]), float(kw["r_outer"])
        th_a, th_b = (float(t) for t in kw.get("sector", (0.0, 1.5 * np.pi)))
        n_r, n_t = int(kw["n_r"]), int(kw["n_theta"])
        if not (0.0 < r1 < r2):
            raise ValueError(f"annulus radii must satisfy 0 < r_inner < r_outer, got {r1}, {r2}")
        if not (0.0 < th_b - th_a < 2.0 * np.pi):
            raise ValueError(f"sector width must lie in (0, 2*pi), got {th_b - th_a}")
        if n_t % 2:
            raise ValueError("n_theta must be even")
        dom = ExtendedDomain(kind, n_r, n_t, r_inner=r1, r_outer=r2, sector=(th_a, th_b))
        dom.c1 = np.linspace(r1, r2, n_r)
        dom.h1 = dom.c1[1] - dom.c1[0]
        dom.h2 = 2.0 * np.pi / n_t
        dom.c2 = np.arange(n_t) * dom.h2
        wr = sbp_weights(n_r, dom.h1)
        dom.quad_w = (wr * dom.c1)[:, None] * np.full(n_t, dom.h2)[None, :]
        ang = np.mod(dom.c2 - th_a, 2.0 * np.pi)
        wid = np.mod(th_b - th_a, 2.0 * np.pi)
        in_sec = (ang > 1e-12) & (ang < wid - 1e-12)
        in_sec_cl = (ang <= wid + 1e-12) | (ang >= 2.0 * np.pi - 1e-12)
        rin = (dom.c1 > r1 + 1e-12) & (dom.c1 < r2 - 1e-12)
        dom.physical_mask = rin[:, None] & in_sec[None, :]
        dom.closed_mask = np.broadcast_to(in_sec_cl[None, :], (n_r, n_t)).copy()
        return dom

    if kind == "channel":
        a_ext, a, b, b_ext = (float(kw[k]) for k in ("a_ext", "a", "b", "b_ext"))
        height = float(kw["height"])
        n_x, n_y = int(kw["n_x"]), int(kw["n_y"])
        if not (a_ext < a < b < b_ext):
            raise ValueError(f"channel extents must satisfy a_ext < a < b < b_ext, got {(a_ext, a, b, b_ext)}")
        if height <= 0.0:
            raise ValueError(f"height must be positive, got {height}")
        dom = ExtendedDomain(kind, n_x, n_y, a_ext=a_ext, a=a, b=b, b_ext=b_ext, height=height)
        dom.c1 = np.linspace(a_ext, b_ext, n_x)
        dom.c2 = np.linspace(0.0, height, n_y)
        dom.h1 = dom.c1[1] - dom.c1[0]
        dom.h2 = dom.c2[1] - dom.c2[0]
        wx = sbp_weights(n_x, dom.h1)
        wy = sbp_weights(n_y, dom.h2)
        dom.quad_w = wx[:, None] * wy[None, :]
        in_x = (dom.c1 > a + 1e-12) & (dom.c1 < b - 1e-12)
        in_y = (dom.c2 > 1e-12) & (dom.c2 < height - 1e-12)
        dom.physical_mask = in_x[:, None] & in_y[None, :]
        in_x_cl = (dom.c1 >= a - 1e-12) & (dom.c1 <= b + 1e-12)
        dom.closed_mask = np.broadcast_to(in_x_cl[:, None], (n_x, n_y)).copy()
        return dom

    raise ValueError(f"unknown domain kind {kind!r}")


# ----------------------------------------------------------------------------
# boundary-adjacent fields
# ----------------------------------------------------------------------------

@dataclass
class BoundaryFields:
    """Signed distance to d(E), extended normal, curvature, projector."""

    domain: ExtendedDomain
    d: float                       # tubular neighborhood width
    phi: np.ndarray = field(default=None, repr=False)
    normal: np.ndarray = field(default=None, repr=False)    # extended -grad(phi)
    nhat: np.ndarray = field(default=None, repr=False)      # unit direction
    kappa: np.ndarray = field(default=None, repr=False)

    def tangential(self, v):
        """[v]_tan = v - (v . nhat) nhat, in grid components."""
        vn = v[0] * self.nhat[0] + v[1] * self.nhat[1]
        return v - vn[None] * self.nhat

    def normal_part(self, v):
        return v[0] * self.nhat[0] + v[1] * self.nhat[1]


def _transition(s):
    """Smooth -1 -> +1 profile on s in [0, 1]."""
    return 2.0 * smoothstep5(s) - 1.0


def boundary_fields(domain, tube_width=None):
    """Distance, extended normal, and curvature fields for the domain.

    ``tube_width`` is the width d of the tubular neighborhood V; the default
    is 0.2 times the smallest wall-to-wall thickness.  |normal| = 1 holds
    wherever phi < d; further inside the magnitude tapers smoothly so the
    extension stays single-valued across the medial axis.
    """
    d = 0.2 * domain.thickness if tube_width is None else float(tube_width)
    if not (0.0 < d < 0.5 * domain.thickness):
        raise ValueError(f"tube width must lie in (0, thickness/2), got {d}")

    n1, n2 = domain.shape
    if domain.is_annulus:
        r = domain.c1[:, None]
        r1, r2 = domain.r_inner, domain.r_outer
        phi = np.minimum(r - r1, r2 - r) * np.ones((1, n2))
        t = _transition((domain.c1 - (r1 + d)) / (r2 - r1 - 2.0 * d))[:, None]
        t = np.broadcast_to(t, (n1, n2)).copy()
        normal = np.stack([t, np.zeros_like(t)])
        mag = np.abs(t)
        nh = np.where(mag > 1e-14, np.sign(t), 0.0)
        nhat = np.stack([nh, np.zeros_like(nh)])
        kappa = t / r
    else:
        x = domain.c1[:, None] * np.ones((1, n2))
        y = domain.c2[None, :] * np.ones((n1, 1))
        phi_x = np.minimum(x - domain.a_ext, domain.b_ext - x)
        phi_y = np.minimum(y, domain.height - y)
        phi = np.minimum(phi_x, phi_y)
        tx = _transition((domain.c1 - (domain.a_ext + d)) / (domain.b_ext - domain.a_ext - 2.0 * d))[:, None]
        ty = _transition((domain.c2 - d) / (domain.height - 2.0 * d))[None, :]
        use_x = phi_x < phi_y
        nx = np.where(use_x, tx, 0.0)
        ny = np.where(use_x, 0.0, ty)
        normal = np.stack([nx * np.ones((n1, n2)), ny * np.ones((n1, n2))])
        mag = np.hypot(normal[0], normal[1])
        with np.errstate(invalid="ignore", divide="ignore"):
            nhat = np.where(mag > 1e-14, normal / np.maximum(mag, 1e-300), 0.0)
        kappa = np.zeros((n1, n2))
    return BoundaryFields(domain=domain, d=d, phi=phi, normal=normal, nhat=nhat, kappa=kappa)


@dataclass
class CutoffChi:
    """Boundary cutoff chi(x) = psi_{d*}(phi(x)) and its gradient."""

    boundary: BoundaryFields
    d_star: float
    chi: np.ndarray = field(default=None, repr=False)
    grad_chi: np.ndarray = field(default=None, repr=False)

    def psi(self, s):
        lo, hi = 0.5 * self.d_star, 2.0 * self.d_star / 3.0
        return 1.0 - smoothstep5((np.asarray(s) - lo) / (hi - lo))

    def dpsi(self, s):
        lo, hi = 0.5 * self.d_star, 2.0 * self.d_star / 3.0
        return -smoothstep5_d((np.asarray(s) - lo) / (hi - lo)) / (hi - lo)


def cutoff_chi(boundary, d_star):
    """Boundary cutoff supported in the d* tube; 1 below d*/2, 0 above 2d*/3."""
    if not (0.0 < d_star < boundary.d):
        raise ValueError(f"d_star must lie in (0, d) = (0, {boundary.d}), got {d_star}")
    out = CutoffChi(boundary=boundary, d_star=float(d_star))
    out.chi = out.psi(boundary.phi)
    out.grad_chi = -out.dpsi(boundary.phi)[None] * boundary.nhat
    return out
