"""Elsasser change of unknowns, friction operators, and planar calculus.

The symmetrized unknowns z+- = u +- sqrt(mu) B turn the MHD nonlinearity
into two cross-advection channels.  The friction matrices of the slip
boundary conditions transform accordingly into the pairs (M+-, L+-), and
the boundary shear data become rho+-(h+, h-) = 2 [M+- h+ + L+- h-]_tan.

All differential operators act on grid-aligned components and are second
order; div(perp_grad(f)) and curl(grad(f)) vanish identically on the chosen
stencils because the axis-0 and axis-1 difference operators commute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import ExtendedDomain, BoundaryFields


# ----------------------------------------------------------------------------
# parameters and friction matrices
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FluidParams:
    nu1: float
    nu2: float
    mu: float = 1.0

    def __post_init__(self):
        if self.nu1 <= 0.0 or self.nu2 <= 0.0:
            raise ValueError("both diffusivities must be positive")
        if self.mu <= 0.0:
            raise ValueError("permeability must be positive")

    @property
    def lam_plus(self):
        return 0.5 * (self.nu1 + self.nu2)

    @property
    def lam_minus(self):
        return 0.5 * (self.nu1 - self.nu2)

    @property
    def sqrt_mu(self):
        return float(np.sqrt(self.mu))


@dataclass
class FrictionSet:
    """Friction matrices M1, M2, L1, L2 as 2x2 Cartesian tensor fields on E.

    Each entry has shape (2, 2, n1, n2).  Constant matrices are broadcast;
    the default smooth extension to the closed extended domain is constant
    in space.
    """

    domain: ExtendedDomain
    M1: np.ndarray
    M2: np.ndarray
    L1: np.ndarray
    L2: np.ndarray

    @staticmethod
    def _expand(domain, A):
        A = np.asarray(A, dtype=float)
        if A.shape == (2, 2):
            return np.broadcast_to(A[:, :, None, None], (2, 2) + domain.shape).copy()
        if A.shape == (2, 2) + domain.shape:
            return A.copy()
        raise ValueError(f"friction matrix must be 2x2 or a 2x2 field, got {A.shape}")

    @classmethod
    def build(cls, domain, M1=None, M2=None, L1=None, L2=None):
        zero = np.zeros((2, 2))
        return cls(
            domain=domain,
            M1=cls._expand(domain, zero if M1 is None else M1),
            M2=cls._expand(domain, zero if M2 is None else M2),
            L1=cls._expand(domain, zero if L1 is None else L1),
            L2=cls._expand(domain, zero if L2 is None else L2),
        )

    @classmethod
    def preset(cls, domain, name, rho=0.5, seed=0, amplitude=0.5):
        """Named presets: 'zero', 'rho_identity', 'random_smooth',
        'theorem_1a' (M2 = 0, the rest random), 'theorem_1b' (M2 = rho I)."""
        eye = np.eye(2)
        if name == "zero":
            return cls.build(domain)
        if name == "rho_identity":
            return cls.build(domain, M2=rho * eye)
        if name in ("random_smooth", "theorem_1a", "theorem_1b"):
            rng = np.random.default_rng(seed)

            def smooth_sym():
                X = domain.points_xy()
                f = np.zeros(domain.shape)
                g = np.zeros(domain.shape)
                hdiag = np.zeros(domain.shape)
                L = domain.thickness
                for _ in range(3):
                    kx, ky = rng.normal(size=2) / L
                    ph = rng.uniform(0, 2 * np.pi)
                    f += rng.normal() * np.cos(kx * X[0] + ky * X[1] + ph)
                    g += rng.normal() * np.cos(kx * X[1] - ky * X[0] + ph)
                    hdiag += rng.normal() * np.sin(kx * X[0] - ky * X[1] + ph)
                A = np.empty((2, 2) + domain.shape)
                A[0, 0] = amplitude * f / 3.0
                A[1, 1] = amplitude * hdiag / 3.0
                A[0, 1] = A[1, 0] = amplitude * g / 3.0
                return A

            M1, L1, L2 = smooth_sym(), smooth_sym(), smooth_sym()
            if name == "theorem_1a":
                return cls.build(domain, M1=M1, L1=L1, L2=L2)
            if name == "theorem_1b":
                return cls.build(domain, M1=M1, M2=rho * eye, L1=L1, L2=L2)
            M2 = smooth_sym()
            return cls.build(domain, M1=M1, M2=M2, L1=L1, L2=L2)
        raise ValueError(f"unknown friction preset {name!r}")


def friction_transform(fs, mu):
    """Transformed pairs M+- and L+- from the physical friction matrices."""
    if mu <= 0.0:
        raise ValueError("permeability must be positive")
    s = np.sqrt(mu)
    Mp = (s * fs.M1 + s * fs.M2 + fs.L1 + fs.L2) / (2.0 * s)
    Mm = (s * fs.M1 - s * fs.M2 + fs.L1 - fs.L2) / (2.0 * s)
    Lp = (s * fs.M1 + s * fs.M2 - fs.L1 - fs.L2) / (2.0 * s)
    Lm = (s * fs.M1 - s * fs.M2 - fs.L1 + fs.L2) / (2.0 * s)
    return Mp, Mm, Lp, Lm


def apply_matrix(domain, A, v):
    """Apply a Cartesian 2x2 tensor field to a grid-component vector field."""
    vc = domain.to_cartesian(v)
    wc = np.stack([
        A[0, 0] * vc[0] + A[0, 1] * vc[1],
        A[1, 0] * vc[0] + A[1, 1] * vc[1],
    ])
    return domain.from_cartesian(wc)


# ----------------------------------------------------------------------------
# states
# ----------------------------------------------------------------------------

@dataclass
class ElsasserState:
    zp: np.ndarray
    zm: np.ndarray
    t: float = 0.0

    def copy(self):
        return ElsasserState(self.zp.copy(), self.zm.copy(), self.t)


def to_elsasser(u, B, params):
    if u.shape != B.shape:
        raise ValueError(f"grid mismatch: {u.shape} vs {B.shape}")
    s = params.sqrt_mu
    return ElsasserState(u + s * B, u - s * B)


def from_elsasser(state, params):
    s = params.sqrt_mu
    u = 0.5 * (state.zp + state.zm)
    B = 0.5 * (state.zp - state.zm) / s
    return u, B


# ----------------------------------------------------------------------------
# planar differential operators (grid components)
# ----------------------------------------------------------------------------

def divergence(domain, v):
    if domain.is_annulus:
        r = domain.c1[:, None]
        return domain.d1(r * v[0]) / r + domain.d2(v[1]) / r
    return domain.d1(v[0]) + domain.d2(v[1])


def curl(domain, v):
    if domain.is_annulus:
        r = domain.c1[:, None]
        return domain.d1(r * v[1]) / r - domain.d2(v[0]) / r
    return domain.d1(v[1]) - domain.d2(v[0])


def planar_curl_div(domain, v):
    return curl(domain, v), divergence(domain, v)


def gradient(domain, f):
    if domain.is_annulus:
        r = domain.c1[:, None]
        return np.stack([domain.d1(f), domain.d2(f) / r])
    return np.stack([domain.d1(f), domain.d2(f)])


def perp_gradient(domain, f):
    """perp-grad f = [d2 f, -d1 f] in Cartesian; grid components returned."""
    g = gradient(domain, f)
    return np.stack([g[1], -g[0]])


def jacobian(domain, v):
    """Velocity gradient J[i, j] = d_j v_i in the orthonormal grid frame."""
    J = np.empty((2, 2) + domain.shape)
    if domain.is_annulus:
        r = domain.c1[:, None]
        J[0, 0] = domain.d1(v[0])
        J[0, 1] = (domain.d2(v[0]) - v[1]) / r
        J[1, 0] = domain.d1(v[1])
        J[1, 1] = (domain.d2(v[1]) + v[0]) / r
    else:
        J[0, 0] = domain.d1(v[0])
        J[0, 1] = domain.d2(v[0])
        J[1, 0] = domain.d1(v[1])
        J[1, 1] = domain.d2(v[1])
    return J


def advective(domain, a, v, jac_v=None):
    """(a . grad) v in grid components."""
    J = jacobian(domain, v) if jac_v is None else jac_v
    return np.stack([
        J[0, 0] * a[0] + J[0, 1] * a[1],
        J[1, 0] * a[0] + J[1, 1] * a[1],
    ])


# ----------------------------------------------------------------------------
# boundary friction operators
# ----------------------------------------------------------------------------

def rho_pm(domain, boundary, Mp, Mm, Lp, Lm, zp, zm):
    """rho+-(z+, z-) = 2 [M+- z+ + L+- z-]_tan, returned as vector fields."""
    rp = 2.0 * boundary.tangential(apply_matrix(domain, Mp, zp) + apply_matrix(domain, Lp, zm))
    rm = 2.0 * boundary.tangential(apply_matrix(domain, Mm, zp) + apply_matrix(domain, Lm, zm))
    return rp, rm


def slip_operator(domain, boundary, M, L, hp, hm, jac_hp=None):
    """N(h+, h-) = [D(h+) n + W h+ + M h+ + L h-]_tan for one channel.

    ``M`` and ``L`` are Cartesian tensor fields; the Weingarten term is
    kappa [h]_tan, exact for 2D boundaries.
    """
    J = jacobian(domain, hp) if jac_hp is None else jac_hp
    D = 0.5 * (J + np.swapaxes(J, 0, 1))
    Dn = np.stack([
        D[0, 0] * boundary.normal[0] + D[0, 1] * boundary.normal[1],
        D[1, 0] * boundary.normal[0] + D[1, 1] * boundary.normal[1],
    ])
    W = boundary.kappa[None] * boundary.tangential(hp)
    return boundary.tangential(Dn + W + apply_matrix(domain, M, hp) + apply_matrix(domain, L, hm))


# ----------------------------------------------------------------------------
# energy
# ----------------------------------------------------------------------------

def energy(domain, state, params=None):
    """E = (|z+|^2 + |z-|^2)/2 integrated over E; equals |u|^2 + mu |B|^2."""
    return 0.5 * (domain.norm_l2(state.zp) ** 2 + domain.norm_l2(state.zm) ** 2)


def energy_physical(domain, u, B, params):
    return domain.norm_l2(u) ** 2 + params.mu * domain.norm_l2(B) ** 2
