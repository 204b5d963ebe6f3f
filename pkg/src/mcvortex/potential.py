"""Dirichlet Green's function machinery on multiply connected domains.

Stream-function problems are always solved on a bounded region: a bounded
domain is used as-is, while an exterior domain is pulled back through the
exact Möbius map w = s/(z - z0) (normalized inversion; the fluid maps to a
bounded region and infinity lands at w = 0).  Green's functions and their
perp-gradients transport through conformal maps exactly, so the pullback
introduces no approximation.

Harmonic functions on the computational region are represented as

    h(w) = Re F[mu](w) + sum_h a_h log|w - c_h|  (+ prescribed singular parts)

with F a Cauchy-type (double layer) integral over the boundary and one log
source per hole completing the rank of the double layer; each hole's density
is constrained to zero mean.  The Nyström discretization uses the periodic
trapezoid rule with the curvature limit on the diagonal.  Plain quadrature
degrades exponentially near the boundary, so two devices keep everything
uniformly accurate there:

* targets near a curve use compensated (barycentric) Cauchy sums, exact for
  the dominant local mode, both for values and first derivatives;
* sources near a curve are regularized by subtracting their exact image
  across the circle (osculating circle for non-circular components), which
  removes the nearly singular part of the Dirichlet data before sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from . import geometry as geo
from .errors import (
    CoincidentPoints,
    IllConditionedSystem,
    PointOutsideDomain,
    ResolutionTooLow,
)

log = logging.getLogger("mcvortex")

_2PI = 2.0 * np.pi
CACHE_FORMAT_VERSION = 1

# band widths in units of the local arclength spacing
CLOSE_EVAL_BAND = 8.0


# ---------------------------------------------------------------------------
# closed forms on disks (reference solutions; also used to build images)


def green_disk(x, y, center=(0.0, 0.0), radius=1.0):
    """Dirichlet Green's function of a disk, by reflection:
    G(x,y) = (1/2pi) log( |x-y| R / (|x-y*| |y-c|) ), y* the inverse point."""
    zx = np.atleast_1d(geo.as_complex(x))
    zy = np.atleast_1d(geo.as_complex(y))
    c = complex(geo.as_complex(center))
    zx, zy = np.broadcast_arrays(zx, zy)
    vx, vy = zx - c, zy - c
    if np.any(np.abs(vx) > radius * (1 + 1e-12)) or np.any(
        np.abs(vy) > radius * (1 + 1e-12)
    ):
        raise PointOutsideDomain("green_disk needs both points inside the disk")
    sep = np.abs(zx - zy)
    if np.any(sep < 1e-14 * radius):
        raise CoincidentPoints("coincident evaluation points")
    ay = np.abs(vy)
    safe = np.where(ay == 0.0, 1.0, ay)
    ystar = c + radius**2 * vy / safe**2
    # as y -> center, |x - y*| |y - c| -> R |x - c|
    denom = np.where(ay < 1e-15 * radius, np.abs(vx) * radius, np.abs(zx - ystar) * ay)
    out = np.log(sep * radius / denom) / _2PI
    return out if out.size > 1 else float(out[0])


def green_exterior_disk(x, y, center=(0.0, 0.0), radius=1.0):
    """Green's function of the exterior of a disk (bounded at infinity):
    the same image form as the disk, with both points outside."""
    zx = np.atleast_1d(geo.as_complex(x))
    zy = np.atleast_1d(geo.as_complex(y))
    c = complex(geo.as_complex(center))
    zx, zy = np.broadcast_arrays(zx, zy)
    vx, vy = zx - c, zy - c
    if np.any(np.abs(vx) < radius * (1 - 1e-12)) or np.any(
        np.abs(vy) < radius * (1 - 1e-12)
    ):
        raise PointOutsideDomain("green_exterior_disk needs both points outside")
    sep = np.abs(zx - zy)
    if np.any(sep < 1e-14 * radius):
        raise CoincidentPoints("coincident evaluation points")
    ystar = c + radius**2 * vy / np.abs(vy) ** 2
    out = np.log(sep * radius / (np.abs(zx - ystar) * np.abs(vy))) / _2PI
    return out if out.size > 1 else float(out[0])


# ---------------------------------------------------------------------------
# conformal pullback


class MobiusMap:
    """w = scale/(z - center), or the identity when built with no arguments."""

    def __init__(self, center=None, scale=None):
        self.identity = scale is None
        self.center = 0j if center is None else complex(center)
        self.scale = 1.0 if scale is None else float(scale)

    def to_w(self, z):
        z = np.asarray(z, dtype=np.complex128)
        return z if self.identity else self.scale / (z - self.center)

    def from_w(self, w):
        w = np.asarray(w, dtype=np.complex128)
        return w if self.identity else self.center + self.scale / w

    def dm(self, z):
        z = np.asarray(z, dtype=np.complex128)
        if self.identity:
            return np.ones_like(z)
        return -self.scale / (z - self.center) ** 2

    def d2m(self, z):
        z = np.asarray(z, dtype=np.complex128)
        if self.identity:
            return np.zeros_like(z)
        return 2.0 * self.scale / (z - self.center) ** 3


def _image_circle(center, radius, mob):
    """Image of a circle under the Möbius map (circles map to circles)."""
    if mob.identity:
        return complex(geo.as_complex(center)), float(radius)
    c = complex(geo.as_complex(center)) - mob.center
    A = abs(c) ** 2 - radius**2
    return complex(mob.scale * np.conj(c) / A), float(mob.scale * radius / abs(A))


# ---------------------------------------------------------------------------
# workspace: boundary data of the bounded computational region


@dataclass
class _WsComponent:
    index: int
    role: str                # "outer" or "hole" in the computational region
    tau: np.ndarray          # complex nodes
    e: np.ndarray            # complex line elements, region-standard orientation
    wprime_t: np.ndarray     # dw/dt along the stored parametrization
    diag: np.ndarray         # Nyström diagonal of the double-layer kernel
    anchor: complex | None   # interior point of a hole; also its log center
    circle: tuple | None     # (center, radius) when the image curve is a circle
    arc_h: float             # max arclength spacing

    @property
    def n(self):
        return self.tau.size


class Workspace:
    """Mapped boundary data and evaluation primitives.

    Line elements follow the region-standard orientation (fluid on the left:
    outer curve counterclockwise, holes clockwise), which makes the double
    layer simply Re of a Cauchy sum with a +mu/2 jump on the fluid side.
    """

    def __init__(self, domain, n):
        if n < 16:
            raise ResolutionTooLow("potential solver needs >= 16 nodes per curve")
        self.domain = domain
        self.n = int(n)
        if domain.kind == geo.EXTERIOR:
            self.mob = MobiusMap(domain.map_center, domain.map_scale)
        else:
            self.mob = MobiusMap()
        self.comps = []
        for q in domain.quadrature(self.n):
            comp = domain.components[q.index]
            d2z = comp.curve.d2z(q.t)
            w = self.mob.to_w(q.z)
            mp = self.mob.dm(q.z)
            wp = mp * q.dz                                 # dw/dt
            w2 = self.mob.d2m(q.z) * q.dz**2 + mp * d2z    # d2w/dt2
            role = "outer" if q.index == 0 else "hole"
            if domain.kind == geo.EXTERIOR:
                dirsign = -1.0  # the inversion reverses every image traversal
            else:
                dirsign = 1.0 if role == "outer" else -1.0
            e = dirsign * wp * (_2PI / self.n)
            # kernel diagonal: h Im(w''/w')/(4 pi) in the standard direction;
            # reversing the direction flips the sign of Im(w''/w')
            diag = dirsign * np.imag(w2 / wp) / (2.0 * self.n)
            circle = None
            if comp.curve.is_circle:
                circle = _image_circle(comp.curve.center, comp.curve.radius, self.mob)
            anchor = complex(self.mob.to_w(comp.centroid)) if role == "hole" else None
            self.comps.append(
                _WsComponent(q.index, role, w, e, wp, diag, anchor, circle,
                             float(np.max(np.abs(e)))))
        self.tau = np.concatenate([c.tau for c in self.comps])
        self.e = np.concatenate([c.e for c in self.comps])
        self.n_nodes = self.tau.size
        self.slices = []
        start = 0
        for c in self.comps:
            self.slices.append(slice(start, start + c.n))
            start += c.n
        self.holes = [c for c in self.comps if c.role == "hole"]
        self.log_centers = np.array(
            [c.anchor for c in self.holes], dtype=np.complex128
        ).reshape(-1)
        self.nodes_phys = self.mob.from_w(self.tau)

    # -- Nyström system ------------------------------------------------------

    def assemble(self):
        N, m = self.n_nodes, len(self.holes)
        tau, e = self.tau, self.e
        with np.errstate(divide="ignore", invalid="ignore"):
            K = np.real(e[None, :] / ((tau[None, :] - tau[:, None]) * (2j * np.pi)))
        idx = np.arange(N)
        K[idx, idx] = np.concatenate([c.diag for c in self.comps])
        A = np.zeros((N + m, N + m))
        A[:N, :N] = 0.5 * np.eye(N) + K
        for h, comp in enumerate(self.holes):
            A[:N, N + h] = np.log(np.abs(tau - comp.anchor))
            A[N + h, self.slices[comp.index]] = np.abs(comp.e)
        return A

    # -- evaluation ------------------------------------------------------------

    def near_component(self, Z):
        """Index of the component whose close-evaluation band contains each
        target (-1 when the plain quadrature is already spectrally accurate)."""
        Z = np.atleast_1d(np.asarray(Z, dtype=np.complex128))
        out = np.full(Z.shape, -1, dtype=int)
        best = np.full(Z.shape, np.inf)
        for ci, comp in enumerate(self.comps):
            d = np.min(np.abs(Z[:, None] - comp.tau[None, :]), axis=1)
            sel = (d < CLOSE_EVAL_BAND * comp.arc_h) & (d < best)
            out[sel] = ci
            best = np.minimum(best, d)
        return out

    def _comp_dt(self, comp, arr):
        """d/dt along one component's parametrization via FFT (axis 0)."""
        arr = np.asarray(arr, dtype=np.complex128)
        k = np.fft.fftfreq(comp.n, d=1.0 / comp.n)
        if comp.n % 2 == 0:
            k[comp.n // 2] = 0.0
        pad = (slice(None),) + (None,) * (arr.ndim - 1)
        return np.fft.ifft(1j * k[pad] * np.fft.fft(arr, axis=0), axis=0)

    def mu_dtau(self, mu):
        """d(mu)/d(tau), componentwise: (d mu/dt) / (d tau/dt)."""
        mu = np.asarray(mu, dtype=np.complex128)
        out = np.empty_like(mu)
        for comp, sl in zip(self.comps, self.slices):
            pad = (slice(None),) + (None,) * (mu.ndim - 1)
            out[sl] = self._comp_dt(comp, mu[sl]) / comp.wprime_t[pad]
        return out

    def boundary_values(self, mu):
        """Fluid-side traces of each component's own Cauchy integral.

        The principal value is computed with the removable-singularity
        trapezoid rule (the diagonal carries d(mu)/ds), which is spectrally
        accurate on smooth curves; the Plemelj jump then gives the trace on
        the fluid side (+mu for the outer component, nothing for holes)."""
        mu = np.asarray(mu, dtype=np.complex128)
        out = np.empty_like(mu)
        for comp, sl in zip(self.comps, self.slices):
            m = mu[sl]
            pad = (slice(None),) + (None,) * (mu.ndim - 1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ker = comp.e[None, :] / (
                    (comp.tau[None, :] - comp.tau[:, None]) * (2j * np.pi)
                )
            np.fill_diagonal(ker, 0.0)
            diag = (comp.e[pad] / (2j * np.pi)) * (
                self._comp_dt(comp, m) / comp.wprime_t[pad]
            )
            Q = ker @ m - ker.sum(axis=1)[pad] * m + diag
            out[sl] = Q + (m if comp.role == "outer" else 0.0)
        return out

    def _comp_cauchy(self, comp, vals, Z):
        """Barycentric evaluation of an analytic function on the fluid side
        of one component from its boundary values vals ((n,) or (n, b))."""
        tau, e = comp.tau, comp.e
        v2 = vals if vals.ndim == 2 else vals[:, None]
        if comp.role == "outer":
            ker = e[:, None] / (tau[:, None] - Z[None, :])
            return np.sum(ker * v2, axis=0) / np.sum(ker, axis=0)
        c = comp.anchor
        ker = e[:, None] / ((tau[:, None] - Z[None, :]) * (tau - c)[:, None])
        num = np.sum(ker * (v2 * (tau - c)[:, None]), axis=0)
        den = np.sum(ker, axis=0)
        # the anchored integral over the (clockwise) hole curve is 1/(z - c)
        return (num / den) / (Z - c)

    def cauchy(self, mu, Z, derivative=False):
        """Analytic part F(Z) of the layer potential at fluid targets.

        Double-layer value = Re F; its gradient as a complex number equals
        conj(F'), and F' is the Cauchy integral of d(mu)/d(tau).  Near-curve
        targets switch to barycentric interpolation of the fluid-side trace.
        mu is (N,) for a shared density or (N, B) matched pairwise with Z (B,).
        """
        Z = np.atleast_1d(np.asarray(Z, dtype=np.complex128))
        mu = np.asarray(mu, dtype=np.complex128)
        dens = self.mu_dtau(mu) if derivative else mu
        paired = dens.ndim == 2
        ker = self.e[None, :] / ((self.tau[None, :] - Z[:, None]) * (2j * np.pi))
        if paired:
            out = np.einsum("ij,ji->i", ker, dens)
        else:
            out = ker @ dens
        near = self.near_component(Z)
        if not np.any(near >= 0):
            return out
        traces = self.boundary_values(mu)
        for ci, (comp, sl) in enumerate(zip(self.comps, self.slices)):
            mask = near == ci
            if not np.any(mask):
                continue
            Zm = Z[mask]
            vals = traces[sl]
            if derivative:
                pad = (slice(None),) + (None,) * (vals.ndim - 1)
                vals = self._comp_dt(comp, vals) / comp.wprime_t[pad]
            if paired:
                vals = vals[:, mask]
            d_sl = dens[sl][:, mask] if paired else dens[sl]
            kerc = comp.e[None, :] / ((comp.tau[None, :] - Zm[:, None]) * (2j * np.pi))
            if paired:
                naive = np.einsum("ij,ji->i", kerc, d_sl)
            else:
                naive = kerc @ d_sl
            out[mask] += self._comp_cauchy(comp, vals, Zm) - naive
        return out

    def log_terms(self, a, Z, gradient=False):
        """Hole log sources: values, or gradients as complex numbers.

        a: (m,) shared or (m, B) pairwise with Z (B,)."""
        Z = np.atleast_1d(np.asarray(Z, dtype=np.complex128))
        if len(self.holes) == 0:
            return np.zeros(Z.shape, dtype=np.complex128 if gradient else np.float64)
        a = np.asarray(a)
        if gradient:
            ker = 1.0 / np.conj(Z[:, None] - self.log_centers[None, :])
        else:
            ker = np.log(np.abs(Z[:, None] - self.log_centers[None, :]))
        if a.ndim == 2:
            return np.einsum("ij,ji->i", ker, a)
        return ker @ a


# ---------------------------------------------------------------------------
# harmonic representations


@dataclass
class HarmonicRep:
    """One harmonic function on the fluid region, in pullback coordinates:

    value(w) = Re F[mu](w) + a . log|w - holes| + sum_p c_p log|w - p| + const

    Prescribed logs may sit at w = 0 (the image of infinity) or inside holes.
    """

    mu: np.ndarray
    a: np.ndarray
    logs: tuple = ()
    const: float = 0.0


def rep_value(ws, rep, W):
    out = np.real(ws.cauchy(rep.mu, W)) + rep.const
    if rep.a.size:
        out = out + ws.log_terms(rep.a, W)
    for p, c in rep.logs:
        out = out + c * np.log(np.abs(W - p))
    return out


def rep_grad_w(ws, rep, W):
    """Gradient in the w-plane as a complex number (du/dx1 + i du/dx2)."""
    out = np.conj(ws.cauchy(rep.mu, W, derivative=True))
    if rep.a.size:
        out = out + ws.log_terms(rep.a, W, gradient=True)
    for p, c in rep.logs:
        out = out + c / np.conj(W - p)
    return out


# ---------------------------------------------------------------------------
# the solver


class PotentialSolver:
    """Factorized boundary system plus the domain's prebuilt harmonics."""

    def __init__(self, domain, n=256, cond_limit=1e12):
        self.domain = domain
        self.n = int(n)
        self.ws = Workspace(domain, self.n)
        A = self.ws.assemble()
        self.cond = float(np.linalg.cond(A))
        if self.cond > cond_limit:
            raise IllConditionedSystem(
                f"boundary system condition number {self.cond:.3e} exceeds "
                f"{cond_limit:.1e}; the geometry is too degenerate at this resolution"
            )
        self.lu = la.lu_factor(A)
        self._build_harmonics()

    # -- linear algebra -------------------------------------------------------

    def dirichlet_solve(self, g):
        """Solve for (density, hole log coefficients) from node values.

        g: (N,) or (N, B); returns mu of the same shape and a of shape (m,)
        or (m, B)."""
        g = np.asarray(g, dtype=np.float64)
        N, m = self.ws.n_nodes, len(self.ws.holes)
        rhs = np.zeros((N + m,) + g.shape[1:])
        rhs[:N] = g
        sol = la.lu_solve(self.lu, rhs)
        return sol[:N], sol[N:]

    # -- harmonic measures and circulation fields -------------------------------

    def _build_harmonics(self):
        ws = self.ws
        N = ws.n_nodes
        ncomp = len(ws.comps)
        data = np.zeros((N, ncomp))
        for j, sl in enumerate(ws.slices):
            data[sl, j] = 1.0
        mu, a = self.dirichlet_solve(data)
        self.measures = (mu, a)

        m = len(ws.holes)
        hole_cols = [c.index for c in ws.holes]
        period = a[:, hole_cols] if m else np.zeros((0, 0))

        exterior = self.domain.kind == geo.EXTERIOR
        self.circulation_indices = (
            list(range(ncomp)) if exterior else list(hole_cols)
        )
        self.fields = []
        self.field_constants = []
        for j in self.circulation_indices:
            logs = []
            if exterior:
                logs.append((0.0 + 0.0j, -1.0 / _2PI))
                if j > 0:
                    logs.append((complex(ws.log_centers[hole_cols.index(j)]), 1.0 / _2PI))
            else:
                logs.append((complex(ws.log_centers[hole_cols.index(j)]), 1.0 / _2PI))
            g0 = np.zeros(N)
            for p, c in logs:
                g0 -= c * np.log(np.abs(ws.tau - p))
            mu0, a0 = self.dirichlet_solve(g0)
            if m:
                # choose boundary constants so the rank-completion logs vanish:
                # then the prescribed logs alone carry the circulations
                cvec = np.linalg.solve(period, -a0)
                mu_j = mu0 + mu[:, hole_cols] @ cvec
                a_j = a0 + period @ cvec
            else:
                cvec = np.zeros(0)
                mu_j, a_j = mu0, a0
            const = 0.0
            if exterior:
                # normalize so stream - (1/2pi) log|x| -> 0 at infinity
                v = -np.log(ws.mob.scale) / _2PI
                v += float(rep_value(ws, HarmonicRep(mu_j, a_j), np.array([0j]))[0])
                for p, c in logs:
                    if p != 0:
                        v += c * np.log(abs(p))
                const = -v
            rep = HarmonicRep(mu_j, a_j, tuple(logs), const)
            consts = {ws.comps[0].index: const if exterior else 0.0}
            for hi, ci in enumerate(hole_cols):
                consts[ci] = float(cvec[hi]) + (const if exterior else 0.0)
            self.fields.append(rep)
            self.field_constants.append(consts)

    # -- coordinate helpers ------------------------------------------------------

    def to_w(self, pts):
        return self.ws.mob.to_w(geo.as_complex(pts))

    def pullback_factor(self, pts):
        """conj(m'(z)): multiplies w-plane gradients to give physical ones."""
        return np.conj(self.ws.mob.dm(geo.as_complex(pts)))

    def require_inside(self, pts, what="evaluation point"):
        z = np.atleast_1d(geo.as_complex(pts))
        ok = np.atleast_1d(self.domain.contains(geo.as_xy(z)))
        if not np.all(ok):
            bad = geo.as_xy(z[~ok])[0]
            raise PointOutsideDomain(f"{what} {tuple(bad)} is not in the fluid region")
        return z

    # -- source systems (Green's function with image regularization) ------------

    def source_terms(self, y, image_band=None):
        """Physical log system for unit sources at y (complex array (B,)).

        Returns (points (B,2) complex, coeffs (B,2), consts (B,), pole (B,)):
        column 0 is the source itself, column 1 the subtracted boundary image
        (coefficient 0 when the source is comfortably far).  Coefficients are
        in units of (1/2pi) log; pole is the log|w| coefficient that keeps the
        completion bounded at infinity (exterior domains only)."""
        y = np.atleast_1d(np.asarray(y, dtype=np.complex128))
        B = y.size
        W = self.ws.mob.to_w(y)
        near = self.ws.near_component(W)
        pts = np.stack([y, np.zeros_like(y)], axis=1)
        coeffs = np.zeros((B, 2))
        coeffs[:, 0] = 1.0
        consts = np.zeros(B)
        pole = np.zeros(B)
        if self.domain.kind == geo.EXTERIOR:
            pole[:] = 1.0 / _2PI
        for i in np.nonzero(near >= 0)[0]:
            circ = self._local_circle(self.ws.comps[near[i]], y[i])
            if circ is None:
                continue
            q, r = circ
            v = y[i] - q
            pts[i, 1] = q + r**2 * v / abs(v) ** 2
            coeffs[i, 1] = -1.0
            consts[i] = -np.log(abs(v) / r) / _2PI
            pole[i] = 0.0
        return pts, coeffs, consts, pole

    def _local_circle(self, comp, y_phys):
        """Physical circle to reflect across: the component itself when it is
        a circle, otherwise its osculating circle at the foot point."""
        bc = self.domain.components[comp.index]
        if bc.curve.is_circle:
            return complex(geo.as_complex(bc.curve.center)), float(bc.curve.radius)
        t0, p, _ = bc.project(geo.as_xy(np.atleast_1d(y_phys))[0])
        zp = complex(bc.curve.dz(np.atleast_1d(t0))[0])
        z2 = complex(bc.curve.d2z(np.atleast_1d(t0))[0])
        kappa = np.imag(np.conj(zp) * z2) / abs(zp) ** 3
        if abs(kappa) < 1e-12:
            return None
        center = complex(geo.as_complex(p)) + (1.0 / kappa) * (1j * zp / abs(zp))
        return center, abs(1.0 / kappa)

    def completion_data(self, pts, coeffs, consts, pole):
        """Boundary node values that the harmonic completion must cancel."""
        zn = self.ws.nodes_phys
        g = np.zeros((zn.size, pts.shape[0]))
        for col in range(pts.shape[1]):
            active = coeffs[:, col] != 0.0
            if not np.any(active):
                continue
            d = np.abs(zn[:, None] - pts[None, active, col])
            g[:, active] -= (coeffs[active, col] / _2PI) * np.log(d)
        g -= consts[None, :]
        if self.domain.kind == geo.EXTERIOR:
            g -= pole[None, :] * np.log(np.abs(self.ws.tau))[:, None]
        return g

    def pair_fields(self, x, y, want_value=True, want_grad=False, skip_primary=False):
        """G(x_i, y_i) and/or its x-gradient for matched point batches.

        skip_primary drops the free-space log, leaving the regular part H."""
        x = np.atleast_1d(geo.as_complex(x))
        y = np.atleast_1d(geo.as_complex(y))
        x, y = np.broadcast_arrays(x, y)
        x = np.ascontiguousarray(x, dtype=np.complex128)
        y = np.ascontiguousarray(y, dtype=np.complex128)
        self.require_inside(x, "evaluation point")
        self.require_inside(y, "source point")
        if not skip_primary and np.any(
            np.abs(x - y) < 1e-13 * max(self.domain.scale, 1.0)
        ):
            raise CoincidentPoints("source and evaluation point coincide")
        pts, coeffs, consts, pole = self.source_terms(y)
        g = self.completion_data(pts, coeffs, consts, pole)
        mu, a = self.dirichlet_solve(g)
        W = self.ws.mob.to_w(x)
        start = 1 if skip_primary else 0
        value = grad = None
        if want_value:
            value = np.real(self.ws.cauchy(mu, W)) + consts
            if a.size:
                value = value + self.ws.log_terms(a, W)
            if self.domain.kind == geo.EXTERIOR:
                value = value + pole * np.log(np.abs(W))
            for col in range(start, pts.shape[1]):
                active = coeffs[:, col] != 0.0
                if np.any(active):
                    d = np.where(active, np.abs(x - pts[:, col]), 1.0)
                    value = value + (coeffs[:, col] / _2PI) * np.log(d)
        if want_grad:
            gw = np.conj(self.ws.cauchy(mu, W, derivative=True))
            if a.size:
                gw = gw + self.ws.log_terms(a, W, gradient=True)
            if self.domain.kind == geo.EXTERIOR:
                gw = gw + pole / np.conj(W)
            grad = self.pullback_factor(x) * gw
            for col in range(start, pts.shape[1]):
                active = coeffs[:, col] != 0.0
                if np.any(active):
                    dv = np.where(active, x - pts[:, col], 1.0)
                    grad = grad + np.where(active, coeffs[:, col], 0.0) / (
                        _2PI * np.conj(dv)
                    )
        return value, grad


# ---------------------------------------------------------------------------
# public functional API


def build_potential_solver(domain, n=256, cache=None, cond_limit=1e12):
    """Build (or load from cache) the boundary solver for a domain."""
    if cache is not None:
        solver = load_solver(domain, n, cache)
        if solver is not None:
            log.info("solver cache hit: %s", cache)
            return solver
        log.info("solver cache miss: %s", cache)
    solver = PotentialSolver(domain, n, cond_limit=cond_limit)
    if cache is not None:
        save_solver(solver, cache)
        log.info("solver cache written: %s", cache)
    return solver


def green(solver, x, y):
    """Dirichlet Green's function at matched pairs (broadcast as needed)."""
    val, _ = solver.pair_fields(x, y, want_value=True)
    return val if val.size > 1 else float(val[0])


def biot_savart_kernel(solver, x, y):
    """K(x,y) = perp-gradient in x of the Green's function; shape (..., 2)."""
    _, grad = solver.pair_fields(x, y, want_value=False, want_grad=True)
    return geo.as_xy(1j * grad)


def routh_regular_part(solver, x, y=None):
    """Regular part H(x,y) = G(x,y) - (1/2pi) log|x-y|; y=None gives H(x,x)."""
    val, _ = solver.pair_fields(x, x if y is None else y, want_value=True,
                                skip_primary=True)
    return val if val.size > 1 else float(val[0])


def routh_regular_gradient(solver, x):
    """Gradient of H(., y) in the first slot on the diagonal y = x, (..., 2)."""
    _, grad = solver.pair_fields(x, x, want_value=False, want_grad=True,
                                 skip_primary=True)
    return geo.as_xy(grad)


def harmonic_measure(solver, j, pts):
    """Harmonic measure of boundary component j at fluid points."""
    ncomp = len(solver.ws.comps)
    if not 0 <= j < ncomp:
        raise IndexError(f"component index {j} out of range (domain has {ncomp})")
    z = solver.require_inside(pts)
    mu, a = solver.measures
    W = solver.ws.mob.to_w(z)
    out = np.real(solver.ws.cauchy(mu[:, j], W))
    if a.size:
        out = out + solver.ws.log_terms(a[:, j], W)
    return out if out.size > 1 else float(out[0])


def _field_slot(solver, j):
    try:
        return solver.circulation_indices.index(j)
    except ValueError:
        raise IndexError(
            f"no circulation field for component {j}; valid indices: "
            f"{solver.circulation_indices}"
        ) from None


def harmonic_field(solver, j, pts):
    """Circulation basis field X_j: unit circulation around component j, zero
    around the others, decaying at infinity on exterior domains; (..., 2)."""
    slot = _field_slot(solver, j)
    z = solver.require_inside(pts)
    rep = solver.fields[slot]
    W = solver.ws.mob.to_w(z)
    u = solver.pullback_factor(z) * (1j * np.conj(_analytic_deriv(solver.ws, rep, W)))
    return geo.as_xy(u)


def harmonic_field_stream(solver, j, pts):
    """Stream function of X_j (constant on every boundary component; on
    exterior domains it matches (1/2pi) log|x| at infinity)."""
    slot = _field_slot(solver, j)
    z = solver.require_inside(pts)
    W = solver.ws.mob.to_w(z)
    out = rep_value(solver.ws, solver.fields[slot], W)
    return out if out.size > 1 else float(out[0])


def boundary_constants(solver, j):
    """Stream constants of X_j on each boundary component, keyed by index."""
    return dict(solver.field_constants[_field_slot(solver, j)])


def _analytic_deriv(ws, rep, W):
    """F'(w) of the full rep, so that grad = conj(F') and perp-grad = i conj(F')."""
    out = ws.cauchy(rep.mu, W, derivative=True)
    if rep.a.size:
        out = out + np.conj(ws.log_terms(rep.a, W, gradient=True))
    for p, c in rep.logs:
        out = out + c / (W - p)
    return out


# ---------------------------------------------------------------------------
# kernel bound verification


@dataclass
class SamplePlan:
    """Monte Carlo plan for kernel bound verification."""

    n_pairs: int = 300
    separations: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    margin: float = 0.05
    radius: float = 6.0       # sampling ball |x| <= radius * domain scale
    seed: int = 0
    collar_fraction: float = 0.25


@dataclass
class KernelBoundReport:
    """Empirical suprema of the weighted kernel estimates.

    estimates maps name -> {separation: sup}; constants holds the overall
    suprema (measured stand-ins for the kernel bound constants)."""

    kind: str
    n_pairs: int
    seed: int
    estimates: dict
    constants: dict
    f_norm: float

    def as_dict(self):
        return {
            "kind": self.kind,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "estimates": {
                k: {f"{s:.1e}": v for s, v in tbl.items()}
                for k, tbl in self.estimates.items()
            },
            "constants": self.constants,
            "f_norm": self.f_norm,
        }


class _NormalTestField:
    """W^{1,inf} field, normal on the boundary, supported in a collar:
    f = g'(d) u with g(t) = t (1 - t/W)^3 on [0, W], u the unit vector away
    from the nearest component."""

    def __init__(self, domain, width):
        self.domain = domain
        self.width = float(width)
        self.dfields = [
            geo.DistanceField(domain, i) for i in range(len(domain.components))
        ]

    def _gp(self, d):
        t = np.clip(d / self.width, 0.0, 1.0)
        return (1.0 - t) ** 2 * (1.0 - 4.0 * t)

    def _gpp(self, d):
        t = np.clip(d / self.width, 0.0, 1.0)
        return (-2.0 * (1.0 - t) * (1.0 - 4.0 * t) - 4.0 * (1.0 - t) ** 2) / self.width

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        out = np.zeros_like(pts, dtype=float)
        ci, _, _, d = self.domain.project(pts)
        for k, df in enumerate(self.dfields):
            sel = (ci == k) & (d < self.width)
            if not np.any(sel):
                continue
            dd, u, _ = df.value_grad_hess(pts[sel])
            out[sel] = self._gp(dd)[:, None] * u
        return out

    def w1inf_norm(self, rng, n=1500):
        sup = 1e-300
        for k, df in enumerate(self.dfields):
            pts = _collar_points(self.domain, n, rng, 1e-3 * self.width, self.width)
            if pts.size == 0:
                continue
            dd, u, H = df.value_grad_hess(pts)
            gp, gpp = self._gp(dd), self._gpp(dd)
            hn = np.linalg.norm(H, axis=(1, 2))
            sup = max(
                sup,
                float(np.max(np.abs(gp))),
                float(np.max(np.abs(gpp) + np.abs(gp) * hn)),
            )
        return sup


def verify_kernel_bounds(solver, plan=None):
    """Empirically verify the weighted kernel estimates on sampled pairs.

    Exterior domains test |K(x,y)| |x| |x-y| / |y| and |G| / (1 + |log w|)
    with w = |x||y|/|x-y|; bounded domains test |K| |x-y| and
    |G| / (1 + |log|x-y||).  Both add the symmetrized combination
    |f(x).K(x,y) + f(y).K(y,x)| / ||f||_{W^{1,inf}} for a boundary-normal
    test field, whose boundedness down to tiny separations reflects the
    cancellation that makes the symmetrized kernel integrable.
    """
    if plan is None:
        plan = SamplePlan()
    rng = np.random.default_rng(plan.seed)
    dom = solver.domain
    exterior = dom.kind == geo.EXTERIOR
    width = plan.collar_fraction * min(dom.min_gap, dom.scale)
    ffield = _NormalTestField(dom, width)
    f_norm = ffield.w1inf_norm(rng)

    # one shared base point set: suprema across separations then compare the
    # kernels themselves, not the sampling noise
    base, ang = _pair_base(dom, plan, rng, width)
    tables = {"biot_savart": {}, "green": {}, "symmetrized": {}}
    for sep in plan.separations:
        xs, ys = _sample_pairs(dom, plan, sep, base, ang)
        K_xy = np.atleast_2d(biot_savart_kernel(solver, xs, ys))
        K_yx = np.atleast_2d(biot_savart_kernel(solver, ys, xs))
        G = np.atleast_1d(green(solver, xs, ys))
        zx, zy = geo.as_complex(xs), geo.as_complex(ys)
        r = np.abs(zx - zy)
        if exterior:
            wk = np.abs(zx) * r / np.abs(zy)
            wg = 1.0 + np.abs(np.log(np.abs(zx) * np.abs(zy) / r))
        else:
            wk = r
            wg = 1.0 + np.abs(np.log(r))
        tables["biot_savart"][sep] = float(np.max(np.linalg.norm(K_xy, axis=1) * wk))
        tables["green"][sep] = float(np.max(np.abs(G) / wg))
        fx, fy = ffield(xs), ffield(ys)
        sym = np.abs(np.sum(fx * K_xy, axis=1) + np.sum(fy * K_yx, axis=1))
        tables["symmetrized"][sep] = float(np.max(sym) / f_norm)
    constants = {k: max(tbl.values()) for k, tbl in tables.items()}
    return KernelBoundReport(
        kind="exterior" if exterior else "bounded",
        n_pairs=plan.n_pairs,
        seed=plan.seed,
        estimates=tables,
        constants=constants,
        f_norm=f_norm,
    )


def _pair_base(dom, plan, rng, collar_width):
    """Base points and offset directions shared by every separation; a share
    of the points is drawn in the boundary collar so the symmetrized estimate
    is exercised where the test field is active."""
    need = plan.n_pairs
    radius = plan.radius * dom.scale
    pools = [
        geo.as_xy(dom.sample_points(3 * need, rng, margin=plan.margin, rmax=radius))
    ]
    collar = _collar_points(dom, 2 * need, rng, plan.margin, collar_width)
    if collar.size:
        pools.append(collar)
    x = np.concatenate(pools)
    rng.shuffle(x)
    return x, rng.uniform(0, _2PI, x.shape[0])


def _sample_pairs(dom, plan, sep, base, ang):
    radius = plan.radius * dom.scale
    y = base + sep * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    ok = dom.contains(y, margin=plan.margin / 2)
    ok &= np.linalg.norm(y, axis=1) <= radius
    x, y = base[ok], y[ok]
    if x.shape[0] < max(8, plan.n_pairs // 4):
        raise RuntimeError("pair sampling starved; loosen the plan margins")
    return x[: plan.n_pairs], y[: plan.n_pairs]


def _collar_points(dom, n, rng, margin, width):
    pts = []
    per = max(1, n // len(dom.components))
    for ci, comp in enumerate(dom.components):
        t = rng.uniform(0, _2PI, per)
        d = rng.uniform(margin, max(width, 1.5 * margin), per)
        z = comp.curve.z(t)
        dz = comp.curve.dz(t)
        nu = -1j * dz / np.abs(dz)          # curve-outward
        sign = dom.fluid_normal_sign(ci)    # fluid-exterior normal = sign * nu
        pts.append(geo.as_xy(z - d * sign * nu))
    pts = np.concatenate(pts)
    return pts[dom.contains(pts, margin=margin / 2)]


# ---------------------------------------------------------------------------
# cache


def save_solver(solver, path):
    """Persist the factorized system and prebuilt harmonics to an npz file."""
    lu, piv = solver.lu
    mu, a = solver.measures
    nf = len(solver.fields)
    fields_mu = (
        np.stack([f.mu for f in solver.fields], axis=1)
        if nf
        else np.zeros((solver.ws.n_nodes, 0))
    )
    fields_a = (
        np.stack([f.a for f in solver.fields], axis=1)
        if nf
        else np.zeros((len(solver.ws.holes), 0))
    )
    logs_points, logs_coeffs, logs_len, consts = [], [], [], []
    for f in solver.fields:
        logs_len.append(len(f.logs))
        for p, c in f.logs:
            logs_points.append(p)
            logs_coeffs.append(c)
        consts.append(f.const)
    fc_keys, fc_vals, fc_lens = [], [], []
    for d in solver.field_constants:
        keys = sorted(d.keys())
        fc_lens.append(len(keys))
        fc_keys.extend(keys)
        fc_vals.extend(d[k] for k in keys)
    np.savez_compressed(
        path,
        format_version=CACHE_FORMAT_VERSION,
        domain_hash=solver.domain.hash(),
        kind=solver.domain.kind,
        n=solver.n,
        cond=solver.cond,
        lu=lu,
        piv=piv,
        measures_mu=mu,
        measures_a=a,
        circulation_indices=np.asarray(solver.circulation_indices, dtype=int),
        fields_mu=fields_mu,
        fields_a=fields_a,
        logs_points=np.asarray(logs_points, dtype=np.complex128),
        logs_coeffs=np.asarray(logs_coeffs, dtype=np.float64),
        logs_len=np.asarray(logs_len, dtype=int),
        field_consts=np.asarray(consts, dtype=np.float64),
        fc_keys=np.asarray(fc_keys, dtype=int),
        fc_lens=np.asarray(fc_lens, dtype=int),
        fc_vals=np.asarray(fc_vals, dtype=np.float64),
    )


def load_solver(domain, n, path):
    """Rebuild a solver from cache; returns None on any mismatch."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError):
        return None
    try:
        if int(data["format_version"]) != CACHE_FORMAT_VERSION:
            return None
        if str(data["domain_hash"]) != domain.hash() or int(data["n"]) != int(n):
            return None
        if str(data["kind"]) != domain.kind:
            return None
        solver = PotentialSolver.__new__(PotentialSolver)
        solver.domain = domain
        solver.n = int(n)
        solver.ws = Workspace(domain, solver.n)
        solver.cond = float(data["cond"])
        solver.lu = (data["lu"], data["piv"])
        solver.measures = (data["measures_mu"], data["measures_a"])
        solver.circulation_indices = [int(v) for v in data["circulation_indices"]]
        fields, pos = [], 0
        pts, cfs, lens = data["logs_points"], data["logs_coeffs"], data["logs_len"]
        for i in range(len(solver.circulation_indices)):
            logs = tuple(
                (complex(pts[pos + q]), float(cfs[pos + q])) for q in range(lens[i])
            )
            pos += int(lens[i])
            fields.append(
                HarmonicRep(
                    data["fields_mu"][:, i],
                    data["fields_a"][:, i],
                    logs,
                    float(data["field_consts"][i]),
                )
            )
        solver.fields = fields
        consts, pos = [], 0
        for ln in data["fc_lens"]:
            keys = data["fc_keys"][pos : pos + ln]
            vals = data["fc_vals"][pos : pos + ln]
            consts.append({int(k): float(v) for k, v in zip(keys, vals)})
            pos += int(ln)
        solver.field_constants = consts
        return solver
    except KeyError:
        return None
