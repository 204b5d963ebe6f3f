"""Auditing the weak vorticity identity, circulation ODEs, and boundary forces.

The audited identity, in differential form, is

    d/dt int theta d omega  +  sum_j s_j gamma_j' theta|_{Gamma_j}
        =  sum_j alpha_j int X_j . grad theta d omega
         + iint H_theta(x, y) d omega(x) d omega(y),

where alpha_j = gamma_j + int w_j d omega, H_theta is the symmetrized
interaction kernel, and s_j = +1 except on the outer boundary of a bounded
domain, where s_0 = -1.  The j-sums run over the circulation components
(all obstacles of an exterior domain, the holes of a bounded one); the
outer boundary of a bounded domain contributes only its gamma_0' term.

Atoms place mass on the diagonal of omega x omega, which the continuum
identity never meets; there the kernel is assigned its regular-part value
grad theta . perp grad_1 H(x, x).  Under that convention trajectories of
the desingularized motion law in `dynamics` satisfy the identity exactly
in continuous time, so the discrete residual measures time-differencing
error only.

Forces on boundary components are recovered from the velocity functional

    F_u(Phi) = d/dt int u . Phi dx - int [(u . grad) Phi] . u dx,

evaluated on divergence-free fields Phi supported in a collar of one
component.  With Phi built from -perp-grad(x2 chi_i) and perp-grad(x1 chi_i)
the pair -(F_u(Phi^1), F_u(Phi^2)) is the net pressure force transmitted
across Gamma_i (for smooth flow it equals the contour integral of p n hat
with the normal pointing out of the fluid); the analogous moment field
gives the torque.  On tangent fields F_u vanishes for exact solutions,
which is reported as an audit of the quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import geometry as geo
from . import potential as pot
from . import reconstruction as rec
from . import vorticity as vor
from .errors import (
    AtomsPresent,
    BadLocalizer,
    IncompatibleDomain,
    TrajectoryTooShort,
)

_2PI = 2.0 * np.pi

YINF = "Yinf"
YBAR = "Ybar"

_EVAL_CHUNK = 8192


# ---------------------------------------------------------------------------
# scalar building blocks (value / gradient / Hessian on point batches)


def _as_center(center):
    c = np.asarray(center)
    return complex(c) if c.ndim == 0 else complex(geo.as_complex(c))


class _Bump:
    """height * (1 - r^2/R^2)^4 on the disk of radius R about a center."""

    def __init__(self, center, radius, height=1.0):
        self.c = _as_center(center)
        self.r = float(radius)
        self.h = float(height)

    def vgh(self, z):
        d = z - self.c
        s = np.maximum(1.0 - (np.abs(d) / self.r) ** 2, 0.0)
        v = self.h * s**4
        g_c = (-8.0 * self.h / self.r**2) * s**3 * d
        gx, gy = g_c.real, g_c.imag
        n = z.size
        hess = np.zeros((n, 2, 2))
        coef = 48.0 * self.h / self.r**4 * s**2
        diag = -8.0 * self.h / self.r**2 * s**3
        hess[:, 0, 0] = diag + coef * d.real**2
        hess[:, 1, 1] = diag + coef * d.imag**2
        hess[:, 0, 1] = hess[:, 1, 0] = coef * d.real * d.imag
        return v, np.stack([gx, gy], axis=-1), hess


class _RampOfDistance:
    """coef * ramp(dist to one component); constant along that boundary."""

    def __init__(self, domain, index, ramp, coef=1.0):
        self.df = geo.DistanceField(domain, index)
        self.ramp = ramp
        self.coef = float(coef)

    def vgh(self, z):
        d = self.df.value(z)
        r, r1, r2 = self.ramp(d), self.ramp.d(d), self.ramp.d2(d)
        n = z.size
        g = np.zeros((n, 2))
        hess = np.zeros((n, 2, 2))
        # only differentiate the distance field inside the active band; far
        # from the component d need not be smooth (medial axis) but the ramp
        # is flat there, so the derivatives vanish identically
        live = (r1 != 0.0) | (r2 != 0.0)
        if np.any(live):
            _, u, hd = self.df.value_grad_hess(z[live])
            a, b = r1[live], r2[live]
            g[live] = a[:, None] * u
            hess[live] = (
                b[:, None, None] * u[:, :, None] * u[:, None, :]
                + a[:, None, None] * hd
            )
        return self.coef * r, self.coef * g, self.coef * hess


class _RadialRamp:
    """coef * ramp(|x - c|): radially symmetric, flat wherever the ramp is."""

    def __init__(self, center, ramp, coef=1.0):
        self.c = _as_center(center)
        self.ramp = ramp
        self.coef = float(coef)

    def vgh(self, z):
        w = z - self.c
        r = np.abs(w)
        v, r1, r2 = self.ramp(r), self.ramp.d(r), self.ramp.d2(r)
        safe = np.where(r == 0, 1.0, r)
        u = geo.as_xy(w / safe).reshape(z.size, 2)
        uu = u[:, :, None] * u[:, None, :]
        hess = (r2[:, None, None] * uu
                + (r1 / safe)[:, None, None] * (np.eye(2)[None, :, :] - uu))
        return self.coef * v, self.coef * r1[:, None] * u, self.coef * hess


class _Poly:
    """x1, x2, or 0.5|x - c|^2 with closed-form derivatives."""

    def __init__(self, which, center=0.0):
        if which not in ("x1", "x2", "r2half"):
            raise ValueError(f"unknown polynomial {which!r}")
        self.which = which
        self.c = _as_center(center)

    def vgh(self, z):
        n = z.size
        hess = np.zeros((n, 2, 2))
        if self.which == "x1":
            v = z.real.astype(float)
            g = np.stack([np.ones(n), np.zeros(n)], axis=-1)
        elif self.which == "x2":
            v = z.imag.astype(float)
            g = np.stack([np.zeros(n), np.ones(n)], axis=-1)
        else:
            d = z - self.c
            v = 0.5 * np.abs(d) ** 2
            g = geo.as_xy(d).reshape(n, 2)
            hess[:, 0, 0] = hess[:, 1, 1] = 1.0
        return v, g, hess


class _Product:
    """Pointwise product of two vgh pieces."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def vgh(self, z):
        va, ga, ha = self.a.vgh(z)
        vb, gb, hb = self.b.vgh(z)
        v = va * vb
        g = va[:, None] * gb + vb[:, None] * ga
        hess = (
            va[:, None, None] * hb
            + vb[:, None, None] * ha
            + ga[:, :, None] * gb[:, None, :]
            + gb[:, :, None] * ga[:, None, :]
        )
        return v, g, hess


class _Sum:
    def __init__(self, pieces):
        self.pieces = list(pieces)

    def vgh(self, z):
        n = z.size
        v, g, h = np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2, 2))
        for p in self.pieces:
            vp, gp, hp = p.vgh(z)
            v += vp
            g += gp
            h += hp
        return v, g, h


# ---------------------------------------------------------------------------
# test functions


class TestFunction:
    """Scalar test function with analytic gradient/Hessian and boundary class.

    kind "Yinf": gradient vanishes identically within `collar` of every
    boundary component (so the boundary values are locally constant); kind
    "Ybar": constant along each component but the normal derivative may be
    nonzero at the boundary.  Both are checked by sampling at construction.
    An optional temporal profile rho(t) with derivative rho_prime is carried
    for time-integrated audits.
    """

    def __init__(self, domain, piece, kind, collar=0.0, grad_support=None,
                 rho=None, rho_prime=None, name="theta", check=True):
        if kind not in (YINF, YBAR):
            raise ValueError(f"kind must be {YINF!r} or {YBAR!r}")
        if kind == YINF and not collar > 0.0:
            raise ValueError("Yinf test functions must declare a collar width")
        self.domain = domain
        self.piece = piece
        self.kind = kind
        self.collar = float(collar)
        self.grad_support = grad_support
        self.rho = rho
        self.rho_prime = rho_prime
        self.name = name
        self.boundary_values = self._boundary_values()
        if check:
            self._check()

    # -- evaluation ---------------------------------------------------------

    def __call__(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        return self.piece.vgh(z)[0]

    def gradient(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        return self.piece.vgh(z)[1]

    def hessian(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        return self.piece.vgh(z)[2]

    def boundary_value(self, j):
        return self.boundary_values[j]

    # -- sampled invariants ---------------------------------------------------

    def _nodes(self, m=96):
        for comp in self.domain.components:
            t = np.linspace(0.0, _2PI, m, endpoint=False)
            yield comp, comp.curve.z(t), comp.curve.dz(t)

    def _boundary_values(self):
        vals = []
        for _, z, _ in self._nodes():
            vals.append(float(np.mean(self.piece.vgh(z)[0])))
        return np.array(vals)

    def _check(self):
        amp = 1.0
        for j, (comp, z, dz) in enumerate(self._nodes()):
            v, g, _ = self.piece.vgh(z)
            amp = max(amp, float(np.max(np.abs(v))))
            if np.max(np.abs(v - self.boundary_values[j])) > 1e-9 * amp:
                raise ValueError(
                    f"test function is not constant on component {j}"
                )
            tau = dz / np.abs(dz)
            gt = g[:, 0] * tau.real + g[:, 1] * tau.imag
            if np.max(np.abs(gt)) > 1e-8 * amp:
                raise ValueError(
                    f"tangential derivative does not vanish on component {j}"
                )
        if self.kind == YINF:
            for j, comp in enumerate(self.domain.components):
                t = np.linspace(0.0, _2PI, 96, endpoint=False)
                zt, dzt = comp.curve.z(t), comp.curve.dz(t)
                nu = -1j * dzt / np.abs(dzt)
                sgn = self.domain.fluid_normal_sign(j)
                for frac in (0.15, 0.5, 0.85):
                    pts = zt - frac * self.collar * sgn * nu
                    keep = self.domain.contains(pts)
                    if not np.any(keep):
                        continue
                    g = self.piece.vgh(pts[keep])[1]
                    if np.max(np.abs(g)) > 1e-9 * amp:
                        raise ValueError(
                            f"gradient does not vanish on the collar of "
                            f"component {j}"
                        )


def _component_bbox(domain, index, pad):
    _, z, _ = domain.components[index].curve._dense()
    return (z.real.min() - pad, z.imag.min() - pad,
            z.real.max() + pad, z.imag.max() + pad)


def bump_test_function(domain, center, radius, height=1.0, plateau=0.0,
                       name="bump"):
    """Compactly supported bump in the fluid interior (class Yinf).

    With plateau > 0 the bump equals `height` on the disk of that radius about
    the center, so the gradient vanishes there as well as outside `radius`.
    """
    c = _as_center(center)
    d = float(domain.distance(np.array([c]))[0])
    if not domain.contains(np.array([c]))[0] or d <= radius:
        raise ValueError("bump support must stay inside the fluid")
    if plateau:
        if not 0.0 < plateau < radius:
            raise ValueError("plateau radius must sit inside the support radius")
        piece = _RadialRamp(c, geo.Ramp(plateau, radius, descending=True), height)
    else:
        piece = _Bump(c, radius, height)
    collar = 0.5 * (d - radius)
    return TestFunction(
        domain, piece, YINF, collar=collar,
        grad_support=(c.real - radius, c.imag - radius,
                      c.real + radius, c.imag + radius),
        name=name,
    )


def _collar_widths(domain, frac=1.0):
    d1 = frac * 0.5 * min(domain.min_gap, 2.0 * domain.scale)
    return 0.35 * d1, d1


def boundary_localizer(domain, index, width=None, name=None):
    """theta_l: identically 1 near component l, 0 near every other component
    and away from the boundary (class Yinf)."""
    if width is None:
        _, width = _collar_widths(domain)
    d0, d1 = 0.35 * width, width
    ramp = geo.Ramp(d0, d1, descending=True)
    piece = _RampOfDistance(domain, index, ramp)
    return TestFunction(
        domain, piece, YINF, collar=0.9 * d0,
        grad_support=_component_bbox(domain, index, d1),
        name=name or f"localizer_{index}",
    )


def polynomial_cutoff(domain, which, n=4, name=None):
    """Polynomial (x1, x2 or 0.5|x|^2) times the boundary/far-field cutoff
    chi_n; constant (zero) near every component, class Yinf."""
    chi = geo.cutoff_chi(domain, n)
    cut = _CutoffPiece(chi)
    piece = _Product(_Poly(which), cut)
    dom_r = 2.0 * n + 1.0
    return TestFunction(
        domain, piece, YINF, collar=0.5 / n,
        grad_support=(-dom_r, -dom_r, dom_r, dom_r),
        name=name or f"poly_{which}_chi{n}",
    )


class _CutoffPiece:
    """Boundary/far-field cutoff chi_n as a vgh piece.  Second derivatives
    use the distance field of the nearest component (the same projection
    that defines the cutoff)."""

    def __init__(self, chi):
        self.chi = chi
        self._dfs = [geo.DistanceField(chi.domain, j)
                     for j in range(len(chi.domain.components))]

    def vgh(self, z):
        dom = self.chi.domain
        ramp = self.chi._near
        idx, _, _, d = dom.project(z)
        nv, n1 = ramp(d), ramp.d(d)
        gn = np.zeros((z.size, 2))
        hn = np.zeros((z.size, 2, 2))
        for j, df in enumerate(self._dfs):
            sel = idx == j
            if not np.any(sel):
                continue
            r1, r2 = ramp.d(d[sel]), ramp.d2(d[sel])
            live = (r1 != 0.0) | (r2 != 0.0)
            if not np.any(live):
                continue
            rows = np.flatnonzero(sel)[live]
            _, u, hd = df.value_grad_hess(z[rows])
            a, b = r1[live], r2[live]
            gn[rows] = a[:, None] * u
            hn[rows] = (b[:, None, None] * u[:, :, None] * u[:, None, :]
                        + a[:, None, None] * hd)
        if dom.kind != geo.EXTERIOR:
            return nv, gn, hn
        r = np.abs(z)
        fv, f1, f2 = self.chi._far(r), self.chi._far.d(r), self.chi._far.d2(r)
        safe = np.where(r == 0, 1.0, r)
        rh = geo.as_xy(np.where(r > 0, z / safe, 0.0)).reshape(z.size, 2)
        gf = f1[:, None] * rh
        eye = np.eye(2)[None, :, :]
        hr = (eye - rh[:, :, None] * rh[:, None, :]) / safe[:, None, None]
        hf = (f2[:, None, None] * rh[:, :, None] * rh[:, None, :]
              + f1[:, None, None] * hr)
        v = nv * fv
        g = gn * fv[:, None] + nv[:, None] * gf
        hess = (hn * fv[:, None, None] + nv[:, None, None] * hf
                + gn[:, :, None] * gf[:, None, :]
                + gf[:, :, None] * gn[:, None, :])
        return v, g, hess


class _QuarticDecay:
    """(1 - s/d1)^4 for 0 <= s < d1, zero beyond: C^3 at d1 and a genuinely
    nonzero slope at s = 0 (unlike the smoothstep ramps)."""

    def __init__(self, d1):
        self.d1 = float(d1)

    def _u(self, s):
        return np.maximum(1.0 - np.asarray(s, dtype=float) / self.d1, 0.0)

    def __call__(self, s):
        return self._u(s) ** 4

    def d(self, s):
        return -4.0 / self.d1 * self._u(s) ** 3

    def d2(self, s):
        return 12.0 / self.d1**2 * self._u(s) ** 2


def random_boundary_constant(domain, rng, n_bumps=2, name="random_ybar"):
    """Random test function constant on each boundary component with nonzero
    normal derivative there (class Ybar)."""
    _, d1 = _collar_widths(domain)
    pieces = []
    for j in range(len(domain.components)):
        pieces.append(_RampOfDistance(domain, j, _QuarticDecay(d1),
                                      coef=float(rng.uniform(-1.0, 1.0))))
    bumps = np.atleast_1d(
        domain.sample_points(n_bumps, rng, margin=0.3 * domain.scale))
    for c in bumps:
        pieces.append(_Bump(c, 0.2 * domain.scale,
                            float(rng.uniform(-1.0, 1.0))))
    xs, ys = [], []
    for j in range(len(domain.components)):
        bb = _component_bbox(domain, j, d1)
        xs += [bb[0], bb[2]]
        ys += [bb[1], bb[3]]
    pad = 0.2 * domain.scale
    xs += [c.real - pad for c in bumps] + [c.real + pad for c in bumps]
    ys += [c.imag - pad for c in bumps] + [c.imag + pad for c in bumps]
    support = (min(xs), min(ys), max(xs), max(ys))
    return TestFunction(domain, _Sum(pieces), YBAR, grad_support=support,
                        name=name)


# ---------------------------------------------------------------------------
# the symmetrized kernel and the double integral


def symmetrized_kernel(solver, testfn, x, y):
    """H_theta(x, y) = (grad theta(x) . K(x,y) + grad theta(y) . K(y,x)) / 2;
    on the diagonal: grad theta(x) . perp grad_1 H(x, x)."""
    zx = np.atleast_1d(geo.as_complex(x))
    zy = np.atleast_1d(geo.as_complex(y))
    zx, zy = np.broadcast_arrays(zx, zy)
    same = np.abs(zx - zy) < 1e-12 * max(solver.domain.scale, 1.0)
    out = np.zeros(zx.shape)
    if np.any(~same):
        xs, ys = zx[~same], zy[~same]
        gx = testfn.gradient(geo.as_xy(xs))
        gy = testfn.gradient(geo.as_xy(ys))
        kxy = pot.biot_savart_kernel(solver, geo.as_xy(xs), geo.as_xy(ys))
        kyx = pot.biot_savart_kernel(solver, geo.as_xy(ys), geo.as_xy(xs))
        out[~same] = 0.5 * (np.sum(gx * kxy, axis=-1)
                            + np.sum(gy * kyx, axis=-1))
    if np.any(same):
        xs = zx[same]
        g = testfn.gradient(geo.as_xy(xs))
        hgrad = pot.routh_regular_gradient(solver, geo.as_xy(xs)).reshape(-1, 2)
        out[same] = np.sum(g * geo.perp(hgrad), axis=-1)
    return out if out.size > 1 else float(out.flat[0])


def _continuous_part(omega):
    """Blob + grid parts of a measure (None when purely atomic)."""
    cache = getattr(omega, "_smooth_part_cache", None)
    if cache is not None:
        return cache
    if not (len(omega.blob_pos) or omega.grid is not None):
        return None
    part = vor.VorticityMeasure(
        omega.domain,
        blobs=list(zip(omega.blob_pos, omega.blob_str, omega.blob_rad)),
        grid=omega.grid,
        support_margin=omega.support_margin,
    )
    omega._smooth_part_cache = part
    return part


def pair_interaction(solver, omega, grad):
    """iint H dω dω for the perp-gradient pairing x -> grad(x) . K(x,y),
    diagonal atoms taking the regular-part value.

    Equals sum_i G_i grad(x_i) . u_K(x_i) + int grad . K[omega] d omega_cont,
    where u_K is the desingularized kernel velocity (mutual + self-image +
    smooth-part field)."""
    total = 0.0
    cont = _continuous_part(omega)
    za, sa = omega.atom_pos, omega.atom_str
    if za.size:
        g = np.asarray(grad(geo.as_xy(za)), dtype=float).reshape(za.size, 2)
        uk = np.zeros((za.size, 2))
        if za.size > 1:
            ii, jj = np.nonzero(~np.eye(za.size, dtype=bool))
            k = pot.biot_savart_kernel(
                solver, geo.as_xy(za[ii]), geo.as_xy(za[jj]))
            np.add.at(uk, ii, sa[jj, None] * k)
        hg = pot.routh_regular_gradient(solver, geo.as_xy(za)).reshape(-1, 2)
        uk += sa[:, None] * geo.perp(hg)
        if cont is not None:
            uk += rec.biot_savart_field(solver, cont)(geo.as_xy(za))
        total += float(np.sum(sa * np.sum(g * uk, axis=1)))
    if cont is not None:
        field = rec.biot_savart_field(solver, omega)
        def integrand(xy):
            gv = np.asarray(grad(xy), dtype=float).reshape(-1, 2)
            return np.sum(gv * field(xy), axis=1)
        total += vor.integrate_against(cont, integrand)
    return total


def _completion_flux(solver, omega, grad, alpha):
    """sum_j alpha_j int X_j . grad theta d omega over the full measure."""
    total = 0.0
    for coef, j in zip(alpha, solver.circulation_indices):
        if coef == 0.0:
            continue
        def integrand(xy):
            gv = np.asarray(grad(xy), dtype=float).reshape(-1, 2)
            xj = pot.harmonic_field(solver, j, xy).reshape(-1, 2)
            return np.sum(gv * xj, axis=1)
        total += coef * vor.integrate_against(omega, integrand)
    return total


def _gamma_signs(domain):
    s = np.ones(len(domain.components))
    if domain.kind == geo.BOUNDED:
        s[0] = -1.0
    return s


def _ddt(y, dt):
    """Second-order time derivative: centered interior, one-sided ends."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 3:
        raise ValueError("time differencing needs at least 3 samples")
    out = np.empty_like(y)
    out[1:-1] = (y[2:] - y[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dt)
    out[-1] = (3.0 * y[-1] - 4.0 * y[-2] + y[-3]) / (2.0 * dt)
    return out


@dataclass
class ResidualSeries:
    """Per-time residual of the weak identity plus its assembled terms."""

    t: np.ndarray
    values: np.ndarray
    dt: float
    testfn_name: str
    parts: dict = field(default_factory=dict)

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.values)))

    def order_versus(self, finer):
        """Observed convergence order against a half-step residual."""
        return float(np.log2(self.max_abs / finer.max_abs))


def _require_same_domain(solver, trajectory, testfn=None):
    dom = solver.domain
    if testfn is not None and testfn.domain is not dom:
        raise IncompatibleDomain(
            "test function was built on a different domain")
    for s in trajectory.states:
        if s.omega.domain is not dom:
            raise IncompatibleDomain(
                "trajectory states live on a different domain")


def weak_residual(solver, trajectory, testfn):
    """Residual time series of the weak identity along a trajectory.

    For trajectories of the motion law the continuous-time identity is
    exact, so the residual is pure differencing error: O(dt^2)."""
    _require_same_domain(solver, trajectory, testfn)
    states = trajectory.states
    dt = trajectory.dt
    t = trajectory.times()
    n_t = len(states)
    mass = np.empty(n_t)
    spatial = np.empty(n_t)
    gam = np.empty((n_t, len(solver.domain.components)))
    for m, s in enumerate(states):
        mass[m] = vor.integrate_against(s.omega, testfn)
        alpha = rec.alpha_coefficients(solver, s.omega, s.gamma)
        spatial[m] = (_completion_flux(solver, s.omega, testfn.gradient, alpha)
                      + pair_interaction(solver, s.omega, testfn.gradient))
        gam[m] = s.gamma.as_array()
    dm = _ddt(mass, dt)
    dg = _ddt(gam, dt)
    signs = _gamma_signs(solver.domain)
    circ = dg @ (signs * testfn.boundary_values)
    res = dm + circ - spatial
    return ResidualSeries(
        t=t, values=res, dt=dt, testfn_name=testfn.name,
        parts={"transport": dm, "circulation": circ, "spatial": spatial,
               "mass": mass},
    )


def integrated_residual(solver, trajectory, testfn):
    """Time-integrated form of the identity with the temporal profile rho:
    trapezoid quadrature of rho' (mass + circulation terms) + rho spatial
    terms, balanced against the endpoint data.  Vanishes to the same order
    as the differential residual; with rho supported in [0, T) the final
    term drops and only the initial data enters."""
    if testfn.rho is None or testfn.rho_prime is None:
        raise ValueError("integrated_residual needs rho and rho_prime")
    _require_same_domain(solver, trajectory, testfn)
    states = trajectory.states
    t = trajectory.times()
    signs = _gamma_signs(solver.domain)
    bterm = signs * testfn.boundary_values

    def data_term(s):
        return (vor.integrate_against(s.omega, testfn)
                + s.gamma.as_array() @ bterm)

    fvals = np.empty(len(states))
    for m, s in enumerate(states):
        alpha = rec.alpha_coefficients(solver, s.omega, s.gamma)
        spatial = (_completion_flux(solver, s.omega, testfn.gradient, alpha)
                   + pair_interaction(solver, s.omega, testfn.gradient))
        fvals[m] = (testfn.rho_prime(t[m]) * data_term(s)
                    + testfn.rho(t[m]) * spatial)
    total = float(np.trapezoid(fvals, t))
    total += testfn.rho(t[0]) * data_term(states[0])
    total -= testfn.rho(t[-1]) * data_term(states[-1])
    return total


# ---------------------------------------------------------------------------
# circulation ODE right-hand side


def circulation_ode_rhs(solver, omega, gamma, ell, theta_ell):
    """gamma_l' implied by the weak identity for a localizer test function
    (1 near component l, 0 near the others).

    The transport rate d/dt int theta d omega is evaluated through the
    motion law (atoms and blob centers move; a frozen grid part contributes
    no rate).  For trajectories of `dynamics` the result vanishes to
    quadrature precision: circulations are conserved."""
    dom = solver.domain
    if theta_ell.domain is not dom or omega.domain is not dom:
        raise IncompatibleDomain("localizer/measure built on another domain")
    if not 0 <= ell < len(dom.components):
        raise IndexError(f"component index {ell} out of range")
    if theta_ell.kind != YINF:
        raise BadLocalizer("localizer must be locally constant near the boundary")
    target = np.zeros(len(dom.components))
    target[ell] = 1.0
    if np.max(np.abs(theta_ell.boundary_values - target)) > 1e-9:
        raise BadLocalizer(
            f"localizer must be 1 on component {ell} and 0 on the others; "
            f"measured {theta_ell.boundary_values}"
        )

    rate = 0.0
    n_particles = omega.n_atoms + len(omega.blob_pos)
    if n_particles:
        v = dyn.particle_velocities(solver, omega, gamma)
        vz = v[:, 0] + 1j * v[:, 1]
        if omega.n_atoms:
            g = theta_ell.gradient(geo.as_xy(omega.atom_pos)).reshape(-1, 2)
            gz = g[:, 0] + 1j * g[:, 1]
            rate += float(np.sum(omega.atom_str
                                 * np.real(np.conj(gz) * vz[:omega.n_atoms])))
        if len(omega.blob_pos):
            nr, ntheta = 10, 20
            zq, wq = omega.blob_quadrature(nr, ntheta)
            g = theta_ell.gradient(geo.as_xy(zq)).reshape(-1, 2)
            gz = (g[:, 0] + 1j * g[:, 1]).reshape(len(omega.blob_pos), -1)
            wq = wq.reshape(len(omega.blob_pos), -1)
            gint = np.sum(gz * wq, axis=1)
            rate += float(np.sum(np.real(np.conj(gint)
                                         * vz[omega.n_atoms:])))

    alpha = rec.alpha_coefficients(solver, omega, gamma)
    spatial = (_completion_flux(solver, omega, theta_ell.gradient, alpha)
               + pair_interaction(solver, omega, theta_ell.gradient))
    sgn = -1.0 if (dom.kind == geo.BOUNDED and ell == 0) else 1.0
    return sgn * (spatial - rate)


# ---------------------------------------------------------------------------
# force and torque test fields


class CurlField:
    """sign * perp-grad of a scalar piece: divergence-free with analytic
    Jacobian; tangent to every boundary component where the scalar is
    locally constant."""

    def __init__(self, piece, sign=1.0, support_bbox=None, name=""):
        self.piece = piece
        self.sign = float(sign)
        self.support_bbox = support_bbox
        self.name = name

    def __call__(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        g = self.piece.vgh(z)[1]
        return self.sign * geo.perp(g)

    def jacobian(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        h = self.piece.vgh(z)[2]
        jac = np.empty_like(h)
        jac[:, 0, :] = -h[:, 1, :]
        jac[:, 1, :] = h[:, 0, :]
        return self.sign * jac

    def stream(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        return self.sign * self.piece.vgh(z)[0]


def region_centroid(domain, index):
    """Centroid of the region enclosed by one boundary component."""
    _, z, dz = domain.components[index].curve._dense()
    w = _2PI / z.size
    area = 0.5 * np.sum(np.imag(np.conj(z) * dz)) * w
    cx = 0.5 * np.sum(z.real**2 * dz.imag) * w / area
    cy = -0.5 * np.sum(z.imag**2 * dz.real) * w / area
    return complex(cx, cy)


def test_field(domain, index, which, width=None):
    """Force/torque test field for one boundary component.

    which = "Fx": -perp-grad(x2 chi_i)  (equals (1, 0) on the chi plateau)
    which = "Fy":  perp-grad(x1 chi_i)  (equals (0, 1) on the plateau)
    which = "Torque": perp-grad(|x - centroid|^2/2 chi_i) (rigid rotation
    about the centroid on the plateau)."""
    if width is None:
        _, width = _collar_widths(domain)
    d0, d1 = 0.35 * width, width
    ramp = geo.Ramp(d0, d1, descending=True)
    chi = _RampOfDistance(domain, index, ramp)
    if which == "Fx":
        piece, sign = _Product(_Poly("x2"), chi), -1.0
    elif which == "Fy":
        piece, sign = _Product(_Poly("x1"), chi), 1.0
    elif which == "Torque":
        c = region_centroid(domain, index)
        piece, sign = _Product(_Poly("r2half", c), chi), 1.0
    else:
        raise ValueError('which must be "Fx", "Fy" or "Torque"')
    fld = CurlField(piece, sign, _component_bbox(domain, index, d1),
                    name=f"{which}_{index}")
    fld.band = (d0, d1)
    fld.component = index
    return fld


def random_tangent_field(domain, rng, name="tangent"):
    """Random divergence-free field tangent to the whole boundary (stream
    function constant on every component), for force-functional audits."""
    d0, d1 = _collar_widths(domain)
    pieces = []
    for j in range(len(domain.components)):
        ramp = geo.Ramp(0.3 * d1, d1, descending=True)
        pieces.append(_RampOfDistance(domain, j, ramp,
                                      coef=float(rng.uniform(-1.0, 1.0))))
    for c in domain.sample_points(2, rng, margin=0.3 * domain.scale):
        pieces.append(_Bump(c, 0.2 * domain.scale,
                            float(rng.uniform(-1.0, 1.0))))
    return CurlField(_Sum(pieces), 1.0, None, name=name)


# ---------------------------------------------------------------------------
# force quadrature


def _region_grid(domain, index, d1, h):
    """Cell centers/weights of {x in fluid : dist_i(x) <= d1} with cut-cell
    fractions; out-of-fluid centers of cut cells are nudged to the fluid
    side for field evaluation."""
    x0, y0, x1, y1 = _component_bbox(domain, index, d1 + 2.0 * h)
    nx = max(int(np.ceil((x1 - x0) / h)), 2)
    ny = max(int(np.ceil((y1 - y0) / h)), 2)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    xs = x0 + (np.arange(nx) + 0.5) * hx
    ys = y0 + (np.arange(ny) + 0.5) * hy
    z = (xs[None, :] + 1j * ys[:, None]).ravel()
    df = geo.DistanceField(domain, index)
    near = df.value(z) <= d1 + 0.71 * max(hx, hy)
    z = z[near]
    frac = vor.fluid_fractions(domain, z, hx, hy)
    keep = frac > 0.0
    z, frac = z[keep], frac[keep]
    w = frac * hx * hy
    inside = domain.contains(z)
    zev = z.copy()
    if np.any(~inside):
        zo = z[~inside]
        _, _, foot, d = domain.project(zo)
        unit = (foot - zo) / np.where(d == 0.0, 1.0, d)
        cand = foot + unit * 0.25 * min(hx, hy)
        ok = domain.contains(cand)
        zev[~inside] = np.where(ok, cand, np.nan)
        drop = np.isnan(zev)
        if np.any(drop):
            zev, w = zev[~drop], w[~drop]
    return zev, w


def _velocity_on_grid(solver, state, pts):
    u = rec.reconstruct_velocity(solver, state.omega, state.gamma)
    out = np.empty((pts.shape[0], 2))
    for lo in range(0, pts.shape[0], _EVAL_CHUNK):
        sl = slice(lo, lo + _EVAL_CHUNK)
        out[sl] = u(pts[sl])
    return out


@dataclass
class ForceRecord:
    """Force or torque time series across one boundary component."""

    t: np.ndarray
    component: int
    f: np.ndarray = None          # (n_t, 2) force, when requested
    tau: np.ndarray = None        # (n_t,) torque, when requested
    functional: np.ndarray = None  # raw F_u values per field, (n_fields, n_t)
    audit: np.ndarray = None      # F_u on random tangent fields
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.f, self.tau, self.functional, self.audit):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("force record contains non-finite entries")
        if not self.tolerances:
            raise ValueError("force record needs tolerance metadata")


def _check_force_trajectory(trajectory):
    if len(trajectory) < 4:
        raise TrajectoryTooShort(
            "force evaluation needs at least 3 uniform steps (4 states)")
    for s in trajectory.states:
        if s.omega.n_atoms:
            raise AtomsPresent(
                "velocity is unbounded at atoms; represent them as blobs")


def _functional_series(solver, trajectory, fields, h=None):
    """F_u for each field: d/dt int u.Phi - int (u.grad)Phi.u on a shared
    collar grid.  Returns (F, a, tolerances)."""
    dom = solver.domain
    index = fields[0].component
    d0, d1 = fields[0].band
    radii = [s.omega.blob_rad.min() for s in trajectory.states
             if len(s.omega.blob_rad)]
    if h is None:
        h = (d1 - d0) / 12.0
        if radii:
            h = min(h, float(min(radii)) / 6.0)
    pts, w = _region_grid(dom, index, d1, h)
    xy = geo.as_xy(pts)
    phis = [f(xy) for f in fields]
    jacs = [f.jacobian(xy) for f in fields]
    n_t = len(trajectory)
    a = np.empty((len(fields), n_t))
    b = np.empty((len(fields), n_t))
    u2_max = 0.0
    for m, s in enumerate(trajectory.states):
        u = _velocity_on_grid(solver, s, xy)
        speed = np.hypot(u[:, 0], u[:, 1])
        live = speed >= 1e-8 * speed.max()
        u2_max = max(u2_max, float(np.sum(w * speed**2)))
        for fi in range(len(fields)):
            a[fi, m] = float(np.sum(w * np.sum(u * phis[fi], axis=1)))
            conv = np.einsum("pa,pba,pb->p", u[live], jacs[fi][live], u[live])
            b[fi, m] = float(np.sum(w[live] * conv))
    F = np.empty_like(a)
    for fi in range(len(fields)):
        F[fi] = _ddt(a[fi], trajectory.dt) - b[fi]
    jmax = max(float(np.max(np.abs(j))) for j in jacs) if jacs else 1.0
    diff_scale = float(np.max(np.abs(np.diff(a, n=2, axis=1)))) if n_t >= 3 else 0.0
    tol = {
        "grid_h": h,
        "dt": trajectory.dt,
        "band": (d0, d1),
        "differencing": "centered-2/one-sided-2",
        "quad_error_scale": (h / (d1 - d0)) ** 2 * u2_max * jmax,
        "time_error_scale": diff_scale,
    }
    return F, a, tol


def net_force(solver, trajectory, index, h=None, n_audit=3, seed=7):
    """Net pressure force across component `index` along a trajectory.

    Returns a ForceRecord with f[t] = -(F_u(Phi^1), F_u(Phi^2)); for smooth
    flow this is the contour integral of p n-hat (fluid-exterior normal),
    i.e. the force the flow transmits to the obstacle.  Random tangent
    fields provide the F_u ~ 0 audit."""
    _require_same_domain(solver, trajectory)
    _check_force_trajectory(trajectory)
    dom = solver.domain
    fields = [test_field(dom, index, "Fx"), test_field(dom, index, "Fy")]
    rng = np.random.default_rng(seed)
    audits = [random_tangent_field(dom, rng, name=f"tangent_{k}")
              for k in range(n_audit)]
    for fld in audits:
        fld.component = index
        fld.band = fields[0].band
    F, _, tol = _functional_series(solver, trajectory, fields + audits, h=h)
    return ForceRecord(
        t=trajectory.times(), component=index,
        f=-F[:2].T, functional=F[:2], audit=F[2:], tolerances=tol,
    )


def torque(solver, trajectory, index, h=None):
    """Net torque across component `index` about its centroid: -F_u(Psi_i)."""
    _require_same_domain(solver, trajectory)
    _check_force_trajectory(trajectory)
    fields = [test_field(solver.domain, index, "Torque")]
    F, _, tol = _functional_series(solver, trajectory, fields, h=h)
    return ForceRecord(
        t=trajectory.times(), component=index,
        tau=-F[0], functional=F, tolerances=tol,
    )


# ---------------------------------------------------------------------------
# the velocity-side identity (audit of the double integral)


def stress_identity_gap(solver, omega, gamma, testfn, h=None):
    """Both sides of the stress identity

        int (u x u) : grad perp-grad theta dx
            = -iint H_theta dω dω - sum_j alpha_j int X_j . grad theta dω

    by direct grid quadrature of the left side over the support of
    grad theta.  Returns (lhs, rhs, gap)."""
    if testfn.grad_support is None:
        raise ValueError("test function must declare its gradient support")
    dom = solver.domain
    if testfn.domain is not dom or omega.domain is not dom:
        raise IncompatibleDomain("identity pieces built on another domain")
    x0, y0, x1, y1 = testfn.grad_support
    span = max(x1 - x0, y1 - y0)
    if h is None:
        h = span / 220.0
        if len(omega.blob_rad):
            h = min(h, float(omega.blob_rad.min()) / 6.0)
    nx = max(int(np.ceil((x1 - x0) / h)), 2)
    ny = max(int(np.ceil((y1 - y0) / h)), 2)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    xs = x0 + (np.arange(nx) + 0.5) * hx
    ys = y0 + (np.arange(ny) + 0.5) * hy
    z = (xs[None, :] + 1j * ys[:, None]).ravel()
    frac = vor.fluid_fractions(dom, z, hx, hy)
    keep = frac > 0.0
    z, frac = z[keep], frac[keep]
    w = frac * hx * hy
    inside = dom.contains(z)
    if np.any(~inside):
        zo = z[~inside]
        _, _, foot, d = dom.project(zo)
        unit = (foot - zo) / np.where(d == 0.0, 1.0, d)
        cand = foot + unit * 0.25 * min(hx, hy)
        ok = dom.contains(cand)
        znew = z.copy()
        znew[~inside] = np.where(ok, cand, np.nan)
        sel = ~np.isnan(znew)
        z, w = znew[sel], w[sel]
    xy = geo.as_xy(z)
    hess = testfn.hessian(xy)
    m = np.empty_like(hess)          # M[p,a,b] = d_a (perp-grad theta)_b
    m[:, :, 0] = -hess[:, :, 1]
    m[:, :, 1] = hess[:, :, 0]
    u = np.empty((z.size, 2))
    ufield = rec.VelocityField(solver, omega, gamma)
    for lo in range(0, z.size, _EVAL_CHUNK):
        sl = slice(lo, lo + _EVAL_CHUNK)
        u[sl] = ufield(xy[sl])
    lhs = float(np.sum(w * np.einsum("pa,pab,pb->p", u, m, u)))
    alpha = rec.alpha_coefficients(solver, omega, gamma)
    rhs = -(pair_interaction(solver, omega, testfn.gradient)
            + _completion_flux(solver, omega, testfn.gradient, alpha))
    return lhs, rhs, lhs - rhs
