"""Velocity reconstruction: the vorticity-induced field and its circulation
completion.

The induced field K[omega] is assembled from one boundary solve per measure,
not one per source: every atom, blob, and grid cell contributes a free-space
stream in physical coordinates, and since blobs are radial and grid cells are
modeled as equal-mass uniform disks, their trace on the boundary equals that
of a point source at their center (mean value property).  The boundary solve
therefore sees only weighted point logs — regularized by image subtraction
when a source sits close to a component — and the correction density for the
whole measure is obtained in a single factorized backsolve.

Free-space velocities use the closed-form cumulative mass profile m(r), so
the field is finite and smooth across blob interiors:

    u_free(x) = m(|x-c|) (x-c)^perp / (2 pi |x-c|^2).

The reconstructed field is u = K[omega] + sum_j alpha_j X_j with
alpha_j = gamma_j + integral of w_j against omega.
"""

from __future__ import annotations

import numpy as np

from . import geometry as geo
from . import potential as pot
from . import vorticity as vor
from .errors import EvaluationAtAtom, InconsistentModes

_2PI = 2.0 * np.pi

# pairwise work per evaluation chunk (targets x sources)
_CHUNK_PAIRS = 40_000_000

_KIND_POINT, _KIND_BLOB, _KIND_DISK = 0, 1, 2


def _mass_within(r, m, rad, kind):
    """Cumulative mass of one source at distance r (vectorized over pairs)."""
    if kind == _KIND_POINT:
        return np.broadcast_to(m, np.broadcast_shapes(r.shape, m.shape))
    s2 = np.clip(r / rad, 0.0, 1.0) ** 2
    if kind == _KIND_BLOB:
        return m * (1.0 - (1.0 - s2) ** 4)
    return m * s2  # uniform disk


class _KOmegaField:
    """Callable K[omega] field; one boundary solve at construction."""

    def __init__(self, solver, omega):
        self.solver = solver
        self.omega = omega
        dom = solver.domain

        ys, ms, rads, kinds = [], [], [], []

        def add(z, m, rad, kind):
            ys.append(np.atleast_1d(z).astype(complex))
            ms.append(np.atleast_1d(m).astype(float))
            rads.append(np.broadcast_to(np.asarray(rad, dtype=float), ys[-1].shape).copy())
            kinds.append(np.full(ys[-1].shape, kind, dtype=np.int8))

        if omega.n_atoms:
            add(omega.atom_pos, omega.atom_str, 0.0, _KIND_POINT)
        if len(omega.blob_pos):
            add(omega.blob_pos, omega.blob_str, omega.blob_rad, _KIND_BLOB)
        if omega.grid is not None:
            wg = omega.grid.weights()
            live = wg != 0
            if np.any(live):
                zc = omega.grid.centers()[live]
                r_eq = np.sqrt(omega.grid.frac[live] * omega.grid.cell_area / np.pi)
                # keep the equivalent disks strictly inside the fluid
                r_eq = np.minimum(r_eq, 0.95 * dom.distance(zc))
                add(zc, wg[live], r_eq, _KIND_DISK)

        if ys:
            y = np.concatenate(ys)
            m = np.concatenate(ms)
            rad = np.concatenate(rads)
            kind = np.concatenate(kinds)
        else:
            y = np.zeros(0, dtype=complex)
            m = rad = np.zeros(0)
            kind = np.zeros(0, dtype=np.int8)

        # boundary data: weighted point logs (+ images for near sources)
        N = solver.ws.n_nodes
        g = np.zeros(N)
        pole_total = 0.0
        img_y, img_m = [], []
        step = max(1, 4096)
        for lo in range(0, y.size, step):
            sl = slice(lo, min(lo + step, y.size))
            pts, coeffs, consts, pole = solver.source_terms(y[sl])
            g += solver.completion_data(pts, coeffs, consts, pole) @ m[sl]
            pole_total += float(m[sl] @ pole)
            imaged = coeffs[:, 1] != 0.0
            if np.any(imaged):
                img_y.append(pts[imaged, 1])
                img_m.append(m[sl][imaged] * coeffs[imaged, 1])
        if img_y:
            y = np.concatenate([y] + img_y)
            m = np.concatenate([m] + img_m)
            rad = np.concatenate([rad, np.zeros(sum(v.size for v in img_y))])
            kind = np.concatenate([kind, np.full(sum(v.size for v in img_y), _KIND_POINT)])

        self.src_y, self.src_m, self.src_rad, self.src_kind = y, m, rad, kind
        self.pole = pole_total
        self.mu, self.a = solver.dirichlet_solve(g)

    def _free_gradient(self, z):
        """Complex stream gradient of the free-space + image parts."""
        g = np.zeros(z.shape, dtype=complex)
        if not self.src_y.size:
            return g
        stride = max(1, _CHUNK_PAIRS // max(z.size, 1))
        for lo in range(0, self.src_y.size, stride):
            sl = slice(lo, min(lo + stride, self.src_y.size))
            d = z[:, None] - self.src_y[None, sl]
            r = np.abs(d)
            mass = np.zeros_like(r)
            for kind in (_KIND_POINT, _KIND_BLOB, _KIND_DISK):
                pick = self.src_kind[sl] == kind
                if np.any(pick):
                    mass[:, pick] = _mass_within(
                        r[:, pick], self.src_m[sl][pick], self.src_rad[sl][pick], kind
                    )
            with np.errstate(invalid="ignore", divide="ignore"):
                term = np.where(r > 0.0, mass * d / np.where(r == 0.0, 1.0, r) ** 2, 0.0)
            g += term.sum(axis=1) / _2PI
        return g

    def complex_velocity(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        self.solver.require_inside(z)
        grad = self._free_gradient(z)
        W = self.solver.to_w(z)
        gw = np.conj(self.solver.ws.cauchy(self.mu, W, derivative=True))
        if self.a.size:
            gw = gw + self.solver.ws.log_terms(self.a, W, gradient=True)
        if self.solver.domain.kind == geo.EXTERIOR:
            gw = gw + self.pole / np.conj(W)
        grad = grad + self.solver.pullback_factor(z) * gw
        return 1j * grad

    def __call__(self, pts):
        z = np.atleast_1d(geo.as_complex(pts))
        return geo.as_xy(self.complex_velocity(z))


def biot_savart_field(solver, omega):
    """K[omega] as a reusable field object (one boundary solve, cached)."""
    cache = getattr(omega, "_komega_cache", None)
    if cache is None:
        cache = {}
        omega._komega_cache = cache
    key = id(solver)
    if key not in cache:
        cache[key] = _KOmegaField(solver, omega)
    return cache[key]


def _guard_atoms(omega, z, scale):
    if not omega.n_atoms:
        return
    d = np.abs(z[:, None] - omega.atom_pos[None, :])
    if np.any(d < 1e-13 * max(scale, 1.0)):
        raise EvaluationAtAtom("velocity is singular at an atom position")


def biot_savart_velocity(solver, omega, x):
    """K[omega](x): the divergence-free field induced by the measure alone
    (zero circulation around every component)."""
    z = np.atleast_1d(geo.as_complex(x))
    _guard_atoms(omega, z, solver.domain.scale)
    u = biot_savart_field(solver, omega)(z)
    return u[0] if np.ndim(x) == 1 and np.shape(x) == (2,) else u


def _gamma_array(solver, gamma):
    vals = gamma.as_array() if isinstance(gamma, vor.CirculationVector) else np.atleast_1d(
        np.asarray(gamma, dtype=float)
    )
    want = solver.domain.n_components
    if vals.shape != (want,):
        raise ValueError(
            f"need one circulation per boundary component ({want}), got {vals.shape}"
        )
    return vals


def alpha_coefficients(solver, omega, gamma):
    """Coefficients of the circulation basis fields:
    alpha_j = gamma_j + integral of the j-th harmonic measure against omega."""
    vals = _gamma_array(solver, gamma)
    out = np.zeros(len(solver.circulation_indices))
    for slot, j in enumerate(solver.circulation_indices):
        wj = vor.integrate_against(
            omega, lambda xy: np.atleast_1d(pot.harmonic_measure(solver, j, xy))
        )
        out[slot] = vals[j] + wj
    return out


class VelocityField:
    """u = K[omega] + sum_j alpha_j X_j, evaluated in batch.

    The circulation part is folded into a single representation, so each
    call costs one free-space sum plus one boundary evaluation.
    """

    def __init__(self, solver, omega, gamma, alpha=None):
        self.solver = solver
        self.omega = omega
        self.gamma = gamma if isinstance(gamma, vor.CirculationVector) else vor.CirculationVector(gamma)
        self.alpha = alpha_coefficients(solver, omega, self.gamma) if alpha is None else np.asarray(alpha, dtype=float)
        self._komega = biot_savart_field(solver, omega)
        self._rep = None
        if np.any(self.alpha != 0.0):
            mu = a = None
            logs = []
            for coef, rep in zip(self.alpha, solver.fields):
                mu = coef * rep.mu if mu is None else mu + coef * rep.mu
                a = coef * rep.a if a is None else a + coef * rep.a
                logs += [(p, coef * c) for p, c in rep.logs if coef != 0.0]
            self._rep = pot.HarmonicRep(mu, a, tuple(logs), 0.0)

    def complex_velocity(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        u = self._komega.complex_velocity(z)
        if self._rep is not None:
            W = self.solver.to_w(z)
            F = pot._analytic_deriv(self.solver.ws, self._rep, W)
            u = u + self.solver.pullback_factor(z) * (1j * np.conj(F))
        return u

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        z = np.atleast_1d(geo.as_complex(pts))
        _guard_atoms(self.omega, z, self.solver.domain.scale)
        u = geo.as_xy(self.complex_velocity(z))
        return u[0] if pts.shape == (2,) else u


def reconstruct_velocity(solver, omega, gamma):
    """The unique div-free field with vorticity omega, the given boundary
    circulations, tangent to the boundary (and decaying at infinity on
    exterior domains)."""
    return VelocityField(solver, omega, gamma)


# ---------------------------------------------------------------------------
# circulation recovery


def _line_circulations(solver, u, eps, n_nodes):
    dom = solver.domain
    out = np.zeros(dom.n_components)
    M = n_nodes
    t = _2PI * np.arange(M) / M
    for j, comp in enumerate(dom.components):
        zp = comp.curve.dz(t)
        z2 = comp.curve.d2z(t)
        sp = np.abs(zp)
        kappa = np.imag(np.conj(zp) * z2) / sp**3
        sign = dom.fluid_normal_sign(j)
        nrm = sign * (-1j) * zp / sp
        z_off = comp.curve.z(t) - eps * nrm
        dz_off = zp * (1.0 - eps * sign * kappa)
        uc = u.complex_velocity(z_off) if hasattr(u, "complex_velocity") else geo.as_complex(
            u(geo.as_xy(z_off))
        )
        out[j] = np.sum(np.real(np.conj(uc) * dz_off)) * _2PI / M
    return out


def _weak_circulations(solver, u, omega):
    dom = solver.domain
    out = np.zeros(dom.n_components)
    d1 = 0.35 * min(dom.min_gap, dom.scale)
    d0 = 0.15 * d1
    for j in range(dom.n_components):
        ramp = geo.Ramp(d0, d1, descending=True)
        tube = geo.TubeQuadrature(dom, j, d0, d1, nt=max(solver.n, 256), nd=24)
        uv = u(geo.as_xy(tube.points))
        uc = uv[:, 0] + 1j * uv[:, 1]
        grad_phi = ramp.d(tube.depth) * (-tube.n_fluid)  # grad of phi_j = ramp(dist)
        flux = float(np.sum(np.real(np.conj(uc) * (1j * grad_phi)) * tube.weights))

        def phi(xy, j=j, ramp=ramp):
            return ramp(dom.components[j].distance(geo.as_complex(xy)))

        mass = vor.integrate_against(omega, phi) if omega is not None else 0.0
        out[j] = dom.fluid_normal_sign(j) * (flux + mass)
    return out


def circulations_from_velocity(solver, u, omega=None, mode="line", eps=1e-6,
                               n_nodes=None, audit_tol=1e-4):
    """Circulation of u around every boundary component, counterclockwise.

    mode "line" integrates u along curves offset eps into the fluid (the
    close-evaluation machinery keeps this accurate at tiny eps).  mode "weak"
    uses localized test functions: gamma_j from the flux of u against a
    collar gradient plus the vorticity mass weighted by the localizer — this
    needs omega (taken from u when it is a VelocityField).  mode "both" runs
    the two and insists they agree to audit_tol.
    """
    if omega is None and isinstance(u, VelocityField):
        omega = u.omega
    if n_nodes is None:
        n_nodes = max(2 * solver.n, 256)
    eps_abs = eps * solver.domain.scale

    if mode not in ("line", "weak", "both"):
        raise ValueError("mode must be 'line', 'weak', or 'both'")
    line = weak = None
    if mode in ("line", "both"):
        line = _line_circulations(solver, u, eps_abs, n_nodes)
    if mode in ("weak", "both"):
        if omega is None:
            raise ValueError("weak mode needs the vorticity measure")
        if omega.n_atoms:
            raise EvaluationAtAtom(
                "weak-mode collar quadrature does not handle bare atoms"
            )
        weak = _weak_circulations(solver, u, omega)
    if mode == "both":
        gap = float(np.max(np.abs(line - weak)))
        if gap > audit_tol:
            raise InconsistentModes(
                f"line and weak circulations disagree by {gap:.3e} (> {audit_tol:g})"
            )
    return vor.CirculationVector(line if line is not None else weak)
