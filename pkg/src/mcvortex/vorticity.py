"""Bounded-measure vorticity: point atoms, radial blobs, gridded densities.

A measure is any combination of the three parts.  Atoms integrate test
functions exactly; blobs carry a fixed compactly supported C^2 radial
profile (the same polynomial bump as the mollifier, rescaled to the blob
radius) and integrate by Gauss-Legendre-in-radius / trapezoid-in-angle
quadrature; grids are uniform Cartesian densities clipped to the fluid
domain with cut-cell area weights.

Mollification follows the chi_n * eta_n construction: sources are cut off
within 1/n of the boundary (and beyond radius n, for exterior domains) and
convolved with the radius-1/(2n) mollifier onto a grid.  Each source's
discrete stamp is normalized to unit lattice mass, so total variation is
contracted exactly and deep atoms keep their mass to rounding error rather
than to quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import (
    PointOutsideDomain,
    ResolutionTooLow,
    SupportTooClose,
    UnresolvedSingularity,
)

_2PI = 2.0 * np.pi

GRID_FORMAT_VERSION = 1

# blob profile: density = c/(4 delta^2) * (1 - (r/delta)^2)^3 * strength,
# c = 16/pi makes the unit-strength blob have unit mass
_PROFILE_C = 16.0 / np.pi


def blob_density(r, strength, radius):
    """Radial blob density at distance r from the center."""
    r = np.asarray(r, dtype=float)
    s2 = np.clip(r / radius, 0.0, 1.0) ** 2
    return strength * (_PROFILE_C / (4.0 * radius**2)) * np.where(
        r < radius, (1.0 - s2) ** 3, 0.0
    )


def blob_mass_within(r, strength, radius):
    """Mass of the blob inside distance r of its center (closed form)."""
    r = np.asarray(r, dtype=float)
    s2 = np.clip(r / radius, 0.0, 1.0) ** 2
    return strength * (1.0 - (1.0 - s2) ** 4)


def _blob_rule(nr, ntheta):
    """Reference quadrature on the unit disk against the blob profile:
    nodes z_q (complex) and weights summing to exactly 1."""
    x, w = np.polynomial.legendre.leggauss(nr)
    r = 0.5 * (x + 1.0)
    wr = 0.5 * w * r * _PROFILE_C / 4.0 * (1.0 - r**2) ** 3 * _2PI / ntheta
    th = _2PI * np.arange(ntheta) / ntheta
    z = (r[:, None] * np.exp(1j * th)[None, :]).ravel()
    wq = np.repeat(wr, ntheta)
    return z, wq / wq.sum()  # renormalize away the O(eps) GL residue


class CirculationVector:
    """Boundary circulations, one entry per boundary component.

    Exterior domains carry one free circulation per obstacle.  Bounded
    domains carry the outer value at index 0 (taken counterclockwise, like
    all the others) followed by the hole values; the outer entry is fixed
    by the others and the vorticity mass, but it is stored so the vector
    reads off against the component list directly.
    """

    def __init__(self, values):
        vals = np.atleast_1d(np.asarray(values, dtype=float))
        if vals.ndim != 1 or not np.all(np.isfinite(vals)):
            raise ValueError("circulations must be a finite 1-d vector")
        self.values = vals.copy()
        self.values.flags.writeable = False

    @classmethod
    def zeros(cls, domain):
        return cls(np.zeros(domain.n_components))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, j):
        return float(self.values[j])

    def __iter__(self):
        return iter(self.values.tolist())

    def __repr__(self):
        return f"CirculationVector({self.values.tolist()})"

    def as_array(self):
        return np.array(self.values)

    def total(self):
        return float(np.sum(self.values))


@dataclass(frozen=True)
class GridDensity:
    """Uniform Cartesian density: values per cell, fluid area fractions."""

    bbox: tuple  # (x0, y0, x1, y1)
    values: np.ndarray  # (ny, nx)
    frac: np.ndarray  # (ny, nx) fluid area fraction in [0, 1]

    @property
    def nx(self):
        return self.values.shape[1]

    @property
    def ny(self):
        return self.values.shape[0]

    @property
    def hx(self):
        return (self.bbox[2] - self.bbox[0]) / self.nx

    @property
    def hy(self):
        return (self.bbox[3] - self.bbox[1]) / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    def centers(self):
        x0, y0, _, _ = self.bbox
        cx = x0 + self.hx * (np.arange(self.nx) + 0.5)
        cy = y0 + self.hy * (np.arange(self.ny) + 0.5)
        return cx[None, :] + 1j * cy[:, None]

    def weights(self):
        """Signed cell masses: value * fluid fraction * cell area."""
        return self.values * self.frac * self.cell_area

    def coarsened(self):
        """2x2 block average (for quadrature error estimates); trims odd edges."""
        ny, nx = (self.ny // 2) * 2, (self.nx // 2) * 2
        if ny < 2 or nx < 2:
            return None
        v = self.values[:ny, :nx]
        f = self.frac[:ny, :nx]
        m = v * f  # conserve cell masses, not raw values
        m2 = m.reshape(ny // 2, 2, nx // 2, 2).mean(axis=(1, 3))
        f2 = f.reshape(ny // 2, 2, nx // 2, 2).mean(axis=(1, 3))
        x0, y0 = self.bbox[0], self.bbox[1]
        bbox = (x0, y0, x0 + nx * self.hx, y0 + ny * self.hy)
        with np.errstate(invalid="ignore", divide="ignore"):
            v2 = np.where(f2 > 0, m2 / np.where(f2 == 0, 1.0, f2), 0.0)
        return GridDensity(bbox, v2, f2)


def fluid_fractions(domain, centers, hx, hy, sub=6):
    """Fraction of each h x h cell inside the fluid; subsampled on cut cells."""
    z = np.asarray(centers)
    shape = z.shape
    zf = z.ravel()
    d = domain.distance(zf)
    inside = domain.contains(zf)
    half_diag = 0.5 * np.hypot(hx, hy)
    frac = np.where(inside, 1.0, 0.0)
    cut = d <= half_diag
    if np.any(cut):
        # midpoint subsamples of the cut cells
        ox = (np.arange(sub) + 0.5) / sub - 0.5
        off = (ox[None, :] * hx + 1j * ox[:, None] * hy).ravel()
        pts = zf[cut][:, None] + off[None, :]
        ins = domain.contains(pts.ravel()).reshape(pts.shape)
        frac[cut] = ins.mean(axis=1)
    return frac.reshape(shape)


def grid_from_function(domain, bbox, nx, ny, fn):
    """Sample a density fn (vectorized over (n,2) points) onto a cut grid."""
    g = GridDensity(tuple(float(v) for v in bbox), np.zeros((ny, nx)), np.ones((ny, nx)))
    z = g.centers()
    frac = fluid_fractions(domain, z, g.hx, g.hy)
    vals = np.zeros(z.shape)
    live = frac > 0
    if np.any(live):
        vals[live] = np.asarray(fn(geo.as_xy(z[live])), dtype=float)
    return GridDensity(g.bbox, vals, frac)


class VorticityMeasure:
    """Immutable vorticity measure on a fixed fluid domain.

    atoms: iterable of (position, strength); blobs: iterable of
    (position, strength, radius); grid: GridDensity or None.  Construction
    rejects support closer than `support_margin` to the boundary.
    """

    def __init__(self, domain, atoms=(), blobs=(), grid=None, support_margin=1e-3):
        self.domain = domain
        self.support_margin = float(support_margin)

        apos, astr = [], []
        for pos, s in atoms:
            apos.append(geo.as_complex(pos))
            astr.append(float(s))
        self.atom_pos = np.asarray(apos, dtype=complex)
        self.atom_str = np.asarray(astr, dtype=float)

        bpos, bstr, brad = [], [], []
        for pos, s, rad in blobs:
            if not rad > 0:
                raise ValueError("blob radius must be positive")
            bpos.append(geo.as_complex(pos))
            bstr.append(float(s))
            brad.append(float(rad))
        self.blob_pos = np.asarray(bpos, dtype=complex)
        self.blob_str = np.asarray(bstr, dtype=float)
        self.blob_rad = np.asarray(brad, dtype=float)

        self.grid = grid
        self._validate()

    def _validate(self):
        dom, margin = self.domain, self.support_margin
        for z, clearance, what in (
            (self.atom_pos, np.zeros(len(self.atom_pos)), "atom"),
            (self.blob_pos, self.blob_rad, "blob"),
        ):
            if len(z) == 0:
                continue
            if not np.all(dom.contains(z)):
                raise PointOutsideDomain(f"{what} support outside the fluid domain")
            d = dom.distance(z)
            if np.any(d <= margin + clearance):
                raise SupportTooClose(
                    f"{what} within {margin:g} of the boundary; "
                    "move the support or lower support_margin"
                )
        if self.grid is not None:
            live = (self.grid.values != 0) & (self.grid.frac > 0)
            if np.any(live):
                z = self.grid.centers()[live]
                if not np.all(dom.contains(z)):
                    raise PointOutsideDomain("grid density extends outside the fluid")
                if np.min(dom.distance(z)) <= margin:
                    raise SupportTooClose(
                        f"grid support within {margin:g} of the boundary"
                    )

    # -- basic functionals

    @property
    def n_atoms(self):
        return len(self.atom_pos)

    def total_variation(self):
        tv = float(np.sum(np.abs(self.atom_str)) + np.sum(np.abs(self.blob_str)))
        if self.grid is not None:
            tv += float(np.sum(np.abs(self.grid.weights())))
        return tv

    def support_bbox(self):
        """Bounding box (x0, y0, x1, y1) of the support, or None if empty."""
        xs, ys = [], []
        if len(self.atom_pos):
            xs += [self.atom_pos.real.min(), self.atom_pos.real.max()]
            ys += [self.atom_pos.imag.min(), self.atom_pos.imag.max()]
        if len(self.blob_pos):
            xs += [(self.blob_pos.real - self.blob_rad).min(),
                   (self.blob_pos.real + self.blob_rad).max()]
            ys += [(self.blob_pos.imag - self.blob_rad).min(),
                   (self.blob_pos.imag + self.blob_rad).max()]
        if self.grid is not None:
            live = (self.grid.values != 0) & (self.grid.frac > 0)
            if np.any(live):
                z = self.grid.centers()[live]
                hx, hy = 0.5 * self.grid.hx, 0.5 * self.grid.hy
                xs += [z.real.min() - hx, z.real.max() + hx]
                ys += [z.imag.min() - hy, z.imag.max() + hy]
        if not xs:
            return None
        return (min(xs), min(ys), max(xs), max(ys))

    def blob_quadrature(self, nr=10, ntheta=20):
        """Quadrature nodes/weights for the blob part alone."""
        if not len(self.blob_pos):
            return np.zeros(0, dtype=complex), np.zeros(0)
        zq, wq = _blob_rule(nr, ntheta)
        z = self.blob_pos[:, None] + self.blob_rad[:, None] * zq[None, :]
        w = self.blob_str[:, None] * wq[None, :]
        return z.ravel(), w.ravel()

    def smooth_quadrature(self, nr=10, ntheta=20):
        """Quadrature nodes/weights for the blob + grid parts (atoms excluded)."""
        zb, wb = self.blob_quadrature(nr, ntheta)
        zs, ws = [zb], [wb]
        if self.grid is not None:
            wg = self.grid.weights()
            live = wg != 0
            zs.append(self.grid.centers()[live])
            ws.append(wg[live])
        return np.concatenate(zs), np.concatenate(ws)


def total_mass(omega):
    """Signed total mass of the measure."""
    m = float(np.sum(omega.atom_str) + np.sum(omega.blob_str))
    if omega.grid is not None:
        m += float(np.sum(omega.grid.weights()))
    return m


def _apply(f, z):
    v = np.asarray(f(geo.as_xy(z)), dtype=float)
    if v.shape[0] != len(z):
        raise ValueError("test function must return one row per input point")
    return v


def _weighted_sum(w, v):
    return np.tensordot(w, v, axes=(0, 0))


def integrate_against(omega, f, with_error=False):
    """Integral of f against the measure; f is vectorized over (n,2) points
    and may be scalar- or vector-valued.  Atoms are exact; blobs and grids
    use quadrature, whose error is estimated against a coarser rule when
    with_error is set."""
    total = 0.0
    err = 0.0
    if omega.n_atoms:
        total = total + _weighted_sum(omega.atom_str, _apply(f, omega.atom_pos))

    zb, wb = omega.blob_quadrature()
    if len(zb):
        fine = _weighted_sum(wb, _apply(f, zb))
        total = total + fine
        if with_error:
            zc, wc = omega.blob_quadrature(nr=6, ntheta=12)
            err += float(np.max(np.abs(np.asarray(fine - _weighted_sum(wc, _apply(f, zc))))))

    if omega.grid is not None:
        wg = omega.grid.weights()
        live = wg != 0
        if np.any(live):
            fine = _weighted_sum(wg[live], _apply(f, omega.grid.centers()[live]))
            total = total + fine
            if with_error:
                g2 = omega.grid.coarsened()
                if g2 is not None:
                    w2 = g2.weights()
                    l2 = w2 != 0
                    coarse = _weighted_sum(w2[l2], _apply(f, g2.centers()[l2]))
                    err += float(np.max(np.abs(np.asarray(fine - coarse))))

    if with_error:
        return total, err
    return total


def mollify(omega, n, cells_per_radius=4):
    """Boundary cutoff followed by mollification onto a uniform grid.

    The result vanishes within 1/(2n) of the boundary (and beyond radius
    2n + 1 on exterior domains), its total variation never exceeds the
    input's, and source mass away from the cutoff collar is preserved to
    rounding error.
    """
    if cells_per_radius < 4:
        raise ResolutionTooLow(
            f"need >= 4 grid cells per mollifier radius, got {cells_per_radius}"
        )
    if n < 1:
        raise ValueError("mollification index n must be >= 1")
    radius = 0.5 / n
    h = radius / cells_per_radius

    za, wa = omega.atom_pos, omega.atom_str
    zq, wq = omega.smooth_quadrature()
    z = np.concatenate([za, zq])
    w = np.concatenate([wa, wq])
    if len(z) == 0:
        return VorticityMeasure(omega.domain, support_margin=omega.support_margin)

    chi = geo.cutoff_chi(omega.domain, n)
    w = w * chi(z)
    live = w != 0
    z, w = z[live], w[live]
    if len(z) == 0:
        return VorticityMeasure(omega.domain, support_margin=omega.support_margin)

    pad = radius + 2.0 * h
    x0, y0 = z.real.min() - pad, z.imag.min() - pad
    nx = int(np.ceil((z.real.max() + pad - x0) / h))
    ny = int(np.ceil((z.imag.max() + pad - y0) / h))
    bbox = (x0, y0, x0 + nx * h, y0 + ny * h)
    vals = np.zeros((ny, nx))
    eta = geo.mollifier_eta()

    cx = x0 + h * (np.arange(nx) + 0.5)
    cy = y0 + h * (np.arange(ny) + 0.5)
    reach = int(np.ceil(radius / h)) + 1
    for zi, wi in zip(z, w):
        ix = int((zi.real - x0) / h)
        iy = int((zi.imag - y0) / h)
        sx = slice(max(ix - reach, 0), min(ix + reach + 1, nx))
        sy = slice(max(iy - reach, 0), min(iy + reach + 1, ny))
        loc = cx[None, sx] + 1j * cy[sy, None] - zi
        stamp = eta(loc.ravel(), n).reshape(loc.shape)
        lattice_mass = stamp.sum() * h * h
        vals[sy, sx] += stamp * (wi / lattice_mass)

    grid = GridDensity(bbox, vals, np.ones_like(vals))
    margin = min(omega.support_margin, 0.5 * radius)
    return VorticityMeasure(omega.domain, grid=grid, support_margin=margin)


# ---------------------------------------------------------------------------
# H^-1 norm: L^2 norm of the induced divergence-free field


def _nested_step(h_coarse, h_target):
    return h_coarse / int(np.ceil(h_coarse / h_target))


def h_minus_one_norm(solver, omega, h=None, tail_radius=None):
    """L^2(Omega) norm of the velocity field induced by the measure alone
    (zero boundary circulations).

    Smooth parts only: atoms make the field non-square-integrable.  Exterior
    domains integrate a two-level grid inside |x| <= R and add the analytic
    tail (R/2) * contour-integral of |u|^2 at |x| = R, using the 1/|x|^2
    far-field decay.
    """
    if omega.n_atoms:
        raise UnresolvedSingularity(
            "the field of a point atom is not square integrable; mollify first"
        )
    if omega.total_variation() == 0.0:
        return 0.0

    from . import reconstruction as rec  # circular at module level

    field = rec.biot_savart_field(solver, omega)
    dom = solver.domain
    sb = omega.support_bbox()

    feature = []
    if len(omega.blob_rad):
        feature.append(float(np.min(omega.blob_rad)))
    if omega.grid is not None:
        feature.append(min(omega.grid.hx, omega.grid.hy) * 4.0)
    h_fine = h if h is not None else min(min(feature) / 5.0, dom.scale / 48.0)

    def cell_sum(z, hx, hy, skip=None):
        frac = fluid_fractions(dom, z, hx, hy)
        if skip is not None:
            frac = frac * np.where(skip(z), 0.0, 1.0)
        live = frac > 0
        zq = z[live].copy()
        # cut cells whose centers fall outside the fluid: sample just inside
        out = ~dom.contains(zq)
        if np.any(out):
            _, _, foot, d = dom.project(zq[out])
            unit = (foot - zq[out]) / np.where(d == 0, 1.0, d)
            cand = foot + unit * 0.25 * min(hx, hy)
            ok = dom.contains(cand)
            zq[out] = np.where(ok, cand, zq[out])
            keep = np.ones(zq.size, dtype=bool)
            keep[np.nonzero(out)[0][~ok]] = False
            zq, fr = zq[keep], frac[live][keep]
        else:
            fr = frac[live]
        u = field(geo.as_xy(zq))
        return float(np.sum((u**2).sum(axis=1) * fr) * hx * hy)

    def level(bbox, step, skip=None):
        x0, y0, x1, y1 = bbox
        nx = max(int(round((x1 - x0) / step)), 1)
        ny = max(int(round((y1 - y0) / step)), 1)
        cx = x0 + step * (np.arange(nx) + 0.5)
        cy = y0 + step * (np.arange(ny) + 0.5)
        return cell_sum(cx[None, :] + 1j * cy[:, None], step, step, skip=skip)

    if dom.kind == geo.BOUNDED:
        _, zb, _ = dom.components[0].curve._dense()
        pad = 2.0 * h_fine
        bbox = (zb.real.min() - pad, zb.imag.min() - pad,
                zb.real.max() + pad, zb.imag.max() + pad)
        total = level(bbox, h_fine)
        return float(np.sqrt(total))

    r_sup = max(abs(complex(sb[0], sb[1])), abs(complex(sb[2], sb[3])))
    R = tail_radius if tail_radius is not None else max(3.0 * r_sup, 6.0 * dom.scale, 8.0)
    h_c = 2.0 * R / 192.0

    # fine box around the support, snapped to the coarse lattice
    pad = max(4.0 * h_fine, 0.25 * dom.scale)
    fx0 = -R + np.floor((sb[0] - pad + R) / h_c) * h_c
    fy0 = -R + np.floor((sb[1] - pad + R) / h_c) * h_c
    fx1 = -R + np.ceil((sb[2] + pad + R) / h_c) * h_c
    fy1 = -R + np.ceil((sb[3] + pad + R) / h_c) * h_c
    fine_bbox = (fx0, fy0, fx1, fy1)
    h_f = _nested_step(h_c, h_fine)

    def in_fine(z):
        return ((z.real > fx0) & (z.real < fx1) & (z.imag > fy0) & (z.imag < fy1))

    def out_disk(z):
        return np.abs(z) > R

    total = level((-R, -R, R, R), h_c, skip=lambda z: in_fine(z) | out_disk(z))
    total += level(fine_bbox, h_f, skip=out_disk)

    th = _2PI * np.arange(256) / 256.0
    u_ring = field(geo.as_xy(R * np.exp(1j * th)))
    tail = np.pi * R**2 * float(np.mean((u_ring**2).sum(axis=1)))
    return float(np.sqrt(total + tail))


# ---------------------------------------------------------------------------
# serialization


def write_measure_csv(path, omega):
    """CSV blocks: '# atoms' (x,y,strength) then '# blobs' (x,y,strength,radius).
    The grid part, if any, is written separately (write_grid)."""
    lines = ["# atoms", "x,y,strength"]
    for z, s in zip(omega.atom_pos, omega.atom_str):
        lines.append(f"{z.real:.17g},{z.imag:.17g},{s:.17g}")
    lines += ["# blobs", "x,y,strength,radius"]
    for z, s, r in zip(omega.blob_pos, omega.blob_str, omega.blob_rad):
        lines.append(f"{z.real:.17g},{z.imag:.17g},{s:.17g},{r:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_measure_csv(domain, path, grid=None, support_margin=1e-3):
    """Inverse of write_measure_csv; an optional grid part can be attached."""
    atoms, blobs = [], []
    section = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                name = line.lstrip("#").strip().lower()
                if name not in ("atoms", "blobs"):
                    raise ValueError(f"unknown measure section {name!r}")
                section = name
                continue
            if line.lower().startswith("x,"):
                continue
            vals = [float(v) for v in line.split(",")]
            if section == "atoms":
                if len(vals) != 3:
                    raise ValueError("atom rows need x,y,strength")
                atoms.append(((vals[0], vals[1]), vals[2]))
            elif section == "blobs":
                if len(vals) != 4:
                    raise ValueError("blob rows need x,y,strength,radius")
                blobs.append(((vals[0], vals[1]), vals[2], vals[3]))
            else:
                raise ValueError("data row before any '# atoms'/'# blobs' header")
    return VorticityMeasure(domain, atoms=atoms, blobs=blobs, grid=grid,
                            support_margin=support_margin)


def write_grid(path, grid):
    """Binary grid snapshot: bbox/nx/ny header plus value and fraction arrays."""
    np.savez_compressed(
        path,
        format_version=np.int64(GRID_FORMAT_VERSION),
        bbox=np.asarray(grid.bbox, dtype=float),
        nx=np.int64(grid.nx),
        ny=np.int64(grid.ny),
        values=grid.values,
        frac=grid.frac,
    )


def read_grid(path):
    with np.load(path) as npz:
        if int(npz["format_version"]) != GRID_FORMAT_VERSION:
            raise ValueError("unsupported grid format version")
        bbox = tuple(float(v) for v in npz["bbox"])
        values = np.array(npz["values"])
        frac = np.array(npz["frac"])
        if values.shape != (int(npz["ny"]), int(npz["nx"])):
            raise ValueError("grid header does not match array shape")
    return GridDensity(bbox, values, frac)
