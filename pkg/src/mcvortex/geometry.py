"""Planar domains bounded by smooth closed curves.

Two domain kinds are supported: the exterior of k >= 1 disjoint smooth
obstacles (the flow fills the unbounded complement) and a bounded region with
k >= 0 holes.  Curves are represented by spectrally accurate periodic
parametrizations; every derived quantity (tangents, normals, curvature,
quadrature weights, nearest-point projections) comes from the parametrization,
not from polygonal approximations.

Orientation conventions.  Each component curve is stored counterclockwise.
`boundary_quadrature` reports the counterclockwise tangent and the
curve-outward normal of the standalone curve.  A `Domain` assigns fluid roles:
on obstacle/hole components the fluid-exterior normal is the curve-inward one
and the circulation tangent stays counterclockwise; on an outer boundary the
fluid-exterior normal is curve-outward and the circulation tangent tau =
-n^perp is clockwise.  Here (a, b)^perp = (-b, a).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    HoleOutsideOuterBoundary,
    NonSimpleCurve,
    OriginNotInvertible,
    OverlappingObstacles,
    TooFewNodes,
)

_TWO_PI = 2.0 * np.pi


def as_complex(points):
    """Coerce (2,), (n,2) real or complex input to a complex array."""
    a = np.asarray(points)
    if np.iscomplexobj(a):
        return a.astype(np.complex128)
    if a.ndim == 1 and a.shape[0] == 2:
        return np.complex128(a[0] + 1j * a[1])
    if a.ndim == 2 and a.shape[1] == 2:
        return a[:, 0] + 1j * a[:, 1]
    raise ValueError(f"expected points of shape (2,) or (n,2), got {a.shape}")


def as_xy(z):
    """Complex array -> (n,2) real array (scalar -> (2,))."""
    z = np.asarray(z, dtype=np.complex128)
    if z.ndim == 0:
        return np.array([z.real, z.imag])
    return np.stack([z.real, z.imag], axis=-1)


def perp(v):
    """(a,b) -> (-b,a) for (..,2) arrays; complex arrays -> i*v."""
    v = np.asarray(v)
    if np.iscomplexobj(v):
        return 1j * v
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def inversion(points):
    """The involutive conformal map x -> (x1, -x2)/|x|^2, i.e. z -> 1/z.

    Maps the exterior of a region containing the origin onto a punctured
    bounded region; infinity corresponds to the origin.

    Raises
    ------
    OriginNotInvertible
        If any input point is (numerically) the origin.
    """
    z = as_complex(points)
    if np.any(np.abs(z) < 1e-300):
        raise OriginNotInvertible("inversion is singular at the origin")
    w = 1.0 / z
    if np.iscomplexobj(np.asarray(points)) or (
        isinstance(points, np.ndarray) and points.dtype.kind == "c"
    ):
        return w
    return as_xy(w)


# ---------------------------------------------------------------------------
# curves


class Curve:
    """Closed counterclockwise curve z(t), t in [0, 2pi)."""

    is_circle = False

    def z(self, t):
        raise NotImplementedError

    def dz(self, t):
        raise NotImplementedError

    def d2z(self, t):
        raise NotImplementedError

    def descriptor(self):
        """Canonical tuple used for hashing and cache keys."""
        raise NotImplementedError

    # dense samples reused by projections and winding tests
    def _dense(self, m=512):
        t = np.linspace(0.0, _TWO_PI, m, endpoint=False)
        return t, self.z(t), self.dz(t)


class Circle(Curve):
    is_circle = True

    def __init__(self, center, radius):
        if radius <= 0:
            raise NonSimpleCurve("circle radius must be positive")
        self.center = complex(as_complex(center))
        self.radius = float(radius)

    def z(self, t):
        return self.center + self.radius * np.exp(1j * np.asarray(t, dtype=float))

    def dz(self, t):
        return 1j * self.radius * np.exp(1j * np.asarray(t, dtype=float))

    def d2z(self, t):
        return -self.radius * np.exp(1j * np.asarray(t, dtype=float))

    def descriptor(self):
        return ("circle", round(self.center.real, 14), round(self.center.imag, 14),
                round(self.radius, 14))


class Ellipse(Curve):
    def __init__(self, center, semi_axes, angle=0.0):
        a, b = float(semi_axes[0]), float(semi_axes[1])
        if a <= 0 or b <= 0:
            raise NonSimpleCurve("ellipse semi-axes must be positive")
        self.center = complex(as_complex(center))
        self.a, self.b = a, b
        self.angle = float(angle)
        self._rot = np.exp(1j * self.angle)

    def z(self, t):
        t = np.asarray(t, dtype=float)
        return self.center + self._rot * (self.a * np.cos(t) + 1j * self.b * np.sin(t))

    def dz(self, t):
        t = np.asarray(t, dtype=float)
        return self._rot * (-self.a * np.sin(t) + 1j * self.b * np.cos(t))

    def d2z(self, t):
        t = np.asarray(t, dtype=float)
        return self._rot * (-self.a * np.cos(t) - 1j * self.b * np.sin(t))

    def descriptor(self):
        return ("ellipse", round(self.center.real, 14), round(self.center.imag, 14),
                round(self.a, 14), round(self.b, 14), round(self.angle, 14))


class PointCurve(Curve):
    """Curve through equispaced-in-parameter sample points, trigonometric
    interpolation in between.  Samples must resolve the curve; the spacing
    health check in BoundaryComponent guards against wild inputs."""

    def __init__(self, points):
        p = as_complex(points)
        if p.ndim != 1 or p.size < 8:
            raise TooFewNodes("a point curve needs at least 8 sample points")
        # drop an explicitly repeated closing point
        if abs(p[-1] - p[0]) < 1e-13 * max(1.0, np.max(np.abs(p))):
            p = p[:-1]
        if np.any(np.abs(np.diff(p, append=p[:1])) == 0.0):
            raise NonSimpleCurve("coincident consecutive points")
        # normalize to counterclockwise
        area2 = np.sum(np.imag(np.conj(p) * np.roll(p, -1)))
        if area2 < 0:
            p = p[::-1].copy()
        self.points = p
        self._coef = np.fft.fft(p) / p.size
        self._k = np.fft.fftfreq(p.size, d=1.0 / p.size)
        # zero the unmatched Nyquist mode derivative for even sizes
        if p.size % 2 == 0:
            self._k_deriv = self._k.copy()
            self._k_deriv[p.size // 2] = 0.0
        else:
            self._k_deriv = self._k

    def _eval(self, t, order):
        shape = np.shape(t)
        t = np.atleast_1d(np.asarray(t, dtype=float)).ravel()
        k = self._k_deriv if order > 0 else self._k
        coef = self._coef * (1j * k) ** order if order else self._coef
        # direct trigonometric sum: fine for the sizes used here
        out = np.exp(1j * np.outer(t, self._k)) @ coef
        return out.reshape(shape) if shape else out[0]

    def z(self, t):
        return self._eval(t, 0)

    def dz(self, t):
        return self._eval(t, 1)

    def d2z(self, t):
        return self._eval(t, 2)

    def descriptor(self):
        return ("points",) + tuple(
            (round(v.real, 12), round(v.imag, 12)) for v in self.points
        )


def _segments_intersect(a0, a1, b0, b1):
    def orient(p, q, r):
        return np.sign(np.imag(np.conj(q - p) * (r - p)))

    return (
        orient(a0, a1, b0) * orient(a0, a1, b1) < 0
        and orient(b0, b1, a0) * orient(b0, b1, a1) < 0
    )


class BoundaryComponent:
    """One closed boundary curve plus cached geometric data."""

    def __init__(self, curve, name=None, check_simple=True, spacing_ratio=4.0):
        self.curve = curve
        self.name = name
        m = 512
        self._t_dense, self._z_dense, self._dz_dense = curve._dense(m)
        sp = np.abs(self._dz_dense)
        if np.min(sp) < 1e-12 * np.max(sp):
            raise NonSimpleCurve("parametrization speed vanishes")
        ratio = np.max(sp) / np.min(sp)
        if ratio > spacing_ratio:
            raise NonSimpleCurve(
                f"arclength spacing ratio {ratio:.2f} exceeds {spacing_ratio}"
            )
        if check_simple and not curve.is_circle:
            self._check_simple()
        self.perimeter = _TWO_PI * np.mean(sp)
        self.centroid = self._area_centroid()

    def _check_simple(self):
        z = self._z_dense[::4]  # 128 segments is plenty for smooth curves
        n = z.size
        for i in range(n):
            a0, a1 = z[i], z[(i + 1) % n]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_intersect(a0, a1, z[j], z[(j + 1) % n]):
                    raise NonSimpleCurve("curve intersects itself")

    def _area_centroid(self):
        # Green's theorem with the dense trapezoid rule (spectral accuracy)
        z, dz = self._z_dense, self._dz_dense
        h = _TWO_PI / z.size
        area = 0.5 * h * np.sum(np.imag(np.conj(z) * dz))
        cx = h * np.sum(z.real**2 * dz.imag) / (2 * area)
        cy = -h * np.sum(z.imag**2 * dz.real) / (2 * area)
        return cx + 1j * cy

    @property
    def area(self):
        z, dz = self._z_dense, self._dz_dense
        return 0.5 * (_TWO_PI / z.size) * np.sum(np.imag(np.conj(z) * dz))

    def nodes(self, n):
        if n < 16:
            raise TooFewNodes(f"need at least 16 quadrature nodes, got {n}")
        t = np.linspace(0.0, _TWO_PI, n, endpoint=False)
        return t, self.curve.z(t), self.curve.dz(t), self.curve.d2z(t)

    def _winding_raw(self, z):
        dz = self._dz_dense
        h = _TWO_PI / self._z_dense.size
        return np.real(
            (h / (2j * np.pi)) * np.sum(dz / (self._z_dense[None, :] - z[:, None]), axis=1)
        )

    def winding(self, pts):
        """Winding number (0 or 1 for simple ccw curves) of pts, vectorized."""
        z = as_complex(pts)
        scalar = z.ndim == 0
        out = np.rint(self._winding_raw(np.atleast_1d(z))).astype(int)
        return int(out[0]) if scalar else out

    def contains(self, pts):
        """Interior test, robust arbitrarily close to the curve: points whose
        quadrature winding is ambiguous fall back to the sign of the outward
        normal component at the foot point."""
        z = np.atleast_1d(as_complex(pts))
        w = self._winding_raw(z)
        out = np.rint(w) != 0
        unsure = np.abs(w - np.rint(w)) > 1e-6
        if np.any(unsure):
            zu = z[unsure]
            t, p, d = self.project(zu)
            dz = self.curve.dz(t)
            nu = -1j * dz / np.abs(dz)  # curve-outward for ccw storage
            out[unsure] = np.real(np.conj(zu - p) * nu) < 0.0
        return out

    def project(self, pts, tol=1e-12, max_iter=60):
        """Nearest boundary point: returns (t*, foot, distance).

        Multi-start Newton on the stationarity condition
        (z(t) - x) . z'(t) = 0, seeded from the best dense samples.
        """
        x = np.atleast_1d(as_complex(pts))
        if self.curve.is_circle:
            c, r = self.curve.center, self.curve.radius
            v = x - c
            av = np.abs(v)
            t = np.angle(np.where(av == 0, 1.0, v)) % _TWO_PI
            foot = c + r * np.where(av == 0, 1.0, v / np.where(av == 0, 1.0, av))
            return t, foot, np.abs(av - r)
        zd = self._z_dense
        d2 = np.abs(x[:, None] - zd[None, :])
        order = np.argsort(d2, axis=1)[:, :3]
        t_best = np.full(x.shape, np.nan)
        p_best = np.zeros_like(x)
        d_best = np.full(x.shape, np.inf)
        for col in range(order.shape[1]):
            t = self._t_dense[order[:, col]].copy()
            for _ in range(max_iter):
                z = self.curve.z(t)
                dz = self.curve.dz(t)
                g = np.real(np.conj(z - x) * dz)
                gp = np.abs(dz) ** 2 + np.real(np.conj(z - x) * self.curve.d2z(t))
                step = g / np.where(np.abs(gp) < 1e-30, 1e-30, gp)
                step = np.clip(step, -0.5, 0.5)
                t = t - step
                if np.max(np.abs(step)) < tol:
                    break
            z = self.curve.z(t)
            d = np.abs(z - x)
            better = d < d_best
            t_best[better] = t[better] % _TWO_PI
            p_best[better] = z[better]
            d_best[better] = d[better]
        return t_best, p_best, d_best

    def distance(self, pts):
        return self.project(pts)[2]

    def descriptor(self):
        return self.curve.descriptor()


def boundary_quadrature(component, n):
    """Periodic-trapezoid quadrature data for one standalone boundary curve.

    Parameters
    ----------
    component : BoundaryComponent or Curve
    n : int
        Number of nodes (>= 16).

    Returns
    -------
    dict with keys
        t         parameter values
        nodes     (n,2) node coordinates
        tangent   (n,2) unit tangents, counterclockwise
        normal    (n,2) unit normals, outward of the curve
        weights   (n,) arclength weights; sums to the perimeter
        speed     |z'(t)|
        curvature signed curvature (positive for a ccw convex curve)

    The weights integrate smooth periodic integrands with spectral accuracy,
    e.g. integral of x . normal over a unit circle equals 2*pi (area identity)
    to machine precision.
    """
    if isinstance(component, Curve):
        component = BoundaryComponent(component, check_simple=False)
    t, z, dz, d2z = component.nodes(n)
    sp = np.abs(dz)
    tau = dz / sp
    nu = -1j * tau  # outward of a ccw curve
    kappa = np.imag(np.conj(dz) * d2z) / sp**3
    return {
        "t": t,
        "nodes": as_xy(z),
        "tangent": as_xy(tau),
        "normal": as_xy(nu),
        "weights": (_TWO_PI / n) * sp,
        "speed": sp,
        "curvature": kappa,
    }


# ---------------------------------------------------------------------------
# domains

EXTERIOR = "exterior"
BOUNDED = "bounded"


@dataclass
class ComponentQuadrature:
    """Fluid-oriented quadrature data for one component of a Domain."""

    index: int
    role: str  # "obstacle", "hole", "outer"
    t: np.ndarray
    z: np.ndarray          # complex nodes
    dz: np.ndarray         # complex parametrization derivative
    speed: np.ndarray
    weights: np.ndarray    # arclength weights
    tau: np.ndarray        # complex unit tangent, tau = -n^perp, n fluid-exterior
    normal: np.ndarray     # complex unit normal, exterior to the fluid
    curvature_fluid: np.ndarray  # curvature w.r.t. the fluid-exterior normal

    @property
    def h(self):
        return _TWO_PI / self.t.size


class Domain:
    """Fluid domain: exterior of obstacles, or bounded with holes.

    For exterior domains the first obstacle is required (after an internal
    Möbius normalization w = scale/(z - center), which is exact and never
    alters user coordinates) to contain the unit disk, so that the inversion
    image of the fluid is a bounded region inside the unit circle.
    """

    def __init__(self, kind, components):
        if kind not in (EXTERIOR, BOUNDED):
            raise ValueError(f"unknown domain kind {kind!r}")
        comps = []
        for c in components:
            if isinstance(c, BoundaryComponent):
                comps.append(c)
            else:
                comps.append(BoundaryComponent(c))
        if kind == EXTERIOR and len(comps) < 1:
            raise ValueError("an exterior domain needs at least one obstacle")
        if kind == BOUNDED and len(comps) < 1:
            raise ValueError("a bounded domain needs an outer boundary")
        self.kind = kind
        self.components = comps
        self._validate()
        self._normalize()
        self.scale = self._scale()
        self.min_gap = self._min_gap()

    # -- validation -------------------------------------------------------

    def _validate(self):
        comps = self.components
        if self.kind == EXTERIOR:
            solids = comps
        else:
            outer = comps[0]
            solids = comps[1:]
            for hole in solids:
                if not np.all(outer.contains(hole._z_dense[::8])):
                    raise HoleOutsideOuterBoundary(
                        "every hole must lie inside the outer boundary"
                    )
                # the outer curve must not dip into the hole
                if np.any(hole.contains(outer._z_dense[::8])):
                    raise HoleOutsideOuterBoundary("outer boundary crosses a hole")
        for i in range(len(solids)):
            for j in range(i + 1, len(solids)):
                a, b = solids[i], solids[j]
                if np.any(a.contains(b._z_dense[::8])) or np.any(
                    b.contains(a._z_dense[::8])
                ):
                    raise OverlappingObstacles(
                        f"components {i} and {j} overlap or nest"
                    )
                if np.min(np.abs(a._z_dense[:, None] - b._z_dense[None, ::4])) <= 0:
                    raise OverlappingObstacles(f"components {i} and {j} touch")

    def _normalize(self):
        """Möbius normalization data for exterior domains (identity-like for
        a unit-disk first obstacle at the origin)."""
        if self.kind != EXTERIOR:
            self.map_center = None
            self.map_scale = None
            return
        first = self.components[0]
        z0 = 0.0 + 0.0j
        ok = first.contains(np.array([z0])) and np.min(np.abs(first._z_dense)) >= 1.0 - 1e-13
        if ok:
            s = 1.0
        else:
            z0 = first.centroid
            if not first.contains(np.array([z0])):
                raise NonSimpleCurve("first obstacle centroid lies outside it")
            s = 0.995 * float(np.min(np.abs(first._z_dense - z0)))
        self.map_center = complex(z0)
        self.map_scale = float(s)

    def _scale(self):
        zs = np.concatenate([c._z_dense[::8] for c in self.components])
        return float(np.max(np.abs(zs - np.mean(zs))) + 1e-30)

    def _min_gap(self):
        comps = self.components
        if len(comps) < 2:
            return np.inf
        gap = np.inf
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                d = np.min(comps[i].distance(comps[j]._z_dense[::4]))
                gap = min(gap, float(d))
        return gap

    # -- fluid geometry ----------------------------------------------------

    @property
    def n_components(self):
        return len(self.components)

    @property
    def genus(self):
        """Number of circulation degrees of freedom (holes/obstacles)."""
        return len(self.components) if self.kind == EXTERIOR else len(self.components) - 1

    def roles(self):
        if self.kind == EXTERIOR:
            return ["obstacle"] * len(self.components)
        return ["outer"] + ["hole"] * (len(self.components) - 1)

    def circulation_components(self):
        """Indices of components carrying a free circulation."""
        return list(range(len(self.components))) if self.kind == EXTERIOR else list(
            range(1, len(self.components))
        )

    def fluid_normal_sign(self, index):
        """+1 if the fluid-exterior normal equals the curve-outward one."""
        return 1.0 if (self.kind == BOUNDED and index == 0) else -1.0

    def quadrature(self, n):
        """Fluid-oriented quadrature on every component; n nodes each (int or list)."""
        ns = [n] * len(self.components) if np.isscalar(n) else list(n)
        out = []
        for i, (comp, ni) in enumerate(zip(self.components, ns)):
            t, z, dz, d2z = comp.nodes(ni)
            sp = np.abs(dz)
            tau_ccw = dz / sp
            nu = -1j * tau_ccw
            sign = self.fluid_normal_sign(i)
            normal = sign * nu
            tau = -perp(normal)  # = normal rotated by -90 deg
            kap_ccw = np.imag(np.conj(dz) * d2z) / sp**3
            out.append(
                ComponentQuadrature(
                    index=i,
                    role=self.roles()[i],
                    t=t,
                    z=z,
                    dz=dz,
                    speed=sp,
                    weights=(_TWO_PI / ni) * sp,
                    tau=tau,
                    normal=normal,
                    curvature_fluid=sign * kap_ccw,
                )
            )
        return out

    def contains(self, pts, margin=0.0):
        z = np.atleast_1d(as_complex(pts))
        if self.kind == EXTERIOR:
            inside = np.ones(z.shape, dtype=bool)
            for comp in self.components:
                inside &= ~comp.contains(z)
        else:
            inside = self.components[0].contains(z)
            for comp in self.components[1:]:
                inside &= ~comp.contains(z)
        if margin > 0:
            inside &= self.distance(z) >= margin
        return inside

    def distance(self, pts):
        """Distance to the full boundary."""
        z = np.atleast_1d(as_complex(pts))
        d = np.full(z.shape, np.inf)
        for comp in self.components:
            d = np.minimum(d, comp.distance(z))
        return d

    def project(self, pts):
        """Nearest boundary component index, foot point, and distance."""
        z = np.atleast_1d(as_complex(pts))
        best_d = np.full(z.shape, np.inf)
        best_p = np.zeros_like(z)
        best_i = np.zeros(z.shape, dtype=int)
        best_t = np.zeros(z.shape)
        for i, comp in enumerate(self.components):
            t, p, d = comp.project(z)
            better = d < best_d
            best_d[better] = d[better]
            best_p[better] = p[better]
            best_t[better] = t[better]
            best_i[better] = i
        return best_i, best_t, best_p, best_d

    def sample_points(self, n, rng, margin=0.05, rmax=None):
        """Uniform random fluid points with a boundary margin (rejection)."""
        if self.kind == BOUNDED:
            zd = self.components[0]._z_dense
            lo, hi = zd.real.min(), zd.real.max()
            lo2, hi2 = zd.imag.min(), zd.imag.max()
        else:
            zs = np.concatenate([c._z_dense for c in self.components])
            r = rmax if rmax is not None else 3.0 * self.scale
            c = np.mean(zs)
            lo, hi = c.real - r, c.real + r
            lo2, hi2 = c.imag - r, c.imag + r
        out = []
        while len(out) < n:
            m = max(4 * (n - len(out)), 64)
            cand = (
                rng.uniform(lo, hi, m) + 1j * rng.uniform(lo2, hi2, m)
            )
            ok = self.contains(cand, margin=margin)
            out.extend(cand[ok].tolist())
        return np.array(out[:n], dtype=np.complex128)

    def hash(self):
        desc = (self.kind,) + tuple(c.descriptor() for c in self.components)
        return hashlib.sha256(repr(desc).encode()).hexdigest()[:16]


def make_domain(kind, components):
    """Build a validated Domain.

    Parameters
    ----------
    kind : "exterior" or "bounded"
    components : sequence of Curve or BoundaryComponent
        Exterior: all entries are obstacles (first one must contain the unit
        disk up to the internal exact normalization).  Bounded: first entry is
        the outer boundary, the rest are holes.
    """
    return Domain(kind, components)


# ---------------------------------------------------------------------------
# smooth ramps, cutoffs, mollifier


def smoothstep(u, order=5):
    """C^2 (order=5) or C^3 (order=7) polynomial step on [0,1]."""
    u = np.clip(u, 0.0, 1.0)
    if order == 5:
        return u**3 * (10.0 + u * (-15.0 + 6.0 * u))
    if order == 7:
        return u**4 * (35.0 + u * (-84.0 + u * (70.0 - 20.0 * u)))
    raise ValueError("order must be 5 or 7")


def smoothstep_d(u, order=5):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    if order == 5:
        v = 30.0 * u**2 * (u - 1.0) ** 2
    elif order == 7:
        v = 140.0 * u**3 * (1.0 - u) ** 3
    else:
        raise ValueError("order must be 5 or 7")
    return np.where(inside, v, 0.0)


def smoothstep_d2(u, order=5):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    if order == 5:
        v = 60.0 * u * (2.0 * u - 1.0) * (u - 1.0)
    elif order == 7:
        v = 420.0 * u**2 * (1.0 - u) ** 2 * (1.0 - 2.0 * u)
    else:
        raise ValueError("order must be 5 or 7")
    return np.where(inside, v, 0.0)


class Ramp:
    """Scalar ramp r(s): 0 for s <= s0, 1 for s >= s1 (or descending)."""

    def __init__(self, s0, s1, descending=False, order=5):
        if not s1 > s0:
            raise ValueError("ramp needs s1 > s0")
        self.s0, self.s1 = float(s0), float(s1)
        self.descending = descending
        self.order = order

    def _u(self, s):
        return (np.asarray(s, dtype=float) - self.s0) / (self.s1 - self.s0)

    def __call__(self, s):
        v = smoothstep(self._u(s), self.order)
        return 1.0 - v if self.descending else v

    def d(self, s):
        v = smoothstep_d(self._u(s), self.order) / (self.s1 - self.s0)
        return -v if self.descending else v

    def d2(self, s):
        v = smoothstep_d2(self._u(s), self.order) / (self.s1 - self.s0) ** 2
        return -v if self.descending else v


class Cutoff:
    """chi_n: 1 away from the boundary and inside B_n, 0 within distance 1/n
    of the boundary and outside B_2n; C^2 in between."""

    def __init__(self, domain, n):
        if n < 1:
            raise ValueError("cutoff index n must be >= 1")
        self.domain = domain
        self.n = n
        self._near = Ramp(1.0 / n, 2.0 / n)
        self._far = Ramp(float(n), 2.0 * float(n), descending=True)

    def __call__(self, pts):
        z = np.atleast_1d(as_complex(pts))
        d = self.domain.distance(z)
        v = self._near(d)
        if self.domain.kind == EXTERIOR:
            v = v * self._far(np.abs(z))
        return v

    def gradient(self, pts):
        z = np.atleast_1d(as_complex(pts))
        _, _, foot, d = self.domain.project(z)
        r = np.abs(z)
        near_v, near_d = self._near(d), self._near.d(d)
        with np.errstate(invalid="ignore", divide="ignore"):
            u_hat = np.where(d > 0, (z - foot) / np.where(d == 0, 1.0, d), 0.0)
            r_hat = np.where(r > 0, z / np.where(r == 0, 1.0, r), 0.0)
        if self.domain.kind == EXTERIOR:
            far_v, far_d = self._far(r), self._far.d(r)
            g = near_d * far_v * u_hat + near_v * far_d * r_hat
        else:
            g = near_d * u_hat
        return as_xy(g)

    def gradient_diagnostic(self, rng, samples=400):
        """Measured constants: sup |grad chi| / n on the collar and
        sup |grad chi| * n on the far annulus (exterior only)."""
        n = self.n
        # collar band
        quads = self.domain.quadrature(64)
        ts = rng.uniform(0, _TWO_PI, samples)
        ds = rng.uniform(1.0 / n, 2.0 / n, samples)
        comp = rng.integers(0, len(self.domain.components), samples)
        pts = []
        for t, d, ci in zip(ts, ds, comp):
            c = self.domain.components[ci]
            zt = c.curve.z(t)
            nu = -1j * c.curve.dz(t) / abs(c.curve.dz(t))
            sign = self.domain.fluid_normal_sign(ci)
            pts.append(zt - d * sign * nu)
        pts = np.array(pts)
        keep = self.domain.contains(pts)
        g = self.gradient(pts[keep])
        c_collar = float(np.max(np.hypot(g[:, 0], g[:, 1])) / n) if keep.any() else 0.0
        c_far = 0.0
        if self.domain.kind == EXTERIOR:
            rr = rng.uniform(n, 2.0 * n, samples)
            th = rng.uniform(0, _TWO_PI, samples)
            pf = rr * np.exp(1j * th)
            keep = self.domain.contains(pf)
            g = self.gradient(pf[keep])
            c_far = float(np.max(np.hypot(g[:, 0], g[:, 1])) * n) if keep.any() else 0.0
        return {"collar_constant": c_collar, "far_constant": c_far}


def cutoff_chi(domain, n):
    """Boundary/far-field cutoff chi_n for the given domain.

    chi_n == 1 where dist(x, boundary) >= 2/n and |x| <= n;
    chi_n == 0 where dist(x, boundary) <= 1/n or (exterior) |x| >= 2n.
    |grad chi_n| <= C n on the collar and <= C/n on the far annulus with
    C = 15/8 from the quintic smoothstep profile.
    """
    return Cutoff(domain, n)


class CutoffFamily:
    """Lazy family n -> chi_n over one domain."""

    def __init__(self, domain):
        self.domain = domain
        self._cache = {}

    def __getitem__(self, n):
        if n not in self._cache:
            self._cache[n] = Cutoff(self.domain, n)
        return self._cache[n]


class Mollifier:
    """Radial bump eta supported in B(0; 1/2), unit mass, C^2.

    eta(x) = c (1 - 4|x|^2)^3 with c fixed by numerical normalization of the
    profile at build time.  The scaled family is eta_n(x) = n^2 eta(n x),
    supported in B(0; 1/(2n)).
    """

    def __init__(self):
        # Gauss-Legendre is exact for this polynomial profile
        x, w = np.polynomial.legendre.leggauss(16)
        r = 0.25 * (x + 1.0)
        wr = 0.25 * w
        mass = _TWO_PI * np.sum(wr * r * (1.0 - 4.0 * r**2) ** 3)
        self.c = 1.0 / mass

    def __call__(self, pts, n=1):
        z = np.atleast_1d(as_complex(pts))
        r2 = np.abs(n * z) ** 2
        prof = np.where(r2 < 0.25, (1.0 - 4.0 * r2) ** 3, 0.0)
        return (n**2) * self.c * prof

    def radius(self, n=1):
        return 0.5 / n


_MOLLIFIER = None


def mollifier_eta():
    """The fixed mollifier profile object (built once per process)."""
    global _MOLLIFIER
    if _MOLLIFIER is None:
        _MOLLIFIER = Mollifier()
    return _MOLLIFIER


# ---------------------------------------------------------------------------
# collar tubes and distance fields (shared by reconstruction/weakform)


class TubeQuadrature:
    """Quadrature over the normal-offset tube {z(t) - d n_fluid(t)} of one
    component, d in [d0, d1] into the fluid.  Valid while the tube stays
    injective: keep d1 below the curvature reach and half the component gap."""

    def __init__(self, domain, index, d0, d1, nt=256, nd=24):
        comp = domain.components[index]
        sign = domain.fluid_normal_sign(index)
        t = np.linspace(0.0, _TWO_PI, nt, endpoint=False)
        ht = _TWO_PI / nt
        xg, wg = np.polynomial.legendre.leggauss(nd)
        d = 0.5 * (d1 - d0) * (xg + 1.0) + d0
        wd = 0.5 * (d1 - d0) * wg
        z = comp.curve.z(t)
        dz = comp.curve.dz(t)
        d2z = comp.curve.d2z(t)
        sp = np.abs(dz)
        tau_ccw = dz / sp
        nu = -1j * tau_ccw
        n_fluid = sign * nu
        # derivative of the unit normal along t
        dsp = np.real(np.conj(dz) * d2z) / sp
        dtau = (d2z * sp - dz * dsp) / sp**2
        dn = sign * (-1j) * dtau
        # points and Jacobian |(z' - d n') x (-n)|
        P = z[None, :] - d[:, None] * n_fluid[None, :]
        xt = dz[None, :] - d[:, None] * dn[None, :]
        J = np.abs(np.imag(np.conj(xt) * (-n_fluid[None, :])))
        self.domain = domain
        self.index = index
        self.t = t
        self.d = d
        self.points = P.ravel()
        self.weights = (J * (wd[:, None] * ht)).ravel()
        self.n_fluid = np.broadcast_to(n_fluid[None, :], P.shape).ravel()
        self.tau = np.broadcast_to((-perp(n_fluid))[None, :], P.shape).ravel()
        self.depth = np.broadcast_to(d[:, None], P.shape).ravel()
        self.shape = P.shape


class DistanceField:
    """Distance to one component with gradient and Hessian on the fluid side.

    grad d = u_hat (unit vector from the foot point to x); the Hessian is the
    rank-one-deficient curvature term (I - u u^T)/(d + rho) with rho the signed
    distance from the foot to the center of curvature along -u_hat.
    """

    def __init__(self, domain, index):
        self.domain = domain
        self.comp = domain.components[index]
        self.index = index

    def value(self, pts):
        return self.comp.distance(np.atleast_1d(as_complex(pts)))

    def value_grad_hess(self, pts):
        z = np.atleast_1d(as_complex(pts))
        t, p, d = self.comp.project(z)
        dz = self.comp.curve.dz(t)
        d2z = self.comp.curve.d2z(t)
        sp = np.abs(dz)
        kap = np.imag(np.conj(dz) * d2z) / sp**3  # ccw curvature
        left = 1j * dz / sp  # left normal of the ccw parametrization
        u = (z - p) / np.where(d == 0, 1.0, d)
        on_gamma = d <= 1e-10 * self.domain.scale
        if np.any(on_gamma):
            # one-sided limit from the fluid: grad d -> normal into the fluid
            u = np.where(on_gamma, self.domain.fluid_normal_sign(self.index) * left, u)
        # center of curvature: p + left/kappa; rho = -u . (center - p)
        u_dot_left = np.real(np.conj(u) * left)
        # 1/(d + rho) written to stay finite as kappa -> 0
        k_eff = kap / (kap * d - u_dot_left)
        n = z.size
        hess = np.zeros((n, 2, 2))
        ux, uy = u.real, u.imag
        hess[:, 0, 0] = (1.0 - ux * ux) * k_eff
        hess[:, 0, 1] = (-ux * uy) * k_eff
        hess[:, 1, 0] = hess[:, 0, 1]
        hess[:, 1, 1] = (1.0 - uy * uy) * k_eff
        return d, as_xy(u), hess
