"""Point-vortex and blob motion with boundary-aware desingularization.

Particles (atoms and blob centers) move under

    dx_i/dt = sum_{j != i} G_j K(x_i, x_j)
              + G_i grad_x^perp H(x, y)|_{x=y=x_i}
              + sum_l alpha_l X_l(x_i),

the classical Kirchhoff-Routh law: mutual interaction through the domain
kernel, self-drift from the analytic gradient of the regular part, and the
circulation completion fields weighted by alpha_l = gamma_l + integral of
w_l against the vorticity.  Strengths and boundary circulations are frozen
along the flow; the alphas are recomputed at every integrator stage because
the harmonic-measure integrals move with the particles.

Gridded vorticity is not advected here; represent it with blobs first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import potential as pot
from . import reconstruction as rec
from . import vorticity as vor
from .errors import (
    CollidingVortices,
    PointOutsideDomain,
    SupportTooClose,
    VortexExitedDomain,
)

_2PI = 2.0 * np.pi

COLLISION_DISTANCE = 1e-9

SCHEMES = ("rk4", "midpoint")


@dataclass(frozen=True)
class FlowState:
    """Instantaneous (t, vorticity, boundary circulations)."""

    t: float
    omega: vor.VorticityMeasure
    gamma: vor.CirculationVector

    def conserved_scalar(self):
        """Total mass plus net boundary circulation (outer counted with the
        fluid orientation on bounded domains); constant by construction."""
        m = vor.total_mass(self.omega)
        vals = self.gamma.as_array()
        if self.omega.domain.kind == geo.BOUNDED:
            return m + float(np.sum(vals[1:]) - vals[0])
        return m + float(np.sum(vals))


@dataclass
class Trajectory:
    """Uniformly spaced states plus integrator metadata."""

    states: list
    dt: float
    scheme: str
    solver: object = field(default=None, repr=False)

    def __post_init__(self):
        t = self.times()
        if len(t) and (np.any(np.diff(t) <= 0) or
                       np.max(np.abs(np.diff(t) - self.dt)) > 1e-9 * max(self.dt, 1.0)):
            raise ValueError("trajectory times must increase by the uniform step")

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]

    def times(self):
        return np.array([s.t for s in self.states])

    def positions(self):
        """Complex particle positions, shape (n_states, n_particles)."""
        return np.array([particle_positions(s.omega) for s in self.states])


def particle_positions(omega):
    """Atom positions followed by blob centers (complex)."""
    return np.concatenate([omega.atom_pos, omega.blob_pos])


def particle_strengths(omega):
    return np.concatenate([omega.atom_str, omega.blob_str])


def _displaced(omega, z_new):
    """The same measure with particles moved to z_new (validates support)."""
    na = omega.n_atoms
    atoms = list(zip(z_new[:na], omega.atom_str))
    blobs = list(zip(z_new[na:], omega.blob_str, omega.blob_rad))
    return vor.VorticityMeasure(
        omega.domain, atoms=atoms, blobs=blobs, grid=omega.grid,
        support_margin=omega.support_margin,
    )


def particle_velocities(solver, omega, gamma):
    """Velocities of every particle under the motion law; (n, 2)."""
    z = particle_positions(omega)
    s = particle_strengths(omega)
    n = z.size
    if n == 0:
        return np.zeros((0, 2))
    if n > 1:
        dists = np.abs(z[:, None] - z[None, :])[~np.eye(n, dtype=bool)]
        if dists.min() < COLLISION_DISTANCE:
            raise CollidingVortices(
                f"particle pair closer than {COLLISION_DISTANCE:g}"
            )

    u = np.zeros((n, 2))
    if n > 1:
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        k = pot.biot_savart_kernel(solver, geo.as_xy(z[ii]), geo.as_xy(z[jj]))
        np.add.at(u, ii, s[jj, None] * k)

    grad_h = pot.routh_regular_gradient(solver, geo.as_xy(z))
    u += s[:, None] * geo.perp(grad_h)

    alpha = rec.alpha_coefficients(solver, omega, gamma)
    for coef, j in zip(alpha, solver.circulation_indices):
        if coef != 0.0:
            u += coef * pot.harmonic_field(solver, j, geo.as_xy(z))
    return u


def vortex_velocity(solver, state, i):
    """Velocity of particle i (atoms first, then blob centers)."""
    u = particle_velocities(solver, state.omega, state.gamma)
    if not 0 <= i < len(u):
        raise IndexError(f"particle index {i} out of range ({len(u)} particles)")
    return u[i]


def _stage_velocity(solver, omega, gamma, z):
    try:
        moved = _displaced(omega, z)
    except (PointOutsideDomain, SupportTooClose) as exc:
        raise VortexExitedDomain(
            f"a particle left the fluid region (or its support margin): {exc}"
        ) from None
    uv = particle_velocities(solver, moved, gamma)
    return uv[:, 0] + 1j * uv[:, 1]


def step(solver, state, dt, scheme="rk4"):
    """One explicit step; strengths and circulations are carried unchanged."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if state.omega.grid is not None and np.any(state.omega.grid.weights() != 0):
        raise ValueError("gridded vorticity is not advected; use blobs")

    omega, gamma = state.omega, state.gamma
    z0 = particle_positions(omega)
    if z0.size == 0:
        return FlowState(state.t + dt, omega, gamma)

    if scheme == "midpoint":
        k1 = _stage_velocity(solver, omega, gamma, z0)
        k2 = _stage_velocity(solver, omega, gamma, z0 + 0.5 * dt * k1)
        z1 = z0 + dt * k2
    else:
        k1 = _stage_velocity(solver, omega, gamma, z0)
        k2 = _stage_velocity(solver, omega, gamma, z0 + 0.5 * dt * k1)
        k3 = _stage_velocity(solver, omega, gamma, z0 + 0.5 * dt * k2)
        k4 = _stage_velocity(solver, omega, gamma, z0 + dt * k3)
        z1 = z0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    try:
        moved = _displaced(omega, z1)
    except (PointOutsideDomain, SupportTooClose) as exc:
        raise VortexExitedDomain(
            f"a particle left the fluid region (or its support margin): {exc}"
        ) from None
    return FlowState(state.t + dt, moved, gamma)


def simulate(solver, initial, T, dt, scheme="rk4"):
    """Integrate for ceil(T/dt) uniform steps; returns every state, the
    initial one included."""
    if T <= 0:
        raise ValueError("T must be positive")
    n_steps = int(np.ceil(T / dt - 1e-12))
    states = [initial]
    for _ in range(n_steps):
        states.append(step(solver, states[-1], dt, scheme))
    return Trajectory(states, dt, scheme, solver=solver)


def suggest_dt(solver, state, cfl=0.05):
    """Step suggestion: cfl * (min pair distance) / (max particle speed)."""
    z = particle_positions(state.omega)
    if z.size == 0:
        return np.inf
    u = particle_velocities(solver, state.omega, state.gamma)
    vmax = float(np.max(np.hypot(u[:, 0], u[:, 1]))) or 1.0
    if z.size > 1:
        d = np.abs(z[:, None] - z[None, :])[~np.eye(z.size, dtype=bool)].min()
    else:
        d = solver.domain.distance(z).min()
    return cfl * float(d) / vmax


def hamiltonian(solver, state):
    """Discrete Kirchhoff-Routh energy of the particle system:
    pair Green interactions + self regular parts + circulation streams."""
    z = particle_positions(state.omega)
    s = particle_strengths(state.omega)
    n = z.size
    total = 0.0
    if n > 1:
        ii, jj = np.triu_indices(n, k=1)
        g = pot.green(solver, geo.as_xy(z[ii]), geo.as_xy(z[jj]))
        total += float(np.sum(s[ii] * s[jj] * np.atleast_1d(g)))
    if n:
        h_diag = np.atleast_1d(pot.routh_regular_part(solver, geo.as_xy(z)))
        total += 0.5 * float(np.sum(s**2 * h_diag))
        alpha = rec.alpha_coefficients(solver, state.omega, state.gamma)
        for coef, j in zip(alpha, solver.circulation_indices):
            if coef != 0.0:
                psi = np.atleast_1d(pot.harmonic_field_stream(solver, j, geo.as_xy(z)))
                total += coef * float(np.sum(s * psi))
    return total


def conservation_report(trajectory, solver=None):
    """Time series of the conserved scalar, the circulations, and the
    Kirchhoff-Routh energy (reported, never asserted to be constant)."""
    if not len(trajectory):
        raise ValueError("empty trajectory")
    solver = solver if solver is not None else trajectory.solver
    if solver is None:
        raise ValueError("conservation_report needs the solver used for the run")
    t = trajectory.times()
    scalar = np.array([s.conserved_scalar() for s in trajectory.states])
    gammas = np.array([s.gamma.as_array() for s in trajectory.states])
    energy = np.array([hamiltonian(solver, s) for s in trajectory.states])
    return {
        "t": t,
        "mass_plus_circulation": scalar,
        "gamma": gammas,
        "kirchhoff_routh_energy": energy,
        "scalar_drift": float(np.max(np.abs(scalar - scalar[0]))),
        "energy_drift": float(
            np.max(np.abs(energy - energy[0]))
            / max(abs(energy[0]), np.finfo(float).tiny)
        ),
        "gamma_drift": float(np.max(np.abs(gammas - gammas[0]))),
    }
