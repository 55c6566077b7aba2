"""Substep XPBD integrator.

The solver works on a :class:`ParticleSystem` and a list of constraint
batches. Every batch exposes the same small protocol (``kind``, ``reset``,
``project``, ``forces``, ``constraint``), so heterogeneous constraints are
swept in one fixed Gauss-Seidel order. Heavy batches project through numba
kernels; :func:`project_constraint` is the plain-Python reference used for
single constraints and for cross-checking the kernels.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_ORDER = ("deviatoric", "hydrostatic", "attachment", "collision")
DENOM_EPS = 1e-12


class SolverConfigError(ValueError):
    pass


class SolverNaNError(FloatingPointError):
    """A projection produced a non-finite value; the frame must be aborted."""

    def __init__(self, kind: str, index: int, substep: int | None = None):
        self.kind = kind
        self.index = index
        self.substep = substep
        where = f" at substep {substep}" if substep is not None else ""
        super().__init__(f"non-finite correction from {kind} constraint {index}{where}")


@dataclass
class SolverConfig:
    dt_substep: float = 1.0e-3
    substeps_per_frame: int = 1
    iterations_per_substep: int = 1
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    velocity_damping: float = 0.999
    random_seed: int = 0
    order: tuple[str, ...] = DEFAULT_ORDER
    threads: int = 1

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        self.order = tuple(self.order)
        if not (1e-5 <= self.dt_substep <= 1e-2):
            raise SolverConfigError(f"dt_substep {self.dt_substep} outside [1e-5, 1e-2]")
        if self.substeps_per_frame < 1:
            raise SolverConfigError("substeps_per_frame must be >= 1")
        if self.iterations_per_substep < 1:
            raise SolverConfigError("iterations_per_substep must be >= 1")
        if not (0.0 < self.velocity_damping <= 1.0):
            raise SolverConfigError("velocity_damping must be in (0, 1]")
        if len(self.gravity) != 3:
            raise SolverConfigError("gravity must be a 3-vector")
        if sorted(self.order) != sorted(set(self.order)):
            raise SolverConfigError("order has duplicate kinds")
        if self.threads < 1:
            raise SolverConfigError("threads must be >= 1")


@dataclass
class ParticleSystem:
    positions: np.ndarray
    prev_positions: np.ndarray
    velocities: np.ndarray
    inv_mass: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.prev_positions = np.ascontiguousarray(self.prev_positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        self.inv_mass = np.ascontiguousarray(self.inv_mass, dtype=np.float64).reshape(-1)
        n = len(self.positions)
        if not (len(self.prev_positions) == len(self.velocities) == len(self.inv_mass) == n):
            raise ValueError("particle arrays differ in length")
        if np.any(self.inv_mass < 0):
            raise ValueError("inv_mass must be >= 0")

    @classmethod
    def at_rest(cls, positions, inv_mass=None) -> "ParticleSystem":
        positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        if inv_mass is None:
            inv_mass = np.ones(len(positions))
        return cls(positions, positions.copy(), np.zeros_like(positions), np.array(inv_mass, float))

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(
            self.positions.copy(), self.prev_positions.copy(), self.velocities.copy(), self.inv_mass.copy()
        )

    def append(self, source_indices: np.ndarray) -> np.ndarray:
        """Duplicate particles (state copied from ``source_indices``); returns new indices."""
        start = len(self.positions)
        self.positions = np.concatenate([self.positions, self.positions[source_indices]])
        self.prev_positions = np.concatenate([self.prev_positions, self.prev_positions[source_indices]])
        self.velocities = np.concatenate([self.velocities, self.velocities[source_indices]])
        self.inv_mass = np.concatenate([self.inv_mass, self.inv_mass[source_indices]])
        return np.arange(start, len(self.positions))

    def kinetic_energy(self) -> float:
        free = self.inv_mass > 0
        m = 1.0 / self.inv_mass[free]
        return float(0.5 * np.sum(m * np.sum(self.velocities[free] ** 2, axis=1)))

    def momentum(self) -> np.ndarray:
        free = self.inv_mass > 0
        return (self.velocities[free] / self.inv_mass[free, None]).sum(axis=0)


@dataclass
class Constraint:
    """A single constraint for the reference projection path.

    ``evaluate(positions)`` returns ``(C, grads)`` where ``grads`` has one
    row per entry of ``particles``.
    """

    particles: np.ndarray
    evaluate: Callable[[np.ndarray], tuple[float, np.ndarray]]
    compliance: float = 0.0
    is_inequality: bool = False
    lam: float = 0.0
    kind: str = "generic"


def project_constraint(constraint: Constraint, particles: ParticleSystem, dt: float):
    """One XPBD projection. Mutates positions and ``constraint.lam``.

    Returns ``(corrections, delta_lambda)``; corrections are zero when the
    constraint is an inactive inequality or the denominator vanishes.
    """
    idx = np.asarray(constraint.particles)
    c, grads = constraint.evaluate(particles.positions)
    zero = np.zeros((len(idx), 3))
    if constraint.is_inequality and c >= 0.0:
        return zero, 0.0
    w = particles.inv_mass[idx]
    alpha_t = constraint.compliance / (dt * dt)
    denom = float(np.sum(w * np.sum(grads * grads, axis=1))) + alpha_t
    if denom < DENOM_EPS:
        return zero, 0.0
    dlam = (-c - alpha_t * constraint.lam) / denom
    constraint.lam += dlam
    dx = w[:, None] * grads * dlam
    np.add.at(particles.positions, idx, dx)
    return dx, dlam


class ConstraintBatch:
    """Base protocol. Subclasses hold constraint data in flat arrays."""

    kind = "generic"
    is_inequality = False

    def __len__(self) -> int:
        return len(self.lam)

    def parts(self) -> list["ConstraintBatch"]:
        return [self]

    def reset(self) -> None:
        self.lam[:] = 0.0

    def project(self, positions: np.ndarray, inv_mass: np.ndarray, dt: float) -> int:
        """Sweep every constraint once; return index of the first non-finite one, or -1."""
        raise NotImplementedError

    def project_parallel(self, positions, inv_mass, dt) -> int:
        return self.project(positions, inv_mass, dt)

    def evaluate(self, i: int, positions: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def particles_of(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def compliance_of(self, i: int) -> float:
        raise NotImplementedError

    def active(self) -> np.ndarray:
        return np.arange(len(self))

    def constraint(self, i: int) -> Constraint:
        """Reference view of constraint ``i`` sharing the batch's multiplier."""
        return Constraint(
            particles=self.particles_of(i),
            evaluate=lambda pos, i=i: self.evaluate(i, pos),
            compliance=self.compliance_of(i),
            is_inequality=self.is_inequality,
            lam=float(self.lam[i]),
            kind=self.kind,
        )

    def forces(self, positions: np.ndarray, dt: float):
        """Per-constraint ``(particle ids, force vectors)`` with f = lambda * grad C / dt^2."""
        out = []
        for i in self.active():
            _, g = self.evaluate(i, positions)
            out.append((self.particles_of(i), self.lam[i] * g / (dt * dt)))
        return out


class ListBatch(ConstraintBatch):
    """Batch of arbitrary :class:`Constraint` objects, projected in Python."""

    def __init__(self, constraints: Sequence[Constraint], kind: str = "generic", is_inequality=False):
        self.items = list(constraints)
        self.kind = kind
        self.is_inequality = is_inequality

    @property
    def lam(self):
        return np.array([c.lam for c in self.items])

    def __len__(self):
        return len(self.items)

    def reset(self):
        for c in self.items:
            c.lam = 0.0

    def project(self, positions, inv_mass, dt):
        ps = _PositionsView(positions, inv_mass)
        for i, c in enumerate(self.items):
            _, dlam = project_constraint(c, ps, dt)
            if not np.isfinite(dlam):
                return i
        return -1

    def evaluate(self, i, positions):
        return self.items[i].evaluate(positions)

    def particles_of(self, i):
        return np.asarray(self.items[i].particles)

    def compliance_of(self, i):
        return self.items[i].compliance

    def constraint(self, i):
        return self.items[i]

    def forces(self, positions, dt):
        out = []
        for c in self.items:
            _, g = c.evaluate(positions)
            out.append((np.asarray(c.particles), c.lam * g / (dt * dt)))
        return out


class _PositionsView:
    # Lets project_constraint operate on bare arrays.
    def __init__(self, positions, inv_mass):
        self.positions = positions
        self.inv_mass = inv_mass


def flatten_batches(batches: Iterable[ConstraintBatch], order: Sequence[str] = DEFAULT_ORDER):
    """Expand compound batches and sort by ``order`` (stable within a kind)."""
    flat = [p for b in batches for p in b.parts()]
    rank = {k: i for i, k in enumerate(order)}
    return sorted(flat, key=lambda b: rank.get(b.kind, len(rank)))


def predict(particles: ParticleSystem, config: SolverConfig, dt: float | None = None) -> np.ndarray:
    """x_prev <- x; x <- x + dt v + dt^2 g for particles with inv_mass > 0."""
    dt = config.dt_substep if dt is None else dt
    g = config.gravity
    _predict(particles.positions, particles.prev_positions, particles.velocities, particles.inv_mass,
             dt, g[0], g[1], g[2])
    return particles.positions


@numba.njit(cache=True)
def _predict(x, x_prev, v, w, dt, gx, gy, gz):
    dt2 = dt * dt
    for i in range(len(x)):
        x_prev[i, 0] = x[i, 0]
        x_prev[i, 1] = x[i, 1]
        x_prev[i, 2] = x[i, 2]
        if w[i] > 0.0:
            x[i, 0] += dt * v[i, 0] + dt2 * gx
            x[i, 1] += dt * v[i, 1] + dt2 * gy
            x[i, 2] += dt * v[i, 2] + dt2 * gz


def update_velocities(particles: ParticleSystem, dt: float, damping: float) -> None:
    np.subtract(particles.positions, particles.prev_positions, out=particles.velocities)
    particles.velocities *= damping / dt


@dataclass
class PhaseTimer:
    totals: dict = field(default_factory=dict)
    substeps: int = 0

    def add(self, phase: str, seconds: float) -> None:
        self.totals[phase] = self.totals.get(phase, 0.0) + seconds

    def lines(self) -> list[str]:
        total = sum(self.totals.values())
        rate = self.substeps / total if total > 0 else float("nan")
        out = [f"substeps\t{self.substeps}", f"substeps_per_second\t{rate:.1f}"]
        out += [f"{k}_seconds\t{v:.6f}" for k, v in self.totals.items()]
        return out


def substep(
    particles: ParticleSystem,
    batches: Sequence[ConstraintBatch],
    config: SolverConfig,
    timer: PhaseTimer | None = None,
    substep_index: int | None = None,
    presorted: bool = False,
) -> ParticleSystem:
    """predict -> ``iterations_per_substep`` Gauss-Seidel sweeps -> velocity update.

    Raises :class:`SolverNaNError` naming the first constraint whose
    correction is non-finite.
    """
    dt = config.dt_substep
    flat = batches if presorted else flatten_batches(batches, config.order)
    parallel = config.threads > 1
    t0 = time.perf_counter()
    predict(particles, config)
    for b in flat:
        b.reset()
    t1 = time.perf_counter()
    pos, w = particles.positions, particles.inv_mass
    for _ in range(config.iterations_per_substep):
        for b in flat:
            bad = b.project_parallel(pos, w, dt) if parallel else b.project(pos, w, dt)
            if bad >= 0:
                raise SolverNaNError(b.kind, int(bad), substep_index)
    t2 = time.perf_counter()
    update_velocities(particles, dt, config.velocity_damping)
    t3 = time.perf_counter()
    if timer is not None:
        timer.add("predict", t1 - t0)
        timer.add("project", t2 - t1)
        timer.add("velocity", t3 - t2)
        timer.substeps += 1
    return particles


def constraint_forces(batches: Sequence[ConstraintBatch], positions: np.ndarray, dt: float):
    """Map of kind -> list of (particle ids, per-particle force vectors in N)."""
    out: dict[str, list] = {}
    for b in flatten_batches(batches):
        out.setdefault(b.kind, []).extend(b.forces(positions, dt))
    return out


def net_particle_forces(batches, positions, dt, n_particles) -> np.ndarray:
    total = np.zeros((n_particles, 3))
    for items in constraint_forces(batches, positions, dt).values():
        for idx, f in items:
            np.add.at(total, idx, f)
    return total


def color_constraints(particle_sets: np.ndarray, n_particles: int | None = None) -> list[np.ndarray]:
    """Greedy colouring: constraints in one colour share no particle.

    ``particle_sets`` is (m, k). Constraints are visited in index order so
    the colouring is deterministic.
    """
    particle_sets = np.asarray(particle_sets, dtype=np.int64)
    if n_particles is None:
        n_particles = int(particle_sets.max()) + 1 if particle_sets.size else 0
    colors = _greedy_color(particle_sets, n_particles)
    if len(colors) == 0:
        return []
    order = np.argsort(colors, kind="stable")
    bounds = np.searchsorted(colors[order], np.arange(colors.max() + 2))
    return [order[bounds[c] : bounds[c + 1]] for c in range(colors.max() + 1)]


@numba.njit(cache=True)
def _greedy_color(sets, n_particles):
    m, k = sets.shape
    colors = np.full(m, -1, np.int64)
    # Bitmask of colours already used at each particle (up to 64 colours).
    used = np.zeros(n_particles, np.uint64)
    for c in range(m):
        mask = np.uint64(0)
        for j in range(k):
            mask |= used[sets[c, j]]
        col = 0
        while col < 64 and (mask >> np.uint64(col)) & np.uint64(1):
            col += 1
        if col == 64:
            raise ValueError("more than 64 colours needed")
        colors[c] = col
        bit = np.uint64(1) << np.uint64(col)
        for j in range(k):
            used[sets[c, j]] |= bit
    return colors


def set_threads(n: int) -> int:
    """Set numba worker threads, clamped to what the runtime allows."""
    limit = numba.config.NUMBA_NUM_THREADS
    if n > limit:
        log.warning("requested %d threads, numba allows %d (set NUMBA_NUM_THREADS)", n, limit)
        n = limit
    numba.set_num_threads(max(1, n))
    return n


class AttachmentBatch(ConstraintBatch):
    """Zero-rest-length distance constraints from particles to world targets.

    C = |x - target|; targets are refreshed by the owner (tool pose, clip
    anchor) before each substep.
    """

    kind = "attachment"

    def __init__(self, particles=(), targets=None, compliance=0.0, owners=None):
        self.particles = np.asarray(particles, dtype=np.int64).reshape(-1)
        k = len(self.particles)
        self.targets = np.zeros((k, 3)) if targets is None else np.array(targets, float).reshape(k, 3)
        self.compliance = np.broadcast_to(np.asarray(compliance, float), (k,)).copy()
        self.owners = np.zeros(k, np.int64) if owners is None else np.asarray(owners, np.int64).reshape(k)
        self.lam = np.zeros(k)
        # Gradient used by the latest projection; a converged rigid hold sits at
        # C = 0 where the gradient is undefined, so forces are recovered from this.
        self.last_grad = np.zeros((k, 3))

    def add(self, particles, targets, compliance=0.0, owner: int = 0) -> None:
        particles = np.asarray(particles, dtype=np.int64).reshape(-1)
        self.particles = np.concatenate([self.particles, particles])
        self.targets = np.concatenate([self.targets, np.asarray(targets, float).reshape(-1, 3)])
        self.compliance = np.concatenate([self.compliance, np.full(len(particles), float(compliance))])
        self.owners = np.concatenate([self.owners, np.full(len(particles), owner, np.int64)])
        self.lam = np.zeros(len(self.particles))
        self.last_grad = np.zeros((len(self.particles), 3))

    def remove_owner(self, owner: int) -> int:
        keep = self.owners != owner
        n = int((~keep).sum())
        self.particles = self.particles[keep]
        self.targets = self.targets[keep]
        self.compliance = self.compliance[keep]
        self.owners = self.owners[keep]
        self.lam = self.lam[keep]
        self.last_grad = self.last_grad[keep]
        return n

    def remap(self, mapping: np.ndarray) -> None:
        self.particles = mapping[self.particles]

    def particles_of(self, i):
        return self.particles[i : i + 1]

    def compliance_of(self, i):
        return float(self.compliance[i])

    def evaluate(self, i, positions):
        d = positions[self.particles[i]] - self.targets[i]
        c = float(np.sqrt(d @ d))
        g = d / c if c > 0 else np.zeros(3)
        return c, g.reshape(1, 3)

    def project(self, positions, inv_mass, dt):
        return _project_attachments(positions, inv_mass, self.particles, self.targets, self.compliance, self.lam,
                                    self.last_grad, dt)

    def forces(self, positions, dt):
        return [(self.particles_of(i), self.lam[i] * self.last_grad[i : i + 1] / (dt * dt)) for i in self.active()]


@numba.njit(cache=True)
def _project_attachments(pos, w, idx, targets, alpha, lam, grad, dt):
    inv_dt2 = 1.0 / (dt * dt)
    for k in range(len(idx)):
        i = idx[k]
        dx = pos[i, 0] - targets[k, 0]
        dy = pos[i, 1] - targets[k, 1]
        dz = pos[i, 2] - targets[k, 2]
        c = np.sqrt(dx * dx + dy * dy + dz * dz)
        if c != c:
            return k
        if c == 0.0:
            continue
        grad[k, 0] = dx / c
        grad[k, 1] = dy / c
        grad[k, 2] = dz / c
        at = alpha[k] * inv_dt2
        denom = w[i] + at
        if denom < 1e-12:
            continue
        dlam = (-c - at * lam[k]) / denom
        lam[k] += dlam
        s = w[i] * dlam / c
        pos[i, 0] += s * dx
        pos[i, 1] += s * dy
        pos[i, 2] += s * dz
    return -1
