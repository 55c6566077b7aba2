"""Neo-Hookean material as a pair of XPBD constraints per tet.

Energy density: lambda/2 (det F - 1)^2 + mu/2 (tr(F^T F) - 3).
Hydrostatic constraint  C_H = det F - 1            (compliance 1/(lambda V))
Deviatoric constraint   C_D = sqrt(tr(F^T F)) - sqrt(3)   (compliance 1/(mu V))
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numba
import numpy as np

from .tetmesh import TetMesh
from .xpbd_core import ConstraintBatch, color_constraints

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
COLLAPSED_EPS = 1e-9


@dataclass(frozen=True)
class MaterialParams:
    lame_lambda: float = 5.0e4
    lame_mu: float = 1.0e4
    density: float = 1000.0

    def __post_init__(self):
        if not (self.lame_lambda > 0 and self.lame_mu > 0):
            raise ValueError("Lame parameters must be positive")
        if not self.density > 0:
            raise ValueError("density must be positive")

    def hydrostatic_compliance(self, rest_volume):
        return 1.0 / (self.lame_lambda * np.asarray(rest_volume))

    def deviatoric_compliance(self, rest_volume):
        return 1.0 / (self.lame_mu * np.asarray(rest_volume))


def energy(F, params: MaterialParams) -> float:
    F = np.asarray(F, dtype=float)
    j = np.linalg.det(F)
    return 0.5 * params.lame_lambda * (j - 1.0) ** 2 + 0.5 * params.lame_mu * (np.sum(F * F) - 3.0)


def cofactor(F) -> np.ndarray:
    """d det(F)/dF, valid for singular and inverted F."""
    F = np.asarray(F, dtype=float)
    f0, f1, f2 = F[:, 0], F[:, 1], F[:, 2]
    return np.stack([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=1)


def _particle_gradients(dC_dF: np.ndarray, inv_rest_matrix: np.ndarray) -> np.ndarray:
    # Chain rule through D_s = F D_m: dC/dD_s = dC/dF D_m^-T; its columns are dC/dx1..x3.
    g = dC_dF @ np.asarray(inv_rest_matrix).T
    out = np.empty((4, 3))
    out[1:] = g.T
    out[0] = -out[1:].sum(axis=0)
    return out


def hydrostatic_eval(F, inv_rest_matrix) -> tuple[float, np.ndarray]:
    F = np.asarray(F, dtype=float)
    return float(np.linalg.det(F) - 1.0), _particle_gradients(cofactor(F), inv_rest_matrix)


def deviatoric_eval(F, inv_rest_matrix) -> tuple[float, np.ndarray | None]:
    """Returns ``(sqrt(tr F^T F), gradients)``; gradients are ``None`` for a collapsed tet."""
    F = np.asarray(F, dtype=float)
    r = math.sqrt(float(np.sum(F * F)))
    if r < COLLAPSED_EPS:
        log.debug("collapsed tet: sqrt(tr(F^T F)) = %.3e, deviatoric projection skipped", r)
        return r, None
    return r, _particle_gradients(F / r, inv_rest_matrix)


@dataclass
class GradientCheck:
    samples: int
    max_rel_error_hydrostatic: float
    max_rel_error_deviatoric: float
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_hydrostatic, self.max_rel_error_deviatoric)


def _rel_error(analytic, numeric) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / scale)


def validate_gradients(samples: int = 1000, seed: int = 0, step: float = 1e-6) -> GradientCheck:
    """Compare analytic particle gradients of C_H and C_D with central differences.

    Each sample draws a random rest tet and a random (possibly inverted)
    deformation gradient; the 12 position derivatives are differenced with
    step ``step`` scaled by the rest edge length.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_h = worst_d = 0.0
    for _ in range(samples):
        while True:
            rest = rng.normal(size=(4, 3))
            dm = (rest[1:] - rest[0]).T
            if abs(np.linalg.det(dm)) > 0.1:
                break
        dminv = np.linalg.inv(dm)
        F = rng.normal(size=(3, 3)) + np.eye(3)
        x = rest @ F.T

        def f_of(pos):
            return np.stack([pos[1] - pos[0], pos[2] - pos[0], pos[3] - pos[0]], axis=1) @ dminv

        _, gh = hydrostatic_eval(f_of(x), dminv)
        _, gd = deviatoric_eval(f_of(x), dminv)
        nh, nd = np.empty((4, 3)), np.empty((4, 3))
        h = step * float(np.abs(dm).max())
        for a in range(4):
            for c in range(3):
                xp, xm = x.copy(), x.copy()
                xp[a, c] += h
                xm[a, c] -= h
                nh[a, c] = (np.linalg.det(f_of(xp)) - np.linalg.det(f_of(xm))) / (2 * h)
                nd[a, c] = (math.sqrt(np.sum(f_of(xp) ** 2)) - math.sqrt(np.sum(f_of(xm) ** 2))) / (2 * h)
        worst_h = max(worst_h, _rel_error(gh, nh))
        worst_d = max(worst_d, _rel_error(gd, nd))
    return GradientCheck(samples, worst_h, worst_d, time.perf_counter() - t0)


class NeoHookeanConstraintPair(NamedTuple):
    tet_index: int
    hydrostatic: object
    deviatoric: object


class _TetPart(ConstraintBatch):
    """One constraint per active tet; ``lam``/``alpha`` are indexed by tet id."""

    def __init__(self, owner: "NeoHookeanBatch", kind: str, alpha: np.ndarray, target: np.ndarray):
        self.owner = owner
        self.kind = kind
        self.alpha = alpha
        self.target = target
        self.lam = np.zeros(len(alpha))
        self.collapsed = 0

    def __len__(self):
        return len(self.owner.active_idx)

    def active(self):
        return self.owner.active_idx

    def reset(self):
        self.lam[:] = 0.0

    def particles_of(self, i):
        return self.owner.mesh.tets[i].copy()

    def compliance_of(self, i):
        return float(self.alpha[i])

    def evaluate(self, i, positions):
        mesh = self.owner.mesh
        p = positions[mesh.tets[i]]
        F = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1) @ mesh.inv_rest_matrix[i]
        if self.kind == "hydrostatic":
            c, g = hydrostatic_eval(F, mesh.inv_rest_matrix[i])
            return c + 1.0 - self.target[i], g
        c, g = deviatoric_eval(F, mesh.inv_rest_matrix[i])
        if g is None:
            g = np.zeros((4, 3))
        return c - self.target[i], g

    def project(self, positions, inv_mass, dt):
        mesh = self.owner.mesh
        kern = _sweep_hydrostatic if self.kind == "hydrostatic" else _sweep_deviatoric
        bad, collapsed = kern(
            positions, inv_mass, mesh.tets, mesh.inv_rest_matrix, self.alpha, self.target,
            self.lam, self.owner.active_idx, dt,
        )
        self.collapsed += collapsed
        return bad

    def project_parallel(self, positions, inv_mass, dt):
        mesh = self.owner.mesh
        kern = _sweep_hydrostatic_par if self.kind == "hydrostatic" else _sweep_deviatoric_par
        flags = self.owner.flag_buffer
        for color in self.owner.colors():
            kern(positions, inv_mass, mesh.tets, mesh.inv_rest_matrix, self.alpha, self.target,
                 self.lam, color, dt, flags)
            bad = _first_flag(flags, color)
            if bad >= 0:
                return bad
        return -1


class NeoHookeanBatch(ConstraintBatch):
    """Hydrostatic + deviatoric constraints for every alive tet of a mesh."""

    kind = "neohookean"

    def __init__(self, mesh: TetMesh, alpha_h, alpha_d, target_h):
        self.mesh = mesh
        m = mesh.n_tets
        self.enabled = mesh.alive.copy()
        self.deviatoric = _TetPart(self, "deviatoric", np.asarray(alpha_d, float).copy(), np.full(m, SQRT3))
        self.hydrostatic = _TetPart(self, "hydrostatic", np.asarray(alpha_h, float).copy(),
                                    np.asarray(target_h, float).copy())
        self.flag_buffer = np.full(m, -1, np.int64)
        self._colors = None
        self.refresh()

    def refresh(self) -> None:
        """Recompute the active set after tets die or lose their constraints."""
        self.enabled &= self.mesh.alive
        self.active_idx = np.flatnonzero(self.enabled).astype(np.int64)
        self._colors = None

    def colors(self) -> list[np.ndarray]:
        if self._colors is None:
            local = color_constraints(self.mesh.tets[self.active_idx], self.mesh.n_vertices)
            self._colors = [self.active_idx[c] for c in local]
        return self._colors

    def disable(self, tets) -> None:
        self.enabled[np.asarray(tets, dtype=np.int64)] = False
        self.refresh()

    def scale_deviatoric_compliance(self, tets, factor: float) -> None:
        self.deviatoric.alpha[np.asarray(tets, dtype=np.int64)] *= factor

    def parts(self):
        return [self.deviatoric, self.hydrostatic]

    def __len__(self):
        return 2 * len(self.active_idx)

    @property
    def lam(self):
        return np.concatenate([self.deviatoric.lam[self.active_idx], self.hydrostatic.lam[self.active_idx]])

    def reset(self):
        self.deviatoric.reset()
        self.hydrostatic.reset()

    def project(self, positions, inv_mass, dt):
        raise TypeError("project the parts (deviatoric, hydrostatic) individually")

    def pairs(self):
        for t in self.active_idx:
            yield NeoHookeanConstraintPair(int(t), self.hydrostatic.constraint(t), self.deviatoric.constraint(t))

    def relative_distortion(self, positions) -> np.ndarray:
        """sqrt(tr(F^T F) / 3) per tet (1 at rest)."""
        return _relative_distortion(positions, self.mesh.tets, self.mesh.inv_rest_matrix)


def per_tet_params(mesh: TetMesh, params: MaterialParams | Mapping[int, MaterialParams]) -> list[MaterialParams]:
    if isinstance(params, MaterialParams):
        return [params] * mesh.n_tets
    default = params.get(None, MaterialParams())
    return [params.get(int(l), default) for l in mesh.labels]


def build_constraints(
    mesh: TetMesh,
    params: MaterialParams | Mapping[int, MaterialParams],
    hydrostatic_correction: bool = False,
) -> NeoHookeanBatch:
    """One hydrostatic and one deviatoric constraint per alive tet.

    ``params`` is a single material or a mapping from label id to material
    (key ``None`` is the fallback). With ``hydrostatic_correction`` the
    hydrostatic target becomes 1 + mu/lambda instead of 1.
    """
    if not mesh.has_rest_state:
        raise ValueError("compute_rest_state must run before build_constraints")
    mats = per_tet_params(mesh, params)
    lam = np.array([p.lame_lambda for p in mats])
    mu = np.array([p.lame_mu for p in mats])
    v = mesh.rest_volume
    target = 1.0 + mu / lam if hydrostatic_correction else np.ones(mesh.n_tets)
    return NeoHookeanBatch(mesh, 1.0 / (lam * v), 1.0 / (mu * v), target)


def lumped_masses(mesh: TetMesh, params, n_vertices: int | None = None) -> np.ndarray:
    """Vertex masses from alive tets (a quarter of each tet's mass per corner)."""
    mats = per_tet_params(mesh, params)
    rho = np.array([p.density for p in mats])
    n = mesh.n_vertices if n_vertices is None else n_vertices
    m = np.zeros(n)
    alive = mesh.alive
    np.add.at(m, mesh.tets[alive].ravel(), np.repeat(rho[alive] * mesh.rest_volume[alive] / 4.0, 4))
    return m


# --------------------------------------------------------------------------- kernels


@numba.njit(cache=True, inline="always")
def _tet_F(pos, tets, dminv, t):
    i0, i1, i2, i3 = tets[t, 0], tets[t, 1], tets[t, 2], tets[t, 3]
    a0 = pos[i1, 0] - pos[i0, 0]
    a1 = pos[i1, 1] - pos[i0, 1]
    a2 = pos[i1, 2] - pos[i0, 2]
    b0 = pos[i2, 0] - pos[i0, 0]
    b1 = pos[i2, 1] - pos[i0, 1]
    b2 = pos[i2, 2] - pos[i0, 2]
    c0 = pos[i3, 0] - pos[i0, 0]
    c1 = pos[i3, 1] - pos[i0, 1]
    c2 = pos[i3, 2] - pos[i0, 2]
    m = dminv[t]
    # F[r, c] = a_r m[0, c] + b_r m[1, c] + c_r m[2, c]
    f00 = a0 * m[0, 0] + b0 * m[1, 0] + c0 * m[2, 0]
    f01 = a0 * m[0, 1] + b0 * m[1, 1] + c0 * m[2, 1]
    f02 = a0 * m[0, 2] + b0 * m[1, 2] + c0 * m[2, 2]
    f10 = a1 * m[0, 0] + b1 * m[1, 0] + c1 * m[2, 0]
    f11 = a1 * m[0, 1] + b1 * m[1, 1] + c1 * m[2, 1]
    f12 = a1 * m[0, 2] + b1 * m[1, 2] + c1 * m[2, 2]
    f20 = a2 * m[0, 0] + b2 * m[1, 0] + c2 * m[2, 0]
    f21 = a2 * m[0, 1] + b2 * m[1, 1] + c2 * m[2, 1]
    f22 = a2 * m[0, 2] + b2 * m[1, 2] + c2 * m[2, 2]
    return f00, f01, f02, f10, f11, f12, f20, f21, f22


@numba.njit(cache=True, inline="always")
def _apply(pos, w, tets, dminv, t, p00, p01, p02, p10, p11, p12, p20, p21, p22, c, alpha_t, lam):
    """Project one constraint given dC/dF = P. Returns delta-lambda (nan flags failure)."""
    m = dminv[t]
    # G = P m^T ; column i is the gradient for vertex i+1.
    g10 = p00 * m[0, 0] + p01 * m[0, 1] + p02 * m[0, 2]
    g11 = p10 * m[0, 0] + p11 * m[0, 1] + p12 * m[0, 2]
    g12 = p20 * m[0, 0] + p21 * m[0, 1] + p22 * m[0, 2]
    g20 = p00 * m[1, 0] + p01 * m[1, 1] + p02 * m[1, 2]
    g21 = p10 * m[1, 0] + p11 * m[1, 1] + p12 * m[1, 2]
    g22 = p20 * m[1, 0] + p21 * m[1, 1] + p22 * m[1, 2]
    g30 = p00 * m[2, 0] + p01 * m[2, 1] + p02 * m[2, 2]
    g31 = p10 * m[2, 0] + p11 * m[2, 1] + p12 * m[2, 2]
    g32 = p20 * m[2, 0] + p21 * m[2, 1] + p22 * m[2, 2]
    g00 = -(g10 + g20 + g30)
    g01 = -(g11 + g21 + g31)
    g02 = -(g12 + g22 + g32)
    i0, i1, i2, i3 = tets[t, 0], tets[t, 1], tets[t, 2], tets[t, 3]
    w0, w1, w2, w3 = w[i0], w[i1], w[i2], w[i3]
    denom = (
        w0 * (g00 * g00 + g01 * g01 + g02 * g02)
        + w1 * (g10 * g10 + g11 * g11 + g12 * g12)
        + w2 * (g20 * g20 + g21 * g21 + g22 * g22)
        + w3 * (g30 * g30 + g31 * g31 + g32 * g32)
        + alpha_t
    )
    if not (denom >= 1e-12):
        if denom != denom:
            return np.nan
        return 0.0
    dlam = (-c - alpha_t * lam) / denom
    if not (abs(dlam) < np.inf):
        return np.nan
    s = w0 * dlam
    pos[i0, 0] += s * g00
    pos[i0, 1] += s * g01
    pos[i0, 2] += s * g02
    s = w1 * dlam
    pos[i1, 0] += s * g10
    pos[i1, 1] += s * g11
    pos[i1, 2] += s * g12
    s = w2 * dlam
    pos[i2, 0] += s * g20
    pos[i2, 1] += s * g21
    pos[i2, 2] += s * g22
    s = w3 * dlam
    pos[i3, 0] += s * g30
    pos[i3, 1] += s * g31
    pos[i3, 2] += s * g32
    return dlam


@numba.njit(cache=True, inline="always")
def _project_hyd(pos, w, tets, dminv, alpha, target, lam, t, inv_dt2):
    f00, f01, f02, f10, f11, f12, f20, f21, f22 = _tet_F(pos, tets, dminv, t)
    # cofactor columns: f1 x f2, f2 x f0, f0 x f1 (f_c = column c of F)
    p00 = f11 * f22 - f21 * f12
    p10 = f21 * f02 - f01 * f22
    p20 = f01 * f12 - f11 * f02
    p01 = f12 * f20 - f22 * f10
    p11 = f22 * f00 - f02 * f20
    p21 = f02 * f10 - f12 * f00
    p02 = f10 * f21 - f20 * f11
    p12 = f20 * f01 - f00 * f21
    p22 = f00 * f11 - f10 * f01
    det = f00 * p00 + f10 * p10 + f20 * p20
    return _apply(pos, w, tets, dminv, t, p00, p01, p02, p10, p11, p12, p20, p21, p22,
                  det - target[t], alpha[t] * inv_dt2, lam[t])


@numba.njit(cache=True)
def _sweep_deviatoric(pos, w, tets, dminv, alpha, target, lam, idx, dt):
    inv_dt2 = 1.0 / (dt * dt)
    collapsed = 0
    for k in range(len(idx)):
        t = idx[k]
        f00, f01, f02, f10, f11, f12, f20, f21, f22 = _tet_F(pos, tets, dminv, t)
        r = math.sqrt(f00 * f00 + f01 * f01 + f02 * f02 + f10 * f10 + f11 * f11 + f12 * f12
                      + f20 * f20 + f21 * f21 + f22 * f22)
        if r < 1e-9:
            collapsed += 1
            continue
        ir = 1.0 / r
        d = _apply(pos, w, tets, dminv, t, f00 * ir, f01 * ir, f02 * ir, f10 * ir, f11 * ir, f12 * ir,
                   f20 * ir, f21 * ir, f22 * ir, r - target[t], alpha[t] * inv_dt2, lam[t])
        if d != d:
            return t, collapsed
        lam[t] += d
    return -1, collapsed


@numba.njit(cache=True)
def _sweep_hydrostatic(pos, w, tets, dminv, alpha, target, lam, idx, dt):
    inv_dt2 = 1.0 / (dt * dt)
    for k in range(len(idx)):
        t = idx[k]
        d = _project_hyd(pos, w, tets, dminv, alpha, target, lam, t, inv_dt2)
        if d != d:
            return t, 0
        lam[t] += d
    return -1, 0


@numba.njit(cache=True, parallel=True)
def _sweep_deviatoric_par(pos, w, tets, dminv, alpha, target, lam, idx, dt, flags):
    inv_dt2 = 1.0 / (dt * dt)
    for k in numba.prange(len(idx)):
        t = idx[k]
        flags[t] = -1
        f00, f01, f02, f10, f11, f12, f20, f21, f22 = _tet_F(pos, tets, dminv, t)
        r = math.sqrt(f00 * f00 + f01 * f01 + f02 * f02 + f10 * f10 + f11 * f11 + f12 * f12
                      + f20 * f20 + f21 * f21 + f22 * f22)
        if r >= 1e-9:
            ir = 1.0 / r
            d = _apply(pos, w, tets, dminv, t, f00 * ir, f01 * ir, f02 * ir, f10 * ir, f11 * ir,
                       f12 * ir, f20 * ir, f21 * ir, f22 * ir, r - target[t], alpha[t] * inv_dt2, lam[t])
            if d != d:
                flags[t] = 1
            else:
                lam[t] += d


@numba.njit(cache=True, parallel=True)
def _sweep_hydrostatic_par(pos, w, tets, dminv, alpha, target, lam, idx, dt, flags):
    inv_dt2 = 1.0 / (dt * dt)
    for k in numba.prange(len(idx)):
        t = idx[k]
        d = _project_hyd(pos, w, tets, dminv, alpha, target, lam, t, inv_dt2)
        if d != d:
            flags[t] = 1
        else:
            flags[t] = -1
            lam[t] += d


@numba.njit(cache=True)
def _first_flag(flags, idx):
    best = -1
    for k in range(len(idx)):
        t = idx[k]
        if flags[t] == 1 and (best < 0 or t < best):
            best = t
    return best


@numba.njit(cache=True)
def _relative_distortion(pos, tets, dminv):
    out = np.empty(len(tets))
    for t in range(len(tets)):
        f00, f01, f02, f10, f11, f12, f20, f21, f22 = _tet_F(pos, tets, dminv, t)
        s = (f00 * f00 + f01 * f01 + f02 * f02 + f10 * f10 + f11 * f11 + f12 * f12
             + f20 * f20 + f21 * f21 + f22 * f22)
        out[t] = math.sqrt(s / 3.0)
    return out
