"""Tool-tissue interactions applied between frames.

All edits here run after a frame's substeps and before rendering: they add
or remove attachments, kill tets, split vertices that lost their face
connection, and update per-tet tissue flags (damaged, coagulated, clipped)
and per-face bleeding intensity.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numba
import numpy as np

from .instruments import Instrument, Pose
from .neohookean import MaterialParams, build_constraints, lumped_masses
from .tetmesh import TetMesh, compute_rest_state, extract_surface
from .xpbd_core import AttachmentBatch, ParticleSystem

log = logging.getLogger(__name__)

BLEED_FLOOR = 0.01
CLIP_OWNER_BASE = 1000


@dataclass
class InteractionParams:
    collision_margin: float = 1.0e-3
    jaw_radius: float = 6.0e-3
    tear_threshold: float = 1.8
    bleed_decay: float = 0.97
    clip_radius: float = 4.0e-3
    coag_radius: float = 4.0e-3
    dwell_frames: int = 5
    coag_stiffening: float = 0.25
    retract_speed: float = 5.0e-3
    contact_radius: float = 5.0e-3


@dataclass
class TissueState:
    bleed: np.ndarray  # (m, 4) per tet-face intensity in [0, 1]
    damaged: np.ndarray  # (m,) bool
    coagulated: np.ndarray
    clipped: np.ndarray

    @classmethod
    def empty(cls, n_tets: int) -> "TissueState":
        z = np.zeros(n_tets, dtype=bool)
        return cls(np.zeros((n_tets, 4)), z.copy(), z.copy(), z.copy())

    def face_bleed(self, surface) -> np.ndarray:
        return self.bleed[surface.owner_tet, surface.owner_face]


@dataclass
class Grip:
    particles: np.ndarray
    anchors: np.ndarray  # particle positions in the tool frame
    frame_attached: int = -1


class SoftBody:
    """Mesh + particle state + constraints + tissue flags for one simulation."""

    def __init__(self, mesh: TetMesh, materials, pinned=None, attachment_compliance: float = 0.0):
        if not mesh.has_rest_state:
            compute_rest_state(mesh)
        self.mesh = mesh
        self.materials = MaterialParams() if materials is None else materials
        self.constraints = build_constraints(mesh, self.materials)
        self.pinned = np.zeros(mesh.n_vertices, bool) if pinned is None else np.asarray(pinned, bool).copy()
        self.particles = ParticleSystem.at_rest(mesh.vertices_rest, np.zeros(mesh.n_vertices))
        self.attachments = AttachmentBatch()
        self.attachment_compliance = attachment_compliance
        self.tissue = TissueState.empty(mesh.n_tets)
        self.grips: dict[int, Grip] = {}
        self.clips: list[dict] = []
        self.dwell: dict[int, np.ndarray] = {}
        self.origin = np.arange(mesh.n_vertices)  # duplicated vertex -> vertex it was split from
        self.topology_version = 0
        self._surface = None
        self._surface_version = -1
        self.update_masses()

    # -------------------------------------------------------------- bookkeeping
    def update_masses(self) -> None:
        m = lumped_masses(self.mesh, self.materials)
        w = np.zeros_like(m)
        free = (m > 0) & ~self.pinned
        w[free] = 1.0 / m[free]
        self.particles.inv_mass = w

    def surface(self):
        if self._surface_version != self.topology_version:
            self._surface = extract_surface(self.mesh, self.mesh.vertices_rest)
            self._surface_version = self.topology_version
        return self._surface

    def used_vertices(self) -> np.ndarray:
        used = np.zeros(self.mesh.n_vertices, bool)
        used[self.mesh.tets[self.mesh.alive].ravel()] = True
        return used

    def surface_vertices(self) -> np.ndarray:
        s = np.zeros(self.mesh.n_vertices, bool)
        s[self.surface().triangles.ravel()] = True
        return s

    def vertex_tets(self, vertices) -> np.ndarray:
        """Alive tets touching any of ``vertices``."""
        mark = np.zeros(self.mesh.n_vertices, bool)
        mark[np.asarray(vertices, np.int64)] = True
        hit = mark[self.mesh.tets].any(axis=1) & self.mesh.alive
        return np.flatnonzero(hit)

    def majority_label(self, tets) -> int | None:
        tets = np.asarray(tets, np.int64)
        if len(tets) == 0:
            return None
        counts = Counter(int(l) for l in self.mesh.labels[tets])
        # Ties go to the lower label id.
        return min(counts, key=lambda l: (-counts[l], l))

    def tets_near(self, point, radius: float) -> np.ndarray:
        d = np.linalg.norm(self.particles.positions - np.asarray(point, float), axis=1)
        near = np.flatnonzero((d <= radius) & self.used_vertices())
        return self.vertex_tets(near)

    # -------------------------------------------------------------- attachments
    def update_attachment_targets(self, poses: dict[int, Pose]) -> None:
        """Move tool-owned attachment targets rigidly with their tool."""
        att = self.attachments
        for owner, grip in self.grips.items():
            if owner not in poses:
                continue
            sel = att.owners == owner
            if not sel.any():
                continue
            world = poses[owner].apply(grip.anchors)
            lookup = {int(p): k for k, p in enumerate(grip.particles)}
            rows = np.flatnonzero(sel)
            att.targets[rows] = world[[lookup[int(p)] for p in att.particles[rows]]]

    def constraint_batches(self, collisions=()) -> list:
        return [self.constraints, self.attachments, *collisions]

    # -------------------------------------------------------------- topology
    def kill_tets(self, tets, bleed: bool = True) -> np.ndarray:
        """Mark tets dead, expose neighbour faces, split disconnected vertices."""
        mesh, st = self.mesh, self.tissue
        tets = np.unique(np.asarray(tets, np.int64))
        tets = tets[mesh.alive[tets]]
        if len(tets) == 0:
            return tets
        mesh.alive[tets] = False
        nbr = mesh.face_neighbors()
        for t in tets:
            for k in range(4):
                n = nbr[t, k]
                if n < 0 or not mesh.alive[n]:
                    continue
                j = int(np.flatnonzero(nbr[n] == t)[0])
                if bleed and not (st.coagulated[n] or st.clipped[n]):
                    st.bleed[n, j] = 1.0
        st.bleed[tets] = 0.0
        self._split_vertices(np.unique(mesh.tets[tets].ravel()))
        self.constraints.refresh()
        self.update_masses()
        self.topology_version += 1
        return tets

    def _split_vertices(self, vertices) -> None:
        """Give each face-connected cluster of a vertex's alive star its own copy."""
        mesh = self.mesh
        nbr = mesh.face_neighbors()
        new_parents = []
        for v in vertices:
            star = np.flatnonzero((mesh.tets == v).any(axis=1) & mesh.alive)
            if len(star) < 2:
                continue
            in_star = set(int(t) for t in star)
            seen: set[int] = set()
            clusters = []
            for t0 in star:
                t0 = int(t0)
                if t0 in seen:
                    continue
                comp, stack = [], [t0]
                seen.add(t0)
                while stack:
                    t = stack.pop()
                    comp.append(t)
                    for k in range(4):
                        # Face k omits local vertex k; it must contain v to link the star.
                        if mesh.tets[t, k] == v:
                            continue
                        n = int(nbr[t, k])
                        if n in in_star and n not in seen:
                            seen.add(n)
                            stack.append(n)
                clusters.append(sorted(comp))
            for comp in clusters[1:]:
                new_index = mesh.n_vertices
                new_parents.append(int(v))
                rows = np.array(comp)
                sub = mesh.tets[rows]
                sub[sub == v] = new_index
                mesh.tets[rows] = sub
                mesh.vertices_rest = np.concatenate([mesh.vertices_rest, mesh.vertices_rest[v : v + 1]])
        if new_parents:
            parents = np.array(new_parents, np.int64)
            self.particles.append(parents)
            self.pinned = np.concatenate([self.pinned, self.pinned[parents]])
            self.origin = np.concatenate([self.origin, self.origin[parents]])

    def total_alive(self) -> int:
        return int(self.mesh.alive.sum())


# ------------------------------------------------------------------ operations


def grasp(body: SoftBody, owner: int, instrument: Instrument, pose: Pose, jaw_radius: float,
          frame: int = -1) -> np.ndarray:
    """Attach free surface particles within ``jaw_radius`` of the tool tip.

    Anchors are the particles' current positions in the tool frame, so the
    grasped tissue follows the tool rigidly. Returns the grasped particles.
    """
    tip = instrument.tip(pose)
    pos = body.particles.positions
    free = (body.particles.inv_mass > 0) & body.surface_vertices()
    d = np.linalg.norm(pos - tip, axis=1)
    cand = np.flatnonzero(free & (d <= jaw_radius))
    if owner in body.grips:
        cand = np.setdiff1d(cand, body.grips[owner].particles)
    if len(cand) == 0:
        log.info("grasp by %s at %s found no tissue within %.4f m", instrument.name, tip, jaw_radius)
        return cand
    anchors = pose.inverse().apply(pos[cand])
    if owner in body.grips:
        g = body.grips[owner]
        g.particles = np.concatenate([g.particles, cand])
        g.anchors = np.concatenate([g.anchors, anchors])
        g.frame_attached = frame
    else:
        body.grips[owner] = Grip(cand, anchors, frame)
    body.attachments.add(cand, pos[cand], body.attachment_compliance, owner)
    return cand


def release(body: SoftBody, owner: int) -> int:
    body.grips.pop(owner, None)
    return body.attachments.remove_owner(owner)


def grasped_label(body: SoftBody, owner: int) -> int | None:
    g = body.grips.get(owner)
    if g is None or len(g.particles) == 0:
        return None
    return body.majority_label(body.vertex_tets(g.particles))


def tear_update(body: SoftBody, tear_threshold: float) -> np.ndarray:
    """Kill tets whose relative distortion sqrt(tr(F^T F)/3) exceeds the threshold."""
    if not np.isfinite(tear_threshold):
        return np.zeros(0, np.int64)
    act = body.constraints.active_idx
    if len(act) == 0:
        return act
    rel = body.constraints.relative_distortion(body.particles.positions)
    torn = act[rel[act] > tear_threshold]
    if len(torn):
        body.tissue.damaged[torn] = True
        body.kill_tets(torn)
    return torn


def cut(body: SoftBody, sweep, min_label_filter=None) -> np.ndarray:
    """Kill every alive tet touched by the quad swept by a blade segment.

    ``sweep`` is (a0, b0, a1, b1): blade endpoints at frame start and end.
    Returns the killed tets.
    """
    a0, b0, a1, b1 = (np.asarray(p, float) for p in sweep)
    tris = np.array([[a0, b0, b1], [a0, b1, a1]])
    pos = body.particles.positions
    alive = np.flatnonzero(body.mesh.alive)
    hit = alive[_tets_hit_by_triangles(pos, body.mesh.tets, alive, tris)]
    if min_label_filter is not None:
        hit = hit[np.isin(body.mesh.labels[hit], list(min_label_filter))]
    if len(hit) == 0:
        log.info("cut sweep touched no tissue")
        return hit
    body.tissue.damaged[hit] = True
    return body.kill_tets(hit)


def clip(body: SoftBody, instrument: Instrument, pose: Pose, clip_radius: float) -> np.ndarray:
    """Fire a clip: pin nearby particles to world anchors and mark their tets clipped."""
    tip = instrument.tip(pose)
    pos = body.particles.positions
    d = np.linalg.norm(pos - tip, axis=1)
    cand = np.flatnonzero((d <= clip_radius) & body.used_vertices())
    if len(cand) == 0:
        log.info("clip fired at %s with no tissue within %.4f m", tip, clip_radius)
        return cand
    owner = CLIP_OWNER_BASE + len(body.clips)
    centroid = pos[cand].mean(axis=0)
    # Anchors are offsets in a world frame centred on the clip.
    offsets = pos[cand] - centroid
    body.attachments.add(cand, centroid + offsets, 0.0, owner)
    tets = body.vertex_tets(cand)
    body.tissue.clipped[tets] = True
    body.tissue.bleed[tets] = 0.0
    body.clips.append({"owner": owner, "particles": cand, "centroid": centroid, "tets": tets})
    return tets


def coagulate(body: SoftBody, owner: int, tip, cautery_on: bool, coag_radius: float,
              dwell_frames: int, stiffening: float = 0.25) -> np.ndarray:
    """Advance the dwell counter for tets near ``tip``; returns newly coagulated tets."""
    m = body.mesh.n_tets
    dwell = body.dwell.setdefault(owner, np.zeros(m, np.int64))
    if len(dwell) < m:
        dwell = body.dwell[owner] = np.concatenate([dwell, np.zeros(m - len(dwell), np.int64)])
    if not cautery_on:
        dwell[:] = 0
        return np.zeros(0, np.int64)
    near = np.zeros(m, bool)
    near[body.tets_near(tip, coag_radius)] = True
    dwell[near] += 1
    dwell[~near] = 0
    st = body.tissue
    new = np.flatnonzero((dwell >= dwell_frames) & ~st.coagulated & body.mesh.alive)
    if len(new):
        st.coagulated[new] = True
        st.bleed[new] = 0.0
        body.constraints.scale_deviatoric_compliance(new, stiffening)
    return new


def bleed_update(state: TissueState, decay: float) -> TissueState:
    state.bleed *= decay
    state.bleed[state.bleed < BLEED_FLOOR] = 0.0
    state.bleed[state.coagulated] = 0.0
    return state


def check_invariants(body: SoftBody) -> list[str]:
    """State-machine soundness checks; returns human-readable violations."""
    out = []
    st, mesh = body.tissue, body.mesh
    clip_parts = set()
    for c in body.clips:
        clip_parts.update(int(p) for p in c["particles"])
    att_parts = set(int(p) for p in body.attachments.particles[body.attachments.owners >= CLIP_OWNER_BASE])
    if not clip_parts <= att_parts:
        out.append("clipped particles without world attachments")
    for c in body.clips:
        if not st.clipped[c["tets"]].all():
            out.append("clip tets not marked clipped")
    if np.any(st.bleed[st.coagulated] != 0):
        out.append("coagulated tet with bleeding faces")
    dead = ~mesh.alive
    if np.any(body.constraints.enabled & dead):
        out.append("dead tet still constrained")
    surf = body.surface()
    if len(surf) and np.any(dead[surf.owner_tet]):
        out.append("dead tet owns surface faces")
    if np.any((st.bleed < 0) | (st.bleed > 1)):
        out.append("bleed intensity outside [0, 1]")
    return out


# ------------------------------------------------------------------ intersection


@numba.njit(cache=True)
def _overlap_on_axis(ax, ay, az, tet_pts, tri):
    n2 = ax * ax + ay * ay + az * az
    if n2 < 1e-30:
        return True
    lo1, hi1 = np.inf, -np.inf
    for i in range(4):
        d = ax * tet_pts[i, 0] + ay * tet_pts[i, 1] + az * tet_pts[i, 2]
        lo1 = min(lo1, d)
        hi1 = max(hi1, d)
    lo2, hi2 = np.inf, -np.inf
    for i in range(3):
        d = ax * tri[i, 0] + ay * tri[i, 1] + az * tri[i, 2]
        lo2 = min(lo2, d)
        hi2 = max(hi2, d)
    return not (hi1 < lo2 or hi2 < lo1)


@numba.njit(cache=True)
def tet_triangle_intersect(tet_pts, tri) -> bool:
    """Separating-axis test between a tetrahedron (4x3) and a triangle (3x3); touching counts."""
    faces = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))
    for f in faces:
        u = tet_pts[f[1]] - tet_pts[f[0]]
        v = tet_pts[f[2]] - tet_pts[f[0]]
        if not _overlap_on_axis(u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
                                u[0] * v[1] - u[1] * v[0], tet_pts, tri):
            return False
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    if not _overlap_on_axis(e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                            e1[0] * e2[1] - e1[1] * e2[0], tet_pts, tri):
        return False
    edges = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
    for a, b in edges:
        te = tet_pts[b] - tet_pts[a]
        for j in range(3):
            r = tri[(j + 1) % 3] - tri[j]
            if not _overlap_on_axis(te[1] * r[2] - te[2] * r[1], te[2] * r[0] - te[0] * r[2],
                                    te[0] * r[1] - te[1] * r[0], tet_pts, tri):
                return False
    return True


@numba.njit(cache=True)
def _tets_hit_by_triangles(pos, tets, candidates, tris):
    out = np.zeros(len(candidates), np.bool_)
    lo = np.empty(3)
    hi = np.empty(3)
    pts = np.empty((4, 3))
    for k in range(len(candidates)):
        t = candidates[k]
        for i in range(4):
            pts[i] = pos[tets[t, i]]
        for d in range(3):
            lo[d] = min(min(pts[0, d], pts[1, d]), min(pts[2, d], pts[3, d]))
            hi[d] = max(max(pts[0, d], pts[1, d]), max(pts[2, d], pts[3, d]))
        for j in range(len(tris)):
            tri = tris[j]
            overlap = True
            for d in range(3):
                tlo = min(tri[0, d], min(tri[1, d], tri[2, d]))
                thi = max(tri[0, d], max(tri[1, d], tri[2, d]))
                if thi < lo[d] or tlo > hi[d]:
                    overlap = False
            if overlap and tet_triangle_intersect(pts, tri):
                out[k] = True
                break
    return out

