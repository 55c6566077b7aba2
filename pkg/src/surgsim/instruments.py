"""Rigid instruments: poses, scripted timelines, capsule collision proxies."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numba
import numpy as np
import yaml

from .labels import label_id
from .xpbd_core import ConstraintBatch

KINDS = ("grasper", "hook", "scissors", "clip_applier")
ACTIONS = ("jaw_close", "jaw_open", "cautery_on", "cautery_off", "cut_stroke", "clip_fire", "release")
# Triplet vocabulary names the clip applier "clipper".
TRIPLET_NAMES = {"grasper": "grasper", "hook": "hook", "scissors": "scissors", "clip_applier": "clipper"}


# ----------------------------------------------------------------- quaternions (w, x, y, z)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = np.sin(angle / 2.0)
    return np.array([np.cos(angle / 2.0), *(axis * s)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def quat_from_direction(direction, reference=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Shortest-arc rotation taking ``reference`` onto ``direction``."""
    a = np.asarray(reference, float) / np.linalg.norm(reference)
    b = np.asarray(direction, float) / np.linalg.norm(direction)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return quat_from_axis_angle(perp, np.pi)
    axis = np.cross(a, b)
    return quat_normalize([1.0 + c, *axis])


def slerp(q0, q1, s: float) -> np.ndarray:
    q0 = np.asarray(q0, float)
    q1 = np.asarray(q1, float)
    d = float(q0 @ q1)
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        return quat_normalize(q0 + s * (q1 - q0))
    theta = np.arccos(min(d, 1.0))
    sin_t = np.sin(theta)
    return (np.sin((1.0 - s) * theta) * q0 + np.sin(s * theta) * q1) / sin_t


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.matrix.T + self.translation

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(-(quat_to_matrix(qi) @ self.translation), qi)

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first."""
        return Pose(self.apply(other.translation), quat_normalize(quat_mul(self.rotation, other.rotation)))

    def as_dict(self) -> dict:
        return {"translation": [float(x) for x in self.translation], "rotation": [float(x) for x in self.rotation]}


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``position`` looking at ``target``.

    Camera axes: +z forward, +x right, +y down (image rows grow downward).
    """
    position = np.asarray(position, float)
    fwd = np.asarray(target, float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coordinates
    return Pose(-(R @ position), quat_from_matrix(R))


# ----------------------------------------------------------------- instruments


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, float).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, float).reshape(3))
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")


@dataclass
class Instrument:
    kind: str
    capsules: list[Capsule]
    tip_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    label: int = 0
    visual: list[Capsule] = field(default_factory=list)
    blade: tuple[np.ndarray, np.ndarray] | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown instrument kind {self.kind!r}")
        if not self.capsules:
            raise ValueError("instrument needs at least one capsule")
        self.tip_offset = np.asarray(self.tip_offset, float).reshape(3)
        if not self.label:
            self.label = label_id(self.kind)
        if not self.visual:
            self.visual = list(self.capsules)
        if not self.name:
            self.name = self.kind

    def world_capsules(self, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        """(c, 2, 3) world segment endpoints and (c,) radii."""
        seg = np.stack([np.stack([c.a, c.b]) for c in self.capsules])
        return pose.apply(seg.reshape(-1, 3)).reshape(-1, 2, 3), np.array([c.radius for c in self.capsules])

    def tip(self, pose: Pose) -> np.ndarray:
        return pose.apply(self.tip_offset)

    def blade_world(self, pose: Pose) -> np.ndarray | None:
        if self.blade is None:
            return None
        return pose.apply(np.stack(self.blade))


def _capsules_from(spec) -> list[Capsule]:
    return [Capsule(c["a"], c["b"], float(c["radius"])) for c in spec]


def instrument_from_dict(kind: str, spec: dict, name: str = "") -> Instrument:
    blade = spec.get("blade")
    return Instrument(
        kind=kind,
        capsules=_capsules_from(spec["capsules"]),
        tip_offset=np.asarray(spec.get("tip_offset", [0.0, 0.0, 0.0]), float),
        label=label_id(spec.get("label", kind)),
        visual=_capsules_from(spec.get("visual", [])),
        blade=None if blade is None else (np.asarray(blade[0], float), np.asarray(blade[1], float)),
        name=name or kind,
    )


def load_instrument_library(path: str | Path | None = None) -> dict[str, dict]:
    """Kind -> raw definition. ``None`` loads the bundled library."""
    if path is None:
        text = resources.files("surgsim").joinpath("data/instruments.yaml").read_text()
    else:
        text = Path(path).read_text()
    lib = yaml.safe_load(text) or {}
    unknown = set(lib) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown instrument kinds in library: {sorted(unknown)}")
    return lib


# ----------------------------------------------------------------- timelines


@dataclass
class ToolTimeline:
    keyframes: list[tuple[float, Pose]]
    events: list[tuple[float, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.keyframes:
            raise ValueError("timeline needs at least one keyframe")
        times = [t for t, _ in self.keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")
        for _, action in self.events:
            if action not in ACTIONS:
                raise ValueError(f"unknown action {action!r}")
        self.events = sorted(self.events, key=lambda e: e[0])
        self._times = times

    def events_in(self, t0: float, t1: float) -> list[str]:
        """Actions with t0 <= t < t1, in time order."""
        return [a for t, a in self.events if t0 <= t < t1]


def pose_at(timeline: ToolTimeline, t: float) -> Pose:
    """Linear translation / slerp rotation between bracketing keyframes, clamped at the ends."""
    times = timeline._times
    kf = timeline.keyframes
    if t <= times[0]:
        return kf[0][1]
    if t >= times[-1]:
        return kf[-1][1]
    j = bisect.bisect_right(times, t)
    t0, p0 = kf[j - 1]
    t1, p1 = kf[j]
    s = (t - t0) / (t1 - t0)
    return Pose((1.0 - s) * p0.translation + s * p1.translation, slerp(p0.rotation, p1.rotation, s))


# ----------------------------------------------------------------- signed distance


def segment_distance(points, a, b) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, float))
    ab = b - a
    denom = float(ab @ ab)
    s = np.zeros(len(p)) if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(p - closest, axis=1)


def capsule_sdf(capsules, pose: Pose, point):
    """Signed distance (m) from ``point`` (or an (n, 3) array) to the union of capsules."""
    p = np.asarray(point, float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    best = np.full(len(pts), np.inf)
    for c in capsules:
        a, b = pose.apply(np.stack([c.a, c.b]))
        best = np.minimum(best, segment_distance(pts, a, b) - c.radius)
    return float(best[0]) if single else best


class CollisionBatch(ConstraintBatch):
    """Inequality constraints C = sdf(x) - margin >= 0 against one instrument.

    The sdf is re-evaluated at the current position on every projection.
    """

    kind = "collision"
    is_inequality = True

    def __init__(self, particles, segments, radii, margin: float, compliance: float = 0.0):
        self.particles = np.asarray(particles, np.int64).reshape(-1)
        self.segments = np.ascontiguousarray(segments, float).reshape(-1, 2, 3)
        self.radii = np.ascontiguousarray(radii, float).reshape(-1)
        self.margin = float(margin)
        self.compliance = float(compliance)
        self.lam = np.zeros(len(self.particles))

    @classmethod
    def empty(cls) -> "CollisionBatch":
        return cls([], np.zeros((0, 2, 3)), np.zeros(0), 0.0)

    def particles_of(self, i):
        return self.particles[i : i + 1]

    def compliance_of(self, i):
        return self.compliance

    def evaluate(self, i, positions):
        d, g = _sdf_grad(positions[self.particles[i]], self.segments, self.radii)
        return d - self.margin, np.asarray(g).reshape(1, 3)

    def project(self, positions, inv_mass, dt):
        return _project_collisions(positions, inv_mass, self.particles, self.segments, self.radii,
                                   self.margin, self.compliance, self.lam, dt)

    @staticmethod
    def merge(batches) -> "CollisionBatch":
        """Concatenate per-instrument batches (in instrument order) into one."""
        batches = [b for b in batches if len(b)]
        if not batches:
            return CollisionBatch.empty()
        if len(batches) == 1:
            return batches[0]
        return _MergedCollisions(batches)


class _MergedCollisions(ConstraintBatch):
    kind = "collision"
    is_inequality = True

    def __init__(self, batches):
        self.batches = batches
        self._offsets = np.cumsum([0] + [len(b) for b in batches])

    @property
    def lam(self):
        return np.concatenate([b.lam for b in self.batches])

    def __len__(self):
        return int(self._offsets[-1])

    def reset(self):
        for b in self.batches:
            b.reset()

    def _locate(self, i):
        j = int(np.searchsorted(self._offsets, i, side="right") - 1)
        return self.batches[j], i - int(self._offsets[j])

    def particles_of(self, i):
        b, k = self._locate(i)
        return b.particles_of(k)

    def compliance_of(self, i):
        b, k = self._locate(i)
        return b.compliance_of(k)

    def evaluate(self, i, positions):
        b, k = self._locate(i)
        return b.evaluate(k, positions)

    def project(self, positions, inv_mass, dt):
        for j, b in enumerate(self.batches):
            bad = b.project(positions, inv_mass, dt)
            if bad >= 0:
                return int(self._offsets[j]) + bad
        return -1


def generate_collision_constraints(
    instrument: Instrument,
    pose: Pose,
    positions: np.ndarray,
    margin: float = 1e-3,
    detect_margin: float | None = None,
    exclude: np.ndarray | None = None,
) -> CollisionBatch:
    """Emit one inequality constraint per particle with sdf < ``detect_margin``.

    ``detect_margin`` defaults to ``margin``; a larger value acts as a
    broadphase so constraints created before prediction still catch
    particles that move into the tool during the substep.
    """
    detect = margin if detect_margin is None else max(detect_margin, margin)
    seg, radii = instrument.world_capsules(pose)
    sdf = _sdf_many(np.ascontiguousarray(positions, float), seg, radii)
    hit = sdf < detect
    if exclude is not None and len(exclude):
        hit[np.asarray(exclude, np.int64)] = False
    return CollisionBatch(np.flatnonzero(hit), seg, radii, margin)


@numba.njit(cache=True)
def _seg_closest(px, py, pz, seg, k):
    ax, ay, az = seg[k, 0, 0], seg[k, 0, 1], seg[k, 0, 2]
    bx, by, bz = seg[k, 1, 0] - ax, seg[k, 1, 1] - ay, seg[k, 1, 2] - az
    denom = bx * bx + by * by + bz * bz
    s = 0.0
    if denom > 0.0:
        s = ((px - ax) * bx + (py - ay) * by + (pz - az) * bz) / denom
        s = min(max(s, 0.0), 1.0)
    return ax + s * bx, ay + s * by, az + s * bz, bx, by, bz


@numba.njit(cache=True)
def _sdf_grad(p, seg, radii):
    best = np.inf
    gx, gy, gz = 0.0, 0.0, 1.0
    for k in range(len(radii)):
        cx, cy, cz, bx, by, bz = _seg_closest(p[0], p[1], p[2], seg, k)
        dx, dy, dz = p[0] - cx, p[1] - cy, p[2] - cz
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        if d - radii[k] < best:
            best = d - radii[k]
            if d > 1e-15:
                gx, gy, gz = dx / d, dy / d, dz / d
            else:
                # On the axis: push along any direction perpendicular to it.
                ux, uy, uz = (1.0, 0.0, 0.0) if abs(bx) < 0.9 * np.sqrt(bx * bx + by * by + bz * bz + 1e-300) else (0.0, 1.0, 0.0)
                px_ = uy * bz - uz * by
                py_ = uz * bx - ux * bz
                pz_ = ux * by - uy * bx
                n = np.sqrt(px_ * px_ + py_ * py_ + pz_ * pz_)
                if n > 0:
                    gx, gy, gz = px_ / n, py_ / n, pz_ / n
    return best, (gx, gy, gz)


@numba.njit(cache=True)
def _sdf_many(pos, seg, radii):
    out = np.empty(len(pos))
    for i in range(len(pos)):
        best = np.inf
        for k in range(len(radii)):
            cx, cy, cz, _, _, _ = _seg_closest(pos[i, 0], pos[i, 1], pos[i, 2], seg, k)
            dx, dy, dz = pos[i, 0] - cx, pos[i, 1] - cy, pos[i, 2] - cz
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[k]
            if d < best:
                best = d
        out[i] = best
    return out


@numba.njit(cache=True)
def _project_collisions(pos, w, idx, seg, radii, margin, alpha, lam, dt):
    at = alpha / (dt * dt)
    for k in range(len(idx)):
        i = idx[k]
        d, g = _sdf_grad(pos[i], seg, radii)
        c = d - margin
        if c != c:
            return k
        if c >= 0.0:
            continue
        denom = w[i] + at
        if denom < 1e-12:
            continue
        dlam = (-c - at * lam[k]) / denom
        lam[k] += dlam
        s = w[i] * dlam
        pos[i, 0] += s * g[0]
        pos[i, 1] += s * g[1]
        pos[i, 2] += s * g[2]
    return -1


def capsule_mesh(capsule: Capsule, segments: int = 12, rings: int = 4):
    """Triangle mesh (vertices, triangles) approximating a capsule, for rendering."""
    a, b, r = capsule.a, capsule.b, capsule.radius
    axis = b - a
    length = np.linalg.norm(axis)
    z = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
    x = np.cross(z, [1.0, 0.0, 0.0])
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    # Latitude rings from the a-pole to the b-pole.
    lat = []
    for i in range(rings + 1):
        phi = -np.pi / 2 + (np.pi / 2) * i / rings
        lat.append((a, phi))
    for i in range(rings + 1):
        phi = (np.pi / 2) * i / rings
        lat.append((b, phi))
    theta = 2 * np.pi * np.arange(segments) / segments
    ring_dirs = np.cos(theta)[:, None] * x + np.sin(theta)[:, None] * y
    verts = []
    for centre, phi in lat:
        verts.append(centre + r * (np.cos(phi) * ring_dirs + np.sin(phi) * z))
    verts = np.concatenate(verts)
    tris = []
    nr = len(lat)
    for i in range(nr - 1):
        for j in range(segments):
            j2 = (j + 1) % segments
            v00, v01 = i * segments + j, i * segments + j2
            v10, v11 = (i + 1) * segments + j, (i + 1) * segments + j2
            tris.append([v00, v01, v11])
            tris.append([v00, v11, v10])
    tris = np.array(tris, dtype=np.int64)
    # Drop triangles collapsed at the poles.
    p = verts[tris]
    area = np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    return verts, tris[area > 1e-14]
