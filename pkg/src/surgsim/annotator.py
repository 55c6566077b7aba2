"""Software rasterizer for the per-frame annotation stack.

Conventions: pinhole camera, camera +z forward, +x right, +y down; pixel
(col, row) has its centre at integer coordinates (u = col, v = row);
``Camera.pose`` maps world to camera coordinates. Flow is backward
(current -> previous) in pixels. Depth is camera-space z in meters with
+inf on the background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from PIL import Image
from scipy import ndimage

from .instruments import TRIPLET_NAMES, Capsule, Instrument, Pose, capsule_mesh
from .labels import LABELS, label_name

NEAR = 1e-3
BAND_ROWS = 16

# Linear RGB albedo per label in [0, 1].
ALBEDO = {
    LABELS["liver"]: (0.55, 0.16, 0.12),
    LABELS["gallbladder"]: (0.35, 0.55, 0.30),
    LABELS["cystic_duct"]: (0.85, 0.78, 0.55),
    LABELS["cystic_artery"]: (0.75, 0.20, 0.22),
    LABELS["fat"]: (0.92, 0.82, 0.45),
    LABELS["grasper"]: (0.60, 0.62, 0.66),
    LABELS["hook"]: (0.55, 0.57, 0.60),
    LABELS["scissors"]: (0.65, 0.66, 0.70),
    LABELS["clip_applier"]: (0.50, 0.52, 0.56),
}
DEFAULT_ALBEDO = (0.7, 0.7, 0.7)
BLOOD_RGB = np.array([0.45, 0.02, 0.03])
COAG_RGB = np.array([0.35, 0.27, 0.20])
AMBIENT = 0.15
ALBEDO_JITTER = 0.06

CHANNELS = ("rgb", "depth", "normal", "segmentation", "tool_mask", "flow", "blood", "damage", "coag", "edges")


@dataclass
class Camera:
    width: int = 512
    height: int = 512
    focal: float = 430.0
    cx: float | None = None
    cy: float | None = None
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("camera focal length must be positive")
        if self.width < 64 or self.height < 64:
            raise ValueError("camera resolution must be at least 64x64")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    def to_camera(self, points) -> np.ndarray:
        return self.pose.apply(points)

    def project_camera(self, pc) -> tuple[np.ndarray, np.ndarray]:
        """Camera-space points -> (uv pixels, valid) with valid meaning z > 0."""
        pc = np.asarray(pc, float)
        z = pc[..., 2]
        valid = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.focal * pc[..., 0] / z
            v = self.cy + self.focal * pc[..., 1] / z
        return np.stack([u, v], axis=-1), valid

    def project(self, points_world) -> tuple[np.ndarray, np.ndarray]:
        return self.project_camera(self.to_camera(points_world))


# ------------------------------------------------------------------ scene assembly


@dataclass
class RenderScene:
    """Flat triangle soup with per-triangle attributes."""

    vertices: np.ndarray  # (n, 3) world
    prev_vertices: np.ndarray  # (n, 3) world positions one frame earlier; NaN = no correspondence
    triangles: np.ndarray  # (t, 3)
    labels: np.ndarray  # (t,) uint16
    normals: np.ndarray  # (n, 3) per-vertex world normals (tissue vertices are per-face copies)
    tool_index: np.ndarray  # (t,) -1 for tissue
    owner_tet: np.ndarray  # (t,) -1 for tools
    owner_face: np.ndarray  # (t,)


class ToolRenderMesh:
    """Render mesh for one instrument in its own frame."""

    def __init__(self, instrument: Instrument, segments: int = 12, rings: int = 3):
        verts, tris, norms = [], [], []
        base = 0
        for cap in instrument.visual:
            v, t = capsule_mesh(cap, segments, rings)
            verts.append(v)
            tris.append(t + base)
            norms.append(_capsule_normals(cap, v))
            base += len(v)
        self.vertices = np.concatenate(verts)
        self.triangles = np.concatenate(tris)
        self.normals = np.concatenate(norms)
        self.label = instrument.label


def _capsule_normals(cap: Capsule, v: np.ndarray) -> np.ndarray:
    ab = cap.b - cap.a
    denom = float(ab @ ab)
    s = np.zeros(len(v)) if denom == 0 else np.clip((v - cap.a) @ ab / denom, 0.0, 1.0)
    n = v - (cap.a + s[:, None] * ab)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def tissue_triangles(surface, positions, prev_positions=None):
    """Per-face vertex copies so flat normals survive interpolation."""
    tri = surface.triangles
    k = len(tri)
    verts = positions[tri].reshape(-1, 3)
    if prev_positions is None:
        prev = verts.copy()
    else:
        prev = np.full((k * 3, 3), np.nan)
        idx = tri.reshape(-1)
        ok = idx < len(prev_positions)
        prev[ok] = prev_positions[idx[ok]]
    p = positions[tri]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    return verts, prev, np.arange(k * 3).reshape(k, 3), np.repeat(n, 3, axis=0)


def build_scene(surface, positions, prev_positions, tools=()) -> RenderScene:
    """Assemble tissue + instruments.

    ``tools`` is a sequence of (tool_index, ToolRenderMesh, pose, prev_pose).
    """
    v, pv, t, n = tissue_triangles(surface, positions, prev_positions)
    verts, prevs, tris, norms = [v], [pv], [t], [n]
    labels = [surface.labels.astype(np.uint16)]
    tool_idx = [np.full(len(t), -1, np.int64)]
    otet = [surface.owner_tet.astype(np.int64)]
    oface = [surface.owner_face.astype(np.int64)]
    base = len(v)
    for index, mesh, pose, prev_pose in tools:
        verts.append(pose.apply(mesh.vertices))
        prevs.append((prev_pose if prev_pose is not None else pose).apply(mesh.vertices))
        norms.append(mesh.normals @ pose.matrix[:3, :3].T)
        tris.append(mesh.triangles + base)
        nt = len(mesh.triangles)
        labels.append(np.full(nt, mesh.label, np.uint16))
        tool_idx.append(np.full(nt, index, np.int64))
        otet.append(np.full(nt, -1, np.int64))
        oface.append(np.full(nt, -1, np.int64))
        base += len(mesh.vertices)
    return RenderScene(
        np.concatenate(verts), np.concatenate(prevs), np.concatenate(tris), np.concatenate(labels),
        np.concatenate(norms), np.concatenate(tool_idx), np.concatenate(otet), np.concatenate(oface),
    )


# ------------------------------------------------------------------ rasterizer


@numba.njit(cache=True)
def _screen_setup(pc, tris, focal, cx, cy, width, height):
    t = len(tris)
    sx = np.empty((t, 3))
    sy = np.empty((t, 3))
    iz = np.empty((t, 3))
    box = np.full((t, 4), -1, np.int64)  # col0, col1, row0, row1 inclusive; -1 = culled
    for k in range(t):
        ok = True
        for j in range(3):
            z = pc[tris[k, j], 2]
            if not (z > NEAR):
                ok = False
                break
            sx[k, j] = cx + focal * pc[tris[k, j], 0] / z
            sy[k, j] = cy + focal * pc[tris[k, j], 1] / z
            iz[k, j] = 1.0 / z
        if not ok:
            continue
        c0 = max(0, int(math.ceil(min(sx[k, 0], min(sx[k, 1], sx[k, 2])))))
        c1 = min(width - 1, int(math.floor(max(sx[k, 0], max(sx[k, 1], sx[k, 2])))))
        r0 = max(0, int(math.ceil(min(sy[k, 0], min(sy[k, 1], sy[k, 2])))))
        r1 = min(height - 1, int(math.floor(max(sy[k, 0], max(sy[k, 1], sy[k, 2])))))
        if c0 > c1 or r0 > r1:
            continue
        area = (sx[k, 1] - sx[k, 0]) * (sy[k, 2] - sy[k, 0]) - (sx[k, 2] - sx[k, 0]) * (sy[k, 1] - sy[k, 0])
        if area == 0.0:
            continue
        box[k, 0] = c0
        box[k, 1] = c1
        box[k, 2] = r0
        box[k, 3] = r1
    return sx, sy, iz, box


@numba.njit(cache=True)
def _raster_band(r0, r1, sx, sy, iz, box, width, depth, prim, bary):
    for k in range(len(box)):
        if box[k, 0] < 0 or box[k, 3] < r0 or box[k, 2] > r1:
            continue
        x0, x1, x2 = sx[k, 0], sx[k, 1], sx[k, 2]
        y0, y1, y2 = sy[k, 0], sy[k, 1], sy[k, 2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        inv_area = 1.0 / area
        for r in range(max(r0, box[k, 2]), min(r1, box[k, 3]) + 1):
            py = float(r)
            for c in range(box[k, 0], box[k, 1] + 1):
                px = float(c)
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
                w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) * inv_area
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                q0 = w0 * iz[k, 0]
                q1 = w1 * iz[k, 1]
                q2 = w2 * iz[k, 2]
                s = q0 + q1 + q2
                z = 1.0 / s
                # Strict test: on equal depth the earlier (lower-index) primitive stays.
                if z < depth[r, c]:
                    depth[r, c] = z
                    prim[r, c] = k
                    bary[r, c, 0] = q0 / s
                    bary[r, c, 1] = q1 / s
                    bary[r, c, 2] = q2 / s


@numba.njit(cache=True, parallel=True)
def _raster(sx, sy, iz, box, width, height, band):
    depth = np.full((height, width), np.inf)
    prim = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    n_bands = (height + band - 1) // band
    for b in numba.prange(n_bands):
        r0 = b * band
        r1 = min(height - 1, r0 + band - 1)
        _raster_band(r0, r1, sx, sy, iz, box, width, depth, prim, bary)
    return depth, prim, bary


@dataclass
class Fragments:
    depth: np.ndarray  # (h, w) float64 camera z, inf on background
    prim: np.ndarray  # (h, w) winning triangle index, -1 on background
    bary: np.ndarray  # (h, w, 3) perspective-correct barycentrics


def rasterize_triangles(scene: RenderScene, camera: Camera) -> Fragments:
    pc = camera.to_camera(scene.vertices) if len(scene.vertices) else np.zeros((0, 3))
    tris = np.ascontiguousarray(scene.triangles, np.int64).reshape(-1, 3)
    sx, sy, iz, box = _screen_setup(np.ascontiguousarray(pc), tris, float(camera.focal), float(camera.cx),
                                    float(camera.cy), camera.width, camera.height)
    depth, prim, bary = _raster(sx, sy, iz, box, camera.width, camera.height, BAND_ROWS)
    return Fragments(depth, prim, bary)


def _interpolate(fr: Fragments, scene: RenderScene, attr: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of a per-vertex attribute at every foreground pixel."""
    fg = fr.prim >= 0
    out = np.zeros(fr.prim.shape + attr.shape[1:])
    tri = scene.triangles[fr.prim[fg]]
    b = fr.bary[fg]
    out[fg] = np.einsum("pk,pk...->p...", b, attr[tri])
    return out


# ------------------------------------------------------------------ channels


@dataclass
class FrameAnnotations:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    segmentation: np.ndarray
    tool_mask: np.ndarray
    blood: np.ndarray
    damage: np.ndarray
    coag: np.ndarray
    flow: np.ndarray | None = None
    edges: np.ndarray | None = None
    tool_poses_3d: dict = field(default_factory=dict)
    tool_tips_2d: dict = field(default_factory=dict)
    triplet: tuple | None = None


def albedo_table(n_tets: int, tet_labels, seed: int) -> np.ndarray:
    """Per-tet albedo with a small seeded brightness jitter."""
    rng = np.random.default_rng(seed)
    jitter = 1.0 + ALBEDO_JITTER * (2.0 * rng.random(n_tets) - 1.0)
    base = np.array([ALBEDO.get(int(l), DEFAULT_ALBEDO) for l in tet_labels]).reshape(-1, 3)
    return np.clip(base * jitter[:, None], 0.0, 1.0)


def rasterize(scene: RenderScene, camera: Camera, tissue_state=None, tet_albedo=None,
              fragments: Fragments | None = None) -> FrameAnnotations:
    """All image channels except flow and edges."""
    fr = fragments if fragments is not None else rasterize_triangles(scene, camera)
    h, w = fr.prim.shape
    fg = fr.prim >= 0
    p = fr.prim[fg]

    seg = np.zeros((h, w), np.uint16)
    seg[fg] = scene.labels[p]

    tool_mask = np.zeros((h, w), np.uint8)
    ti = scene.tool_index[p]
    is_tool = ti >= 0
    bits = np.zeros(len(p), np.uint8)
    bits[is_tool] = (1 << np.minimum(ti[is_tool], 7)).astype(np.uint8)
    tool_mask[fg] = bits

    normal = np.full((h, w, 3), np.nan, np.float32)
    n = _interpolate(fr, scene, scene.normals)[fg]
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    normal[fg] = n

    depth = fr.depth.astype(np.float32)

    blood = np.zeros((h, w), np.uint8)
    damage = np.zeros((h, w), np.uint8)
    coag = np.zeros((h, w), np.uint8)
    tet = scene.owner_tet[p]
    tissue = tet >= 0
    bleed_px = np.zeros(len(p))
    coag_px = np.zeros(len(p), bool)
    if tissue_state is not None and tissue.any():
        bleed_px[tissue] = tissue_state.bleed[tet[tissue], scene.owner_face[p][tissue]]
        blood[fg] = np.round(bleed_px * 255.0).astype(np.uint8)
        dmg = np.zeros(len(p), bool)
        dmg[tissue] = tissue_state.damaged[tet[tissue]]
        damage[fg] = np.where(dmg, 255, 0).astype(np.uint8)
        coag_px[tissue] = tissue_state.coagulated[tet[tissue]]
        coag[fg] = np.where(coag_px, 255, 0).astype(np.uint8)

    # Lambertian shading with a headlight at the camera centre.
    albedo = np.array([ALBEDO.get(int(l), DEFAULT_ALBEDO) for l in scene.labels[p]]).reshape(-1, 3)
    if tet_albedo is not None and tissue.any():
        albedo[tissue] = tet_albedo[tet[tissue]]
    albedo = albedo * (1.0 - 0.5 * coag_px[:, None]) + COAG_RGB * 0.5 * coag_px[:, None]
    albedo = albedo * (1.0 - bleed_px[:, None]) + BLOOD_RGB * bleed_px[:, None]
    world = _interpolate(fr, scene, scene.vertices)[fg]
    eye = camera.pose.inverse().translation
    view = eye - world
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    lam = np.abs(np.einsum("ij,ij->i", n, view))
    shade = AMBIENT + (1.0 - AMBIENT) * lam
    rgb = np.zeros((h, w, 3), np.uint8)
    rgb[fg] = np.clip(np.round(albedo * shade[:, None] * 255.0), 0, 255).astype(np.uint8)

    return FrameAnnotations(rgb, depth, normal, seg, tool_mask, blood, damage, coag)


def optical_flow(scene: RenderScene, camera: Camera, prev_camera: Camera, fragments: Fragments) -> np.ndarray:
    """Backward flow: where each pixel's surface point was in the previous image."""
    h, w = fragments.prim.shape
    flow = np.zeros((h, w, 2), np.float32)
    fg = fragments.prim >= 0
    prev = _interpolate(fragments, scene, scene.prev_vertices)[fg]
    uv, valid = prev_camera.project(prev)
    # Reproject the current point rather than using the pixel index so that a
    # static scene cancels exactly instead of leaving roundoff.
    here, _ = camera.project(_interpolate(fragments, scene, scene.vertices)[fg])
    f = uv - here
    f[~valid | ~np.isfinite(f).all(axis=1)] = np.nan
    flow[fg] = f
    return flow


def project_tool_annotations(instruments, poses, camera: Camera):
    """Camera-frame tool poses and 2D tip pixels ({'uv': [u, v], 'valid': bool})."""
    poses_3d, tips = {}, {}
    for i, (inst, pose) in enumerate(zip(instruments, poses)):
        cam_pose = camera.pose.compose(pose)
        poses_3d[inst.name] = cam_pose
        tip_c = cam_pose.apply(inst.tip_offset)
        uv, valid = camera.project_camera(tip_c)
        valid = bool(valid) and bool(np.isfinite(uv).all())
        tips[inst.name] = {"uv": [float(uv[0]), float(uv[1])] if valid else None, "valid": valid}
    return poses_3d, tips


SOBEL_MAX = 4.0 * math.sqrt(2.0)


def edge_magnitude(rgb) -> np.ndarray:
    """Sobel gradient magnitude of Rec.601 luminance in [0, 1] units."""
    img = np.asarray(rgb, float)
    lum = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]) / 255.0
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def edge_map(rgb) -> np.ndarray:
    """8-bit edges; a full black/white step scores 255/sqrt(2), scaling linearly with contrast."""
    return np.clip(np.round(edge_magnitude(rgb) / SOBEL_MAX * 255.0), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------ triplets

VERB_PRIORITY = ("cut", "clip", "coagulate", "grasp", "retract", "dissect")


@dataclass
class ToolActivity:
    """What one instrument did this frame, as seen by the triplet rules."""

    kind: str
    index: int = 0
    speed: float = 0.0
    attached_label: int | None = None
    grasped_label: int | None = None
    cautery_on: bool = False
    contact_label: int | None = None
    cut_label: int | None = None
    clip_label: int | None = None
    dissect_label: int | None = None


def label_triplet(activities, retract_speed: float) -> tuple[str, str, str] | None:
    best = None
    for a in activities:
        cands = []
        if a.kind == "scissors" and a.cut_label is not None:
            cands.append(("cut", a.cut_label))
        if a.kind == "clip_applier" and a.clip_label is not None:
            cands.append(("clip", a.clip_label))
        if a.kind == "hook" and a.cautery_on and a.contact_label is not None:
            cands.append(("coagulate", a.contact_label))
        if a.kind == "grasper" and a.grasped_label is not None:
            cands.append(("grasp", a.grasped_label))
        if a.kind == "grasper" and a.attached_label is not None and a.speed > retract_speed:
            cands.append(("retract", a.attached_label))
        if a.kind == "hook" and not a.cautery_on:
            target = a.dissect_label
            if target is None and a.speed > retract_speed:
                target = a.contact_label
            if target is not None:
                cands.append(("dissect", target))
        for verb, lab in cands:
            key = (VERB_PRIORITY.index(verb), a.index)
            if best is None or key < best[0]:
                best = (key, (TRIPLET_NAMES[a.kind], verb, label_name(lab)))
    return None if best is None else best[1]


# ------------------------------------------------------------------ previews


def normal_preview(normal) -> np.ndarray:
    n = np.nan_to_num(np.asarray(normal, float), nan=0.0)
    out = np.floor(n * 127.5 + 127.5 + 0.5)
    out[~np.isfinite(np.asarray(normal, float)).all(axis=-1)] = 0
    return np.clip(out, 0, 255).astype(np.uint8)


def depth_preview(depth) -> np.ndarray:
    d = np.asarray(depth, float)
    fin = np.isfinite(d)
    out = np.zeros(d.shape, np.uint8)
    if fin.any():
        lo, hi = d[fin].min(), d[fin].max()
        span = hi - lo if hi > lo else 1.0
        out[fin] = np.round(255.0 - 254.0 * (d[fin] - lo) / span).astype(np.uint8)
    return out


def flow_preview(flow, max_magnitude: float | None = None) -> np.ndarray:
    """HSV wheel: hue = direction, value = magnitude; invalid pixels black."""
    f = np.asarray(flow, float)
    ok = np.isfinite(f).all(axis=-1)
    fx = np.where(ok, f[..., 0], 0.0)
    fy = np.where(ok, f[..., 1], 0.0)
    mag = np.hypot(fx, fy)
    m = max_magnitude or (mag.max() if mag.max() > 0 else 1.0)
    hsv = np.zeros(f.shape[:-1] + (3,), np.uint8)
    hsv[..., 0] = np.round((np.arctan2(fy, fx) / (2 * np.pi)) % 1.0 * 255.0).astype(np.uint8)
    hsv[..., 1] = 255
    hsv[..., 2] = np.round(np.clip(mag / m, 0.0, 1.0) * 255.0).astype(np.uint8)
    hsv[~ok] = 0
    return np.asarray(Image.fromarray(hsv, "HSV").convert("RGB"))


def island_count(segmentation, labels) -> int:
    """Connected 4-neighbour pixel islands whose label is in ``labels``."""
    mask = np.isin(segmentation, list(labels))
    _, n = ndimage.label(mask)
    return int(n)
