"""Scenario files, the frame loop and the dataset writer.

A scenario is a YAML document validated strictly (unknown keys are errors).
Each frame runs the solver substeps, then the interaction phase, then
renders and persists the annotation stack. The manifest is written last
and atomically, so its presence certifies the files it lists.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .annotator import (
    CHANNELS, Camera, ToolActivity, ToolRenderMesh, albedo_table, build_scene, depth_preview, edge_map,
    flow_preview, label_triplet, normal_preview, optical_flow, project_tool_annotations, rasterize,
    rasterize_triangles,
)
from .instruments import (
    ACTIONS, KINDS, Instrument, Pose, ToolTimeline, generate_collision_constraints, instrument_from_dict,
    load_instrument_library, look_at, pose_at, quat_from_matrix,
)
from .interaction import (
    InteractionParams, SoftBody, bleed_update, clip, coagulate, cut, grasp, grasped_label, release,
    tear_update,
)
from .labels import LABELS, label_id
from .neohookean import MaterialParams
from .tetmesh import TetMesh, compute_rest_state, load_tet_mesh
from .xpbd_core import DEFAULT_ORDER, PhaseTimer, SolverConfig, SolverConfigError, flatten_batches, set_threads, substep

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "SURGSIM_OUTPUT_ROOT"
SIMF_MAGIC = b"SIMF"

Vec3 = tuple[float, float, float]


class ScenarioError(ValueError):
    """Invalid scenario (exit code 2)."""


class DatasetWriteError(OSError):
    pass


# ------------------------------------------------------------------ schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MaterialModel(_Strict):
    lame_lambda: float = Field(5.0e4, gt=0)
    lame_mu: float = Field(1.0e4, gt=0)
    density: float = Field(1000.0, gt=0)


class PinBox(_Strict):
    min: Vec3
    max: Vec3
    labels: Optional[list[str]] = None


class AnatomyModel(_Strict):
    mesh: str
    label: Optional[str] = None
    material: MaterialModel = MaterialModel()
    label_materials: dict[str, MaterialModel] = {}
    pins: list[PinBox] = []


class AxesModel(_Strict):
    x: Vec3
    z: Vec3


class KeyframeModel(_Strict):
    t: float
    translation: Vec3
    rotation: Optional[tuple[float, float, float, float]] = None
    axes: Optional[AxesModel] = None

    @model_validator(mode="after")
    def _one_rotation(self):
        if self.rotation is not None and self.axes is not None:
            raise ValueError("give either rotation or axes, not both")
        return self


class EventModel(_Strict):
    t: float
    action: Literal[ACTIONS]  # type: ignore[valid-type]


class InstrumentModel(_Strict):
    name: Optional[str] = None
    kind: Literal[KINDS]  # type: ignore[valid-type]
    library: Optional[str] = None
    collisions: bool = True
    keyframes: list[KeyframeModel] = Field(min_length=1)
    events: list[EventModel] = []


class CameraKeyframe(_Strict):
    t: float
    position: Vec3
    target: Vec3
    up: Vec3 = (0.0, 0.0, 1.0)


class CameraModel(_Strict):
    width: int = 512
    height: int = 512
    focal: float = 430.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    position: Vec3 = (0.0, -0.2, 0.2)
    target: Vec3 = (0.0, 0.0, 0.0)
    up: Vec3 = (0.0, 0.0, 1.0)
    keyframes: list[CameraKeyframe] = []


class SolverModel(_Strict):
    dt_substep: float = 1.0e-3
    substeps_per_frame: Optional[int] = None
    iterations_per_substep: int = 1
    gravity: Vec3 = (0.0, 0.0, -9.81)
    velocity_damping: float = 0.999
    order: list[str] = list(DEFAULT_ORDER)
    threads: int = 1


class InteractionModel(_Strict):
    collision_margin: float = 1.0e-3
    jaw_radius: float = 6.0e-3
    tear_threshold: float = 1.8
    bleed_decay: float = 0.97
    clip_radius: float = 5.0e-3
    coag_radius: float = 4.0e-3
    dwell_frames: int = 5
    coag_stiffening: float = 0.25
    retract_speed: float = 5.0e-3
    contact_radius: float = 5.0e-3


class OutputModel(_Strict):
    directory: str = "output"
    channels: dict[str, bool] = {}
    previews: bool = False

    @field_validator("channels")
    @classmethod
    def _known(cls, v):
        unknown = sorted(set(v) - set(CHANNELS))
        if unknown:
            raise ValueError(f"unknown channels {unknown}; known: {list(CHANNELS)}")
        return v


class ScenarioModel(_Strict):
    name: str = "scenario"
    seed: int = 0
    duration: float = Field(gt=0)
    frame_rate: float = Field(gt=0)
    anatomy: list[AnatomyModel] = Field(min_length=1)
    instruments: list[InstrumentModel] = []
    camera: CameraModel = CameraModel()
    solver: SolverModel = SolverModel()
    interaction: InteractionModel = InteractionModel()
    output: OutputModel = OutputModel()


# ------------------------------------------------------------------ resolved scenario


@dataclass
class ToolSpec:
    instrument: Instrument
    timeline: ToolTimeline
    collisions: bool = True


@dataclass
class Scenario:
    model: ScenarioModel
    base_dir: Path
    frame_count: int
    solver: SolverConfig
    interaction: InteractionParams
    tools: list[ToolSpec]
    camera_template: Camera
    camera_timeline: ToolTimeline | None  # camera-to-world poses
    channels: tuple[str, ...]

    @property
    def frame_period(self) -> float:
        return 1.0 / self.model.frame_rate

    def camera_at(self, t: float) -> Camera:
        c = self.camera_template
        if self.camera_timeline is None:
            return c
        return Camera(c.width, c.height, c.focal, c.cx, c.cy, pose_at(self.camera_timeline, t).inverse())

    def echo(self) -> dict:
        d = self.model.model_dump(mode="json")
        d["output"].pop("directory", None)
        d["frame_count"] = self.frame_count
        d["solver"]["substeps_per_frame"] = self.solver.substeps_per_frame
        return d


def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        if e["type"] == "extra_forbidden":
            parts.append(f"unknown key '{e['loc'][-1]}' at {loc}")
        else:
            parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def _keyframe_pose(k: KeyframeModel) -> Pose:
    if k.axes is not None:
        x = np.asarray(k.axes.x, float)
        z = np.asarray(k.axes.z, float)
        x = x / np.linalg.norm(x)
        z = z - (z @ x) * x
        z = z / np.linalg.norm(z)
        R = np.stack([x, np.cross(z, x), z], axis=1)
        return Pose(k.translation, quat_from_matrix(R))
    return Pose(k.translation, k.rotation if k.rotation is not None else (1.0, 0.0, 0.0, 0.0))


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    try:
        model = ScenarioModel.model_validate(raw)
    except ValidationError as e:
        raise ScenarioError(f"{path}: {_format_validation(e)}") from None
    return resolve_scenario(model, path.parent)


def resolve_scenario(model: ScenarioModel, base_dir: Path) -> Scenario:
    frames_f = model.duration * model.frame_rate
    frame_count = int(round(frames_f))
    if frame_count < 1 or abs(frames_f - frame_count) > 1e-9 * max(1.0, frames_f):
        raise ScenarioError(f"duration * frame_rate = {frames_f} is not an integer frame count")

    s = model.solver
    period = 1.0 / model.frame_rate
    implied = period / s.dt_substep
    substeps = s.substeps_per_frame if s.substeps_per_frame is not None else int(round(implied))
    if abs(substeps * s.dt_substep - period) > 1e-9 * period:
        raise ScenarioError(
            f"substeps_per_frame ({substeps}) * dt_substep ({s.dt_substep}) must equal 1/frame_rate ({period})"
        )
    try:
        solver = SolverConfig(s.dt_substep, substeps, s.iterations_per_substep, s.gravity, s.velocity_damping,
                              model.seed, tuple(s.order), s.threads)
    except SolverConfigError as e:
        raise ScenarioError(str(e)) from None

    for a in model.anatomy:
        p = base_dir / a.mesh
        if not p.is_file():
            raise ScenarioError(f"mesh file not found: {p}")
        for name in [a.label, *a.label_materials, *(l for pin in a.pins for l in (pin.labels or []))]:
            if name is not None and name not in LABELS and not name.lstrip("-").isdigit():
                raise ScenarioError(f"unknown label {name!r}")

    tools = []
    libraries: dict[str | None, dict] = {}
    names = set()
    for i, im in enumerate(model.instruments):
        lib_key = None if im.library is None else str(base_dir / im.library)
        if lib_key not in libraries:
            try:
                libraries[lib_key] = load_instrument_library(lib_key)
            except (OSError, ValueError) as e:
                raise ScenarioError(f"instrument library: {e}") from None
        lib = libraries[lib_key]
        if im.kind not in lib:
            raise ScenarioError(f"instrument kind {im.kind!r} missing from library")
        name = im.name or f"{im.kind}_{i}"
        if name in names:
            raise ScenarioError(f"duplicate instrument name {name!r}")
        names.add(name)
        inst = instrument_from_dict(im.kind, lib[im.kind], name)
        for ev in im.events:
            if not 0.0 <= ev.t <= model.duration:
                raise ScenarioError(f"{name}: event {ev.action} at t={ev.t} outside [0, {model.duration}]")
        try:
            tl = ToolTimeline([(k.t, _keyframe_pose(k)) for k in im.keyframes], [(e.t, e.action) for e in im.events])
        except ValueError as e:
            raise ScenarioError(f"{name}: {e}") from None
        tools.append(ToolSpec(inst, tl, im.collisions))

    c = model.camera
    try:
        if c.keyframes:
            cam_tl = ToolTimeline([(k.t, look_at(k.position, k.target, k.up).inverse()) for k in c.keyframes])
            first = cam_tl.keyframes[0][1].inverse()
        else:
            cam_tl = None
            first = look_at(c.position, c.target, c.up)
        camera = Camera(c.width, c.height, c.focal, c.cx, c.cy, first)
    except ValueError as e:
        raise ScenarioError(f"camera: {e}") from None

    ip = InteractionParams(**model.interaction.model_dump())
    channels = tuple(ch for ch in CHANNELS if model.output.channels.get(ch, True))
    return Scenario(model, base_dir, frame_count, solver, ip, tools, camera, cam_tl, channels)


# ------------------------------------------------------------------ scene construction


def build_body(scenario: Scenario) -> SoftBody:
    """Merge all anatomy meshes into one soft body with pins and materials."""
    verts, tets, labels, mats, pinned = [], [], [], {}, []
    offset = 0
    fallback = None
    for a in scenario.model.anatomy:
        mesh = load_tet_mesh(scenario.base_dir / a.mesh)
        lab = mesh.labels.copy()
        if a.label is not None:
            lab[:] = label_id(a.label)
        base = MaterialParams(**a.material.model_dump())
        fallback = fallback or base
        for l in np.unique(lab):
            mats.setdefault(int(l), base)
        for name, m in a.label_materials.items():
            mats[label_id(name)] = MaterialParams(**m.model_dump())
        pin = np.zeros(mesh.n_vertices, bool)
        for box in a.pins:
            inside = np.all((mesh.vertices_rest >= np.asarray(box.min) - 1e-12)
                            & (mesh.vertices_rest <= np.asarray(box.max) + 1e-12), axis=1)
            if box.labels:
                on = np.zeros(mesh.n_vertices, bool)
                on[mesh.tets[np.isin(lab, [label_id(n) for n in box.labels])].ravel()] = True
                inside &= on
            pin |= inside
        verts.append(mesh.vertices_rest)
        tets.append(mesh.tets + offset)
        labels.append(lab)
        pinned.append(pin)
        offset += mesh.n_vertices
    mats[None] = fallback
    mesh = TetMesh(np.concatenate(verts), np.concatenate(tets), np.concatenate(labels))
    compute_rest_state(mesh)
    return SoftBody(mesh, mats, np.concatenate(pinned))


# ------------------------------------------------------------------ writing


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise DatasetWriteError(f"failed to write {path}: {e}") from e


def encode_simf(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    return SIMF_MAGIC + struct.pack("<III", w, h, c) + np.ascontiguousarray(a).tobytes()


def read_simf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SIMF_MAGIC:
        raise ValueError(f"{path}: missing SIMF header")
    w, h, c = struct.unpack("<III", data[4:16])
    a = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return a[..., 0] if c == 1 else a


def encode_png(array) -> bytes:
    import io

    a = np.asarray(array)
    if a.dtype == np.uint16:
        img = Image.fromarray(a.astype("<u2")) if a.ndim == 2 else None
    else:
        img = Image.fromarray(a.astype(np.uint8))
    if img is None:
        raise ValueError("16-bit PNGs must be single channel")
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            return np.asarray(img, dtype=np.int64).astype(np.uint16)
        return np.asarray(img)


CHANNEL_FORMAT = {
    "rgb": ("png", "uint8", 3),
    "depth": ("simf", "float32", 1),
    "normal": ("simf", "float32", 3),
    "segmentation": ("png", "uint16", 1),
    "tool_mask": ("png", "uint8", 1),
    "flow": ("simf", "float32", 2),
    "blood": ("png", "uint8", 1),
    "damage": ("png", "uint8", 1),
    "coag": ("png", "uint8", 1),
    "edges": ("png", "uint8", 1),
}

CHANNEL_NOTES = {
    "rgb": "Lambertian shading, headlight at the camera, per-label albedo",
    "depth": "camera-space z in meters; +inf on background",
    "normal": "world-space unit normals; NaN on background",
    "segmentation": "label ids (see labels)",
    "tool_mask": "bit i set where instrument i is the visible surface",
    "flow": "backward flow current->previous in pixels (x right, y down); NaN where no correspondence",
    "blood": "round(255 * bleed intensity) of the visible tissue face",
    "damage": "255 on visible damaged tissue",
    "coag": "255 on visible coagulated tissue",
    "edges": "Sobel magnitude of Rec.601 luminance; 255/sqrt(2) for a full black/white step",
}


def frame_filename(index: int, channel: str, ext: str) -> str:
    return f"frame_{index:06d}_{channel}.{ext}"


def write_frame(ann, frame_index: int, out_dir, channels, previews: bool = False) -> dict:
    """Write the enabled channels; returns {channel: {file, bytes, sha256}}."""
    out_dir = Path(out_dir)
    files = {}
    written = []
    try:
        for ch in channels:
            fmt, _, _ = CHANNEL_FORMAT[ch]
            arr = getattr(ann, ch)
            data = encode_simf(arr) if fmt == "simf" else encode_png(arr)
            name = frame_filename(frame_index, ch, "bin" if fmt == "simf" else "png")
            _atomic_write(out_dir / name, data)
            written.append(out_dir / name)
            files[ch] = {"file": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
        if previews:
            prev = {"depth": depth_preview, "normal": normal_preview, "flow": flow_preview}
            for ch, fn in prev.items():
                if ch in channels:
                    data = encode_png(fn(getattr(ann, ch)))
                    name = frame_filename(frame_index, ch + "_preview", "png")
                    _atomic_write(out_dir / name, data)
                    written.append(out_dir / name)
                    files[ch + "_preview"] = {"file": name, "bytes": len(data),
                                              "sha256": hashlib.sha256(data).hexdigest()}
    except (OSError, ValueError):
        for p in written:
            try:
                p.unlink()
            except OSError:
                pass
        raise
    return files


# ------------------------------------------------------------------ frame loop


@dataclass
class RunResult:
    manifest: dict
    manifest_path: Path
    complete: bool
    failed_frame: int | None = None
    error: str | None = None
    timer: PhaseTimer = field(default_factory=PhaseTimer)
    alive_history: list = field(default_factory=list)
    body: SoftBody | None = None


def resolve_output_dir(directory: str | os.PathLike) -> Path:
    p = Path(directory)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def parse_frame_range(text: str | None, frame_count: int) -> tuple[int, int]:
    """``A..B`` (half-open) -> (A, B); None -> (0, frame_count)."""
    if text is None:
        return 0, frame_count
    try:
        a, b = text.split("..")
        a = int(a) if a else 0
        b = int(b) if b else frame_count
    except ValueError:
        raise ScenarioError(f"frame range must look like A..B, got {text!r}") from None
    if not 0 <= a < b <= frame_count:
        raise ScenarioError(f"frame range {a}..{b} outside 0..{frame_count}")
    return a, b


class _ToolState:
    def __init__(self, index: int, spec: ToolSpec):
        self.index = index
        self.spec = spec
        self.render = ToolRenderMesh(spec.instrument)
        self.cautery = False


def _process_events(body: SoftBody, tools, states, t0: float, t1: float, frame: int, last: bool, ip):
    """Run this frame's actuation events; returns per-tool activity records."""
    acts = []
    for st in states:
        inst = st.spec.instrument
        tl = st.spec.timeline
        pose0, pose1 = pose_at(tl, t0), pose_at(tl, t1)
        events = tl.events_in(t0, math.inf if last else t1)
        a = ToolActivity(inst.kind, st.index)
        a.speed = float(np.linalg.norm(inst.tip(pose1) - inst.tip(pose0))) / (t1 - t0)
        for ev in events:
            if ev == "jaw_close" and inst.kind == "grasper":
                got = grasp(body, st.index, inst, pose1, ip.jaw_radius, frame)
                if len(got):
                    a.grasped_label = body.majority_label(body.vertex_tets(got))
            elif ev in ("jaw_open", "release"):
                release(body, st.index)
            elif ev == "cautery_on":
                st.cautery = True
            elif ev == "cautery_off":
                st.cautery = False
            elif ev == "cut_stroke":
                b0, b1 = inst.blade_world(pose0), inst.blade_world(pose1)
                if b0 is None:
                    log.info("%s has no blade; cut_stroke ignored", inst.name)
                    continue
                killed = cut(body, (b0[0], b0[1], b1[0], b1[1]))
                lab = body.majority_label(killed) if len(killed) else None
                if inst.kind == "scissors":
                    a.cut_label = lab
                else:
                    a.dissect_label = lab
            elif ev == "clip_fire":
                tets = clip(body, inst, pose1, ip.clip_radius)
                if len(tets):
                    a.clip_label = body.majority_label(tets)
        if inst.kind == "grasper" and st.index in body.grips:
            a.attached_label = grasped_label(body, st.index)
        if inst.kind == "hook":
            a.cautery_on = st.cautery
            near = body.tets_near(inst.tip(pose1), ip.contact_radius)
            a.contact_label = body.majority_label(near)
            coagulate(body, st.index, inst.tip(pose1), st.cautery, ip.coag_radius, ip.dwell_frames,
                      ip.coag_stiffening)
        acts.append(a)
    return acts


def _near_box(inst: Instrument, pose: Pose, lo, hi) -> bool:
    seg, radii = inst.world_capsules(pose)
    r = radii[:, None]
    smin = np.minimum(seg[:, 0], seg[:, 1]) - r
    smax = np.maximum(seg[:, 0], seg[:, 1]) + r
    return bool(np.any(np.all((smax >= lo) & (smin <= hi), axis=1)))


def run_scenario(scenario: Scenario, seed: int | None = None, frame_range: tuple[int, int] | None = None,
                 threads: int = 1, out_dir=None, bench: bool = False) -> RunResult:
    seed = scenario.model.seed if seed is None else int(seed)
    n_frames = scenario.frame_count
    start, stop = frame_range or (0, n_frames)
    out = resolve_output_dir(out_dir if out_dir is not None else scenario.model.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    set_threads(threads)
    cfg = scenario.solver
    # threads > 1 selects the coloured parallel sweeps even if fewer workers are available.
    cfg = SolverConfig(cfg.dt_substep, cfg.substeps_per_frame, cfg.iterations_per_substep, cfg.gravity,
                       cfg.velocity_damping, seed, cfg.order, threads)
    ip = scenario.interaction
    timer = PhaseTimer()

    body = build_body(scenario)
    tet_albedo = albedo_table(body.mesh.n_tets, body.mesh.labels, seed)
    states = [_ToolState(i, spec) for i, spec in enumerate(scenario.tools)]
    tools = [s.spec.instrument for s in states]
    S = cfg.substeps_per_frame

    frames, triplets, pose_log = {}, [], {}
    failed, error = None, None
    prev_positions = body.particles.positions.copy()
    alive_history = []
    for f in range(stop):
        # Division (not f * period) keeps frame boundaries equal to the decimal times in scripts.
        fr = scenario.model.frame_rate
        t0, t1 = f / fr, (f + 1) / fr
        try:
            tick = time.perf_counter()
            # Broadphase box around the tissue, padded for motion within the frame.
            lo = body.particles.positions.min(axis=0) - 0.02
            hi = body.particles.positions.max(axis=0) + 0.02
            for s in range(S):
                ts = t0 + (s + 1) * (t1 - t0) / S
                poses = {st.index: pose_at(st.spec.timeline, ts) for st in states}
                body.update_attachment_targets(poses)
                colls = []
                for st in states:
                    if st.spec.collisions and _near_box(st.spec.instrument, poses[st.index], lo, hi):
                        b = generate_collision_constraints(st.spec.instrument, poses[st.index],
                                                           body.particles.positions, ip.collision_margin,
                                                           ip.collision_margin + 2e-3)
                        if len(b):
                            colls.append(b)
                batches = flatten_batches(body.constraint_batches(colls), cfg.order)
                timer.add("setup", time.perf_counter() - tick)
                substep(body.particles, batches, cfg, timer, f * S + s, presorted=True)
                tick = time.perf_counter()
        except FloatingPointError as e:
            failed, error = f, str(e)
            log.error("frame %d aborted: %s", f, e)
            break

        tick = time.perf_counter()
        bleed_update(body.tissue, ip.bleed_decay)
        n_before = body.mesh.n_vertices
        acts = _process_events(body, tools, states, t0, t1, f, f == n_frames - 1, ip)
        tear_update(body, ip.tear_threshold)
        if body.mesh.n_vertices > n_before or len(prev_positions) < body.mesh.n_vertices:
            prev_positions = np.concatenate([prev_positions, prev_positions[body.origin[len(prev_positions):]]])
        triplet = label_triplet(acts, ip.retract_speed)
        alive_history.append(int(body.mesh.alive.sum()))
        timer.add("interaction", time.perf_counter() - tick)

        if triplet is not None:
            triplets.append({"frame": f, "time": round(t1, 9), "triplet": list(triplet)})

        if f >= start:
            tick = time.perf_counter()
            cam, prev_cam = scenario.camera_at(t1), scenario.camera_at(t0)
            poses1 = [pose_at(st.spec.timeline, t1) for st in states]
            poses0 = [pose_at(st.spec.timeline, t0) for st in states]
            scene = build_scene(body.surface(), body.particles.positions, prev_positions,
                                [(st.index, st.render, poses1[i], poses0[i]) for i, st in enumerate(states)])
            frag = rasterize_triangles(scene, cam)
            ann = rasterize(scene, cam, body.tissue, tet_albedo, frag)
            if "flow" in scenario.channels:
                ann.flow = optical_flow(scene, cam, prev_cam, frag)
            if "edges" in scenario.channels:
                ann.edges = edge_map(ann.rgb)
            poses3d, tips = project_tool_annotations(tools, poses1, cam)
            ann.triplet = triplet
            timer.add("render", time.perf_counter() - tick)
            tick = time.perf_counter()
            files = write_frame(ann, f, out, scenario.channels, scenario.model.output.previews)
            timer.add("write", time.perf_counter() - tick)
            frames[f] = {"index": f, "time": round(t1, 9), "files": files}
            pose_log[f] = {
                "frame": f,
                "time": round(t1, 9),
                "camera": cam.pose.as_dict(),
                "tools": {
                    inst.name: {"world": poses1[i].as_dict(), "camera": poses3d[inst.name].as_dict(),
                                "tip_2d": tips[inst.name]}
                    for i, inst in enumerate(tools)
                },
            }
        prev_positions = body.particles.positions.copy()

    manifest_path = out / "manifest.json"
    manifest = _merge_manifest(manifest_path, scenario, seed, threads, frames, pose_log, triplets, failed, error)
    _atomic_write(manifest_path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return RunResult(manifest, manifest_path, manifest["complete"], failed, error, timer, alive_history, body)


def _merge_manifest(path: Path, scenario: Scenario, seed, threads, frames, pose_log, triplets, failed, error):
    old_frames, old_poses = {}, {}
    if path.exists() and failed is None:
        try:
            old = json.loads(path.read_text())
            same = old.get("config") == scenario.echo() and old.get("random_seed") == seed
        except (OSError, ValueError):
            same = False
        if same:
            old_frames = {int(e["index"]): e for e in old.get("frames", [])}
            old_poses = {int(e["frame"]): e for e in old.get("tool_poses", [])}
    old_frames.update(frames)
    old_poses.update(pose_log)
    present = sorted(old_frames)
    complete = failed is None and present == list(range(scenario.frame_count))
    channels = {}
    for ch in scenario.channels:
        fmt, dtype, c = CHANNEL_FORMAT[ch]
        channels[ch] = {"format": fmt, "dtype": dtype, "channels": c, "convention": CHANNEL_NOTES[ch]}
    return {
        "schema_version": SCHEMA_VERSION,
        "generator": f"surgsim {__version__}",
        "scenario": scenario.model.name,
        "frame_count": scenario.frame_count,
        "frames_present": len(present),
        "complete": complete,
        "failed_frame": failed,
        "error": error,
        "channels": channels,
        "raw_format": "SIMF: b'SIMF' + width + height + channels (uint32 LE), then float32 LE row-major",
        "conventions": {
            "depth_units": "meters (camera-space z)",
            "flow_direction": "backward (current -> previous), pixels",
            "normal_space": "world",
            "normal_preview": "floor(127.5 * n + 128)",
            "camera": "pinhole; +x right, +y down, +z forward; pixel centres at integer coordinates",
        },
        "labels": dict(sorted(LABELS.items(), key=lambda kv: kv[1])),
        "frames": [old_frames[i] for i in present],
        "triplets": triplets,
        "tool_poses": [old_poses[i] for i in sorted(old_poses)],
        "config": scenario.echo(),
        "random_seed": seed,
        "threads": threads,
    }
