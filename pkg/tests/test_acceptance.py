"""Acceptance criteria. Each test records one verdict line, printed at the end of the run."""
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import ACCEPTANCE_LINES, MINIMAL
from oracles import (
    components_union_find, density_coverage_brute, directory_digest, flow_warp_agreement, knn_radius_brute, miou_brute,
)
from surgsim.genmetrics import density_coverage, fid, knn_radii, miou
from surgsim.labels import INSTRUMENT_LABELS, LABELS, TISSUE_LABELS
from surgsim.neohookean import MaterialParams, build_constraints, lumped_masses, validate_gradients
from surgsim.scenario_runner import parse_scenario, read_png, read_simf, run_scenario
from surgsim.tetmesh import box_mesh, compute_rest_state, signed_volumes, total_volume
from surgsim.xpbd_core import AttachmentBatch, ParticleSystem, SolverConfig, constraint_forces, substep


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def cube(n=5, size=0.05):
    return compute_rest_state(box_mesh((n, n, n), (size, size, size)))


# ------------------------------------------------------------------ 1


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    r = validate_gradients(samples=1000, seed=0)
    wall = time.perf_counter() - t0
    ok = r.samples == 1000 and r.max_rel_error < 1e-5 and wall < 10.0
    record(1, ok, f"1000 samples, max rel error {r.max_rel_error:.2e} (< 1e-5), {wall:.2f} s (< 10 s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_c2_volume_conservation():
    t0 = time.perf_counter()
    mesh = cube()
    v_rest = total_volume(mesh, mesh.vertices_rest)
    lam = 2.0 / (1e-8 * mesh.rest_volume.min())
    nh = build_constraints(mesh, MaterialParams(lame_lambda=lam, lame_mu=1e4))
    w = 1.0 / lumped_masses(mesh, MaterialParams())
    z = mesh.vertices_rest[:, 2]
    bottom, top = np.flatnonzero(z == 0.0), np.flatnonzero(np.isclose(z, 0.05))
    targets = mesh.vertices_rest.copy()
    targets[top, 2] *= 0.8
    ids = np.concatenate([bottom, top])
    att = AttachmentBatch(ids, targets[ids], 0.0)
    p = ParticleSystem.at_rest(mesh.vertices_rest, w)
    cfg = SolverConfig(dt_substep=1e-3, gravity=(0, 0, 0))
    for _ in range(2000):
        substep(p, [nh, att], cfg)
    wall = time.perf_counter() - t0
    err = abs(total_volume(mesh, p.positions) / v_rest - 1.0)
    alpha = float(nh.hydrostatic.alpha.max())
    compressed = np.allclose(p.positions[top, 2], 0.04, atol=1e-9)
    ok = alpha <= 1e-8 and compressed and err < 0.02 and wall < 60.0
    record(2, ok, f"{mesh.n_tets} tets, max compliance {alpha:.1e}, volume error {100 * err:.3f}% (< 2%), "
                  f"{wall:.1f} s (< 60 s)")
    assert ok


# ------------------------------------------------------------------ 3


def test_c3_inversion_recovery():
    mesh = cube()
    nh = build_constraints(mesh, MaterialParams())
    w = 1.0 / lumped_masses(mesh, MaterialParams())
    x = mesh.vertices_rest.copy()
    t = int(np.argmin(np.linalg.norm(x[mesh.tets].mean(axis=1) - 0.025, axis=1)))
    a, b, c, d = mesh.tets[t]
    n = np.cross(x[c] - x[b], x[d] - x[b])
    n /= np.linalg.norm(n)
    x[a] -= 2 * np.dot(x[a] - x[b], n) * n
    inverted = signed_volumes(x, mesh.tets)[t] < 0
    p = ParticleSystem.at_rest(x, w)
    cfg = SolverConfig(dt_substep=1e-3, gravity=(0, 0, 0))
    recovered_at = None
    for i in range(500):
        substep(p, [nh], cfg)
        if recovered_at is None and signed_volumes(p.positions, mesh.tets).min() > 0:
            recovered_at = i + 1
    final = signed_volumes(p.positions, mesh.tets).min()
    ok = inverted and recovered_at is not None and final > 0
    record(3, ok, f"interior tet {t} inverted, all volumes positive after {recovered_at} substeps (<= 500)")
    assert ok


# ------------------------------------------------------------------ 4


def fall():
    p = ParticleSystem.at_rest([[0.0, 0.0, 0.0]], [1.0])
    cfg = SolverConfig(dt_substep=0.01, gravity=(0, 0, -10.0), velocity_damping=1.0)
    for _ in range(10):
        substep(p, [], cfg)
    return p.positions.copy()


def test_c4_free_fall():
    a, b = fall(), fall()
    # Symplectic Euler gives g dt^2 (1 + 2 + ... + 10) = 0.055.
    drop = float(-a[0, 2])
    ok = abs(drop - 0.055) < 1e-15 and a.tobytes() == b.tobytes() and not a[0, :2].any()
    record(4, ok, f"displacement {drop!r} m (0.055 within 1e-15), bit-identical across runs")
    assert ok


# ------------------------------------------------------------------ 5


def test_c5_haptic_force():
    p = ParticleSystem.at_rest([[0.0, 0.0, 0.0]], [1.0])
    att = AttachmentBatch([0], [[0.0, 0.0, 0.0]], 0.0)
    cfg = SolverConfig(dt_substep=1e-3, gravity=(0, 0, -10.0))
    for _ in range(100):
        substep(p, [att], cfg)
    (_, f), = constraint_forces([att], p.positions, cfg.dt_substep)["attachment"]
    mag = float(np.linalg.norm(f))
    ok = abs(mag - 10.0) <= 0.5 and f[0, 2] > 0
    record(5, ok, f"recovered force {mag:.6f} N vs 10 N (within 5%)")
    assert ok


# ------------------------------------------------------------------ 6


def cam_tuple(entry, template):
    q = entry["camera"]["rotation"]  # (w, x, y, z)
    r = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    return r, np.array(entry["camera"]["translation"]), template.focal, template.cx, template.cy


def test_c6_annotation_consistency(demo_run, rigid_run):
    sc, res, out = demo_run
    tool_labels = [t.instrument.label for t in sc.tools]
    problems, blood_pixels = [], 0
    for entry in res.manifest["frames"]:
        files = entry["files"]
        seg = read_png(out / files["segmentation"]["file"])
        mask = read_png(out / files["tool_mask"]["file"])
        depth = read_simf(out / files["depth"]["file"])
        normal = read_simf(out / files["normal"]["file"])
        blood = read_png(out / files["blood"]["file"])
        i = entry["index"]
        if not np.isin(seg[mask != 0], list(INSTRUMENT_LABELS)).all():
            problems.append(f"frame {i}: tool_mask outside instrument pixels")
        for bit, lab in enumerate(tool_labels):
            if (seg[(mask >> bit) & 1 == 1] != lab).any():
                problems.append(f"frame {i}: tool bit {bit} not on label {lab}")
        if not np.array_equal(np.isfinite(depth), seg != 0):
            problems.append(f"frame {i}: depth finiteness differs from foreground")
        fg = seg != 0
        length = np.linalg.norm(normal[fg], axis=-1)
        if length.size and np.abs(length - 1).max() > 1e-4:
            problems.append(f"frame {i}: normal length off by {np.abs(length - 1).max():.1e}")
        if not np.isnan(normal[~fg]).all():
            problems.append(f"frame {i}: background normals not NaN")
        blood_pixels += int((blood != 0).sum())
        if not np.isin(seg[blood != 0], list(TISSUE_LABELS)).all():
            problems.append(f"frame {i}: blood outside tissue")
    instrument_pixels = sum(int((read_png(out / e["files"]["tool_mask"]["file"]) != 0).sum())
                            for e in res.manifest["frames"])

    rsc, rres, rout = rigid_run
    poses = {e["frame"]: e for e in rres.manifest["tool_poses"]}
    worst, checked = 1.0, 0
    for entry in rres.manifest["frames"][1:]:
        i = entry["index"]
        prev = rres.manifest["frames"][i - 1]["files"]
        cur = entry["files"]
        frac, n = flow_warp_agreement(
            read_png(rout / prev["segmentation"]["file"]), read_png(rout / cur["segmentation"]["file"]),
            read_simf(rout / cur["flow"]["file"]), read_simf(rout / cur["depth"]["file"]),
            read_simf(rout / prev["depth"]["file"]),
            cam_tuple(poses[i], rsc.camera_template), cam_tuple(poses[i - 1], rsc.camera_template),
        )
        assert n > 1000
        worst, checked = min(worst, frac), checked + n
    if worst < 0.99:
        problems.append(f"flow-warp agreement {100 * worst:.2f}% < 99%")
    ok = not problems and instrument_pixels > 0
    record(6, ok, f"{len(res.manifest['frames'])} demo frames consistent ({instrument_pixels} tool pixels, "
                  f"{blood_pixels} blood pixels); "
                  f"rigid flow-warp worst frame {100 * worst:.2f}% over {checked} pixels (>= 99%)"
                  + ("" if ok else f"; {problems[:3]}"))
    assert ok, problems


# ------------------------------------------------------------------ 7


REQUIRED = [
    ("grasper", {"retract"}, "gallbladder"),
    ("hook", {"coagulate", "dissect"}, None),
    ("clipper", {"clip"}, "cystic_duct"),
    ("scissors", {"cut"}, "cystic_duct"),
]


def test_c7_procedure_state_machine(demo_run):
    _, res, _ = demo_run
    log = [tuple(e["triplet"]) for e in res.manifest["triplets"]]
    found, pos = [], 0
    for tool, verbs, target in REQUIRED:
        while pos < len(log) and not (log[pos][0] == tool and log[pos][1] in verbs
                                      and (target is None or log[pos][2] == target)):
            pos += 1
        if pos == len(log):
            break
        found.append(res.manifest["triplets"][pos]["frame"])
    mesh = res.body.mesh
    comp = components_union_find(mesh.tets, mesh.alive)
    alive = mesh.alive
    gb = {int(c) for c in comp[alive & (mesh.labels == LABELS["gallbladder"])]}
    liver = {int(c) for c in comp[alive & (mesh.labels == LABELS["liver"])]}
    disconnected = bool(gb) and bool(liver) and not gb & liver
    ok = len(found) == len(REQUIRED) and disconnected
    record(7, ok, f"ordered stage triplets at frames {found}; gallbladder components {sorted(gb)}, "
                  f"liver components {sorted(liver)} (disjoint)")
    assert ok


# ------------------------------------------------------------------ 8


def test_c8_metric_oracles():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 6))
    self_fid = abs(fid(a, a))
    z = np.array([[-1.0], [0.0], [1.0]])
    one_d = fid(z, 2 * z)
    hand = density_coverage([[0.0], [1.0], [3.0]], [[0.5], [2.5]], 1)
    knn_ok = True
    for _ in range(3):
        real, gen = rng.normal(size=(200, 5)), rng.normal(size=(200, 5)) + 0.3
        for k in (1, 5, 10):
            knn_ok &= np.allclose(knn_radii(real, k), knn_radius_brute(real, k), rtol=1e-15, atol=0)
            knn_ok &= density_coverage(real, gen, k) == density_coverage_brute(real, gen, k)
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    m = miou(np.zeros_like(gt), gt, 2)
    ok = (self_fid < 1e-8 and abs(one_d - 1) < 1e-6 and hand == (1.5, 1.0) and knn_ok
          and m == 25.0 and miou_brute(np.zeros_like(gt), gt, 2) == 25.0)
    record(8, ok, f"fid(A,A)={self_fid:.1e}, 1-D fid={one_d:.9f}, density/coverage={hand}, "
                  f"k-NN vs brute force {'equal' if knn_ok else 'DIFFER'}, mIoU={m}")
    assert ok


# ------------------------------------------------------------------ 9


def test_c9_determinism(demo_run, demo_run_repeat, tmp_path):
    a, b = directory_digest(demo_run[2]), directory_digest(demo_run_repeat[2])
    sc = parse_scenario(MINIMAL)
    run_scenario(sc, threads=2, out_dir=tmp_path / "p1")
    run_scenario(sc, threads=2, out_dir=tmp_path / "p2")
    par = directory_digest(tmp_path / "p1") == directory_digest(tmp_path / "p2")
    ok = a == b and len(a) > 1 and par
    record(9, ok, f"demo runs byte-identical over {len(a)} files; 2-thread runs identical: {par}")
    assert ok


# ------------------------------------------------------------------ 10


def bench(threads: int, substeps: int = 2000) -> float:
    code = ("from surgsim.bench import run_bench; "
            f"r = run_bench({substeps}, threads={threads}); print(r.n_tets, r.substeps_per_second)")
    env = dict(os.environ, NUMBA_NUM_THREADS="8")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    n_tets, rate = out.stdout.split()
    assert 4500 <= int(n_tets) <= 5500
    return float(rate)


def test_c10_performance_floor():
    single = bench(1)
    eight = bench(8)
    speedup = eight / single
    cpus = os.cpu_count() or 1
    single_ok, speed_ok = single >= 1000.0, speedup >= 1.0
    record(10, single_ok and speed_ok,
           f"{single:.0f} substeps/s single-threaded (floor 1000, target 2000); "
           f"8 threads {eight:.0f}/s, speedup {speedup:.2f}x (floor 1x, target 2x) on {cpus} CPU(s)")
    assert single_ok
    if not speed_ok and cpus < 8:
        pytest.xfail(f"8-thread speedup cannot be measured on {cpus} CPU(s)")
    assert speed_ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
