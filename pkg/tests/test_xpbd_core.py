import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surgsim.neohookean import MaterialParams, build_constraints
from surgsim.tetmesh import box_mesh, compute_rest_state
from surgsim.xpbd_core import (
    AttachmentBatch, Constraint, ListBatch, ParticleSystem, PhaseTimer, SolverConfig, SolverConfigError,
    SolverNaNError, color_constraints, constraint_forces, flatten_batches, predict, project_constraint,
    substep,
)


def free(x, v=(0, 0, 0), w=1.0):
    p = ParticleSystem.at_rest([x], [w])
    p.velocities[0] = v
    return p


def cfg(**kw):
    base = dict(dt_substep=0.01, gravity=(0, 0, -10), velocity_damping=1.0)
    base.update(kw)
    return SolverConfig(**base)


# ------------------------------------------------------------------ predict


def test_predict_examples():
    p = free([0, 0, 0])
    predict(p, cfg(), dt=0.1)
    assert np.allclose(p.positions[0], [0, 0, -0.1], atol=1e-15)
    pinned = free([1, 2, 3], v=(5, 5, 5), w=0.0)
    predict(pinned, cfg(), dt=0.1)
    assert np.array_equal(pinned.positions[0], [1, 2, 3])
    q = free([0, 0, 0], v=(1, 0, 0))
    predict(q, cfg(gravity=(0, 0, 0)), dt=0.5)
    assert np.array_equal(q.positions[0], [0.5, 0, 0])
    assert np.array_equal(q.prev_positions[0], [0, 0, 0])


def test_config_validation():
    for bad in (dict(dt_substep=1e-6), dict(dt_substep=0.1), dict(substeps_per_frame=0),
                dict(iterations_per_substep=0), dict(velocity_damping=0.0), dict(velocity_damping=1.5),
                dict(threads=0)):
        with pytest.raises(SolverConfigError):
            cfg(**bad)


# ------------------------------------------------------------------ projection


def scalar_constraint(alpha=0.0, ineq=False, value=None):
    def ev(pos):
        c = pos[0, 0] if value is None else value
        return float(c), np.array([[1.0, 0.0, 0.0]])
    return Constraint(np.array([0]), ev, compliance=alpha, is_inequality=ineq)


def test_projection_rigid_snaps():
    p = free([1, 0, 0])
    c = scalar_constraint()
    _, dlam = project_constraint(c, p, dt=1.0)
    assert dlam == -1.0 and c.lam == -1.0
    assert p.positions[0, 0] == 0.0


def test_projection_compliant_halves():
    p = free([1, 0, 0])
    c = scalar_constraint(alpha=1.0)  # alpha~ = 1 at dt = 1
    _, dlam = project_constraint(c, p, dt=1.0)
    assert dlam == pytest.approx(-0.5, abs=1e-15)
    assert p.positions[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_projection_inactive_inequality():
    p = free([1, 0, 0])
    c = scalar_constraint(ineq=True, value=0.3)
    dx, dlam = project_constraint(c, p, dt=1.0)
    assert dlam == 0.0 and c.lam == 0.0 and not dx.any()
    assert p.positions[0, 0] == 1.0


def test_projection_zero_denominator_skips():
    p = free([1, 0, 0], w=0.0)
    c = scalar_constraint()
    _, dlam = project_constraint(c, p, dt=1.0)
    assert dlam == 0.0 and p.positions[0, 0] == 1.0


def test_huge_compliance_barely_moves():
    p = free([1, 0, 0])
    project_constraint(scalar_constraint(alpha=1e9), p, dt=1e-3)
    assert abs(p.positions[0, 0] - 1.0) < 1e-9


# ------------------------------------------------------------------ substep


def test_free_fall_closed_form():
    p = free([0, 0, 0])
    c = cfg()
    for _ in range(10):
        substep(p, [], c)
    # Symplectic Euler: z_n = -g dt^2 n (n + 1) / 2.
    assert p.positions[0, 2] == pytest.approx(-10 * 0.01 ** 2 * 55, abs=1e-15)


def test_rigid_attachment_holds_at_origin():
    p = free([0, 0, 0])
    att = AttachmentBatch([0], [[0, 0, 0]], 0.0)
    c = cfg(gravity=(3.0, -7.0, -9.81), dt_substep=1e-3)
    for _ in range(200):
        substep(p, [att], c)
        assert np.linalg.norm(p.positions[0]) < 1e-9


def test_uniform_motion_without_gravity():
    p = free([0, 0, 0], v=(1, 0, 0))
    c = cfg(gravity=(0, 0, 0))
    for _ in range(100):
        substep(p, [], c)
    assert np.abs(p.velocities[0] - [1, 0, 0]).max() < 1e-12


def test_velocity_is_position_difference():
    body = compute_rest_state(box_mesh((2, 1, 1), (0.02, 0.01, 0.01)))
    nh = build_constraints(body, MaterialParams())
    rng = np.random.default_rng(1)
    x = body.vertices_rest + 1e-3 * rng.normal(size=body.vertices_rest.shape)
    p = ParticleSystem.at_rest(x, np.full(len(x), 2.0))
    c = cfg(dt_substep=1e-3)
    substep(p, [nh], c)
    assert np.array_equal(p.velocities, (p.positions - p.prev_positions) / 1e-3)


def test_lambda_reset_each_substep():
    p = free([0, 0, 0])
    att = AttachmentBatch([0], [[0, 0, 0]], 0.0)
    c = cfg(dt_substep=1e-3)
    substep(p, [att], c)
    first = att.lam.copy()
    substep(p, [att], c)
    # A converged hold sees the same per-substep multiplier, not an accumulated one.
    assert att.lam[0] == pytest.approx(first[0], rel=1e-12)


def test_nan_names_offending_constraint():
    p = free([0, 0, 0])
    bad = Constraint(np.array([0]), lambda pos: (float("nan"), np.array([[1.0, 0, 0]])))
    with pytest.raises(SolverNaNError, match="generic constraint 0"):
        substep(p, [ListBatch([bad])], cfg(), substep_index=4)


def test_constraint_force_examples():
    pos = np.array([[1.0, 0.0, 0.0]])
    c = Constraint(np.array([0]), lambda x: (float(x[0, 0]), np.array([[1.0, 0, 0]])), lam=-1.0)
    forces = constraint_forces([ListBatch([c])], pos, dt=0.1)
    (idx, f), = forces["generic"]
    assert np.allclose(f, [[-100.0, 0, 0]])
    c.lam = 0.0
    (idx, f), = constraint_forces([ListBatch([c])], pos, dt=0.1)["generic"]
    assert not f.any()


def test_haptic_force_balances_gravity():
    p = free([0, 0, 0], w=1.0)
    att = AttachmentBatch([0], [[0, 0, 0]], 0.0)
    c = cfg(dt_substep=1e-3, gravity=(0, 0, -10))
    for _ in range(50):
        substep(p, [att], c)
    (idx, f), = constraint_forces([att], p.positions, 1e-3)["attachment"]
    assert f[0] == pytest.approx([0, 0, 10.0], rel=0.05)


# ------------------------------------------------------------------ properties


def two_particle_spring(rest=1.0, alpha=1e-4):
    def ev(x):
        d = x[1] - x[0]
        n = np.linalg.norm(d)
        g = d / n
        return float(n - rest), np.stack([-g, g])
    return Constraint(np.array([0, 1]), ev, compliance=alpha)


def test_momentum_conserved_by_internal_constraints():
    p = ParticleSystem.at_rest([[0, 0, 0], [1.3, 0.2, 0]], [1.0, 0.5])
    p.velocities[:] = [[0.1, 0.3, 0], [-0.2, 0.1, 0.05]]
    c = cfg(gravity=(0, 0, 0), dt_substep=1e-3)
    batch = ListBatch([two_particle_spring()])
    m0 = p.momentum()
    for _ in range(1000):
        substep(p, [batch], c)
    assert np.linalg.norm(p.momentum() - m0) <= 1e-8 * np.linalg.norm(m0)


def test_kinetic_energy_non_increasing_with_damping():
    p = ParticleSystem.at_rest([[0, 0, 0], [1.0, 0, 0]], [1.0, 1.0])
    p.velocities[:] = [[0, 1, 0], [0, -1, 0]]
    c = cfg(gravity=(0, 0, 0), dt_substep=1e-3, velocity_damping=0.99)
    batch = ListBatch([two_particle_spring(alpha=0.0)])
    e = p.kinetic_energy()
    for _ in range(300):
        substep(p, [batch], c)
        e2 = p.kinetic_energy()
        assert e2 <= e + 1e-15
        e = e2


def test_rest_mesh_with_pinned_base_is_stable():
    mesh = compute_rest_state(box_mesh((2, 2, 2), (0.02, 0.02, 0.02)))
    nh = build_constraints(mesh, MaterialParams())
    w = np.where(mesh.vertices_rest[:, 2] == 0.0, 0.0, 1.0 / 0.001)
    p = ParticleSystem.at_rest(mesh.vertices_rest, w)
    targets = mesh.vertices_rest.copy()
    att = AttachmentBatch(np.arange(len(w)), targets, 0.0)
    c = SolverConfig(dt_substep=1e-3)
    for _ in range(100):
        substep(p, [nh, att], c)
    before = p.positions.copy()
    substep(p, [nh, att], c)
    assert np.abs(p.positions - before).max() < 1e-6


def test_determinism_bit_identical():
    def run():
        mesh = compute_rest_state(box_mesh((3, 2, 2), (0.03, 0.02, 0.02)))
        nh = build_constraints(mesh, MaterialParams())
        w = np.where(mesh.vertices_rest[:, 2] == 0.0, 0.0, 500.0)
        p = ParticleSystem.at_rest(mesh.vertices_rest, w)
        c = SolverConfig(dt_substep=1e-3)
        for _ in range(200):
            substep(p, [nh], c)
        return p.positions.tobytes()
    assert run() == run()


def test_sweep_order_is_documented_default():
    mesh = compute_rest_state(box_mesh((1, 1, 1)))
    nh = build_constraints(mesh, MaterialParams())
    att = AttachmentBatch()
    kinds = [b.kind for b in flatten_batches([att, nh])]
    assert kinds == ["deviatoric", "hydrostatic", "attachment"]


def test_phase_timer_lines():
    t = PhaseTimer()
    p = free([0, 0, 0])
    for _ in range(3):
        substep(p, [], cfg(), timer=t)
    lines = t.lines()
    assert lines[0] == "substeps\t3"
    assert lines[1].startswith("substeps_per_second\t")
    assert all("\t" in line for line in lines)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 60), st.integers(2, 12), st.integers(0, 10_000))
def test_coloring_never_shares_particles(m, n, seed):
    rng = np.random.default_rng(seed)
    sets = np.stack([rng.choice(max(n, 4), 4, replace=False) for _ in range(m)])
    colors = color_constraints(sets)
    assert sorted(np.concatenate(colors).tolist()) == list(range(m))
    for c in colors:
        used = sets[c].ravel()
        assert len(used) == len(set(used.tolist()))


def test_kernel_matches_reference_projection():
    """One numba sweep of a tet part equals the Python reference projection, constraint by constraint."""
    mesh = compute_rest_state(box_mesh((2, 1, 1), (0.02, 0.01, 0.01)))
    nh = build_constraints(mesh, MaterialParams())
    rng = np.random.default_rng(7)
    x = mesh.vertices_rest + 1e-3 * rng.normal(size=mesh.vertices_rest.shape)
    w = rng.uniform(100, 1000, len(x))
    dt = 1e-3
    for part in (nh.deviatoric, nh.hydrostatic):
        ref = ParticleSystem.at_rest(x.copy(), w)
        part.reset()
        for i in part.active():
            project_constraint(part.constraint(i), ref, dt)
        fast = x.copy()
        part.reset()
        part.project(fast, w, dt)
        assert np.allclose(fast, ref.positions, rtol=0, atol=1e-14)
