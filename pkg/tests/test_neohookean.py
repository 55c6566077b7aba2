import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surgsim.neohookean import (
    MaterialParams, build_constraints, cofactor, deviatoric_eval, energy, hydrostatic_eval, lumped_masses,
    validate_gradients,
)
from surgsim.tetmesh import TetMesh, box_mesh, compute_rest_state, signed_volumes, strip_mesh, total_volume
from surgsim.xpbd_core import AttachmentBatch, ParticleSystem, SolverConfig, substep

EYE = np.eye(3)


def fd_gradient(fn, x, h=1e-6):
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def test_hydrostatic_examples():
    c, g = hydrostatic_eval(EYE, EYE)
    assert c == 0.0
    assert np.allclose(cofactor(EYE), EYE)
    F = np.diag([2.0, 1, 1])
    c, _ = hydrostatic_eval(F, EYE)
    assert c == pytest.approx(1.0)
    assert np.allclose(cofactor(F), np.diag([1.0, 2, 2]))
    # Cofactor against finite differences of det, independently of the package.
    assert np.allclose(cofactor(F), fd_gradient(np.linalg.det, F), atol=1e-8)


def test_hydrostatic_inverted_is_finite():
    F = np.diag([-0.5, 1.0, 1.0])
    c, g = hydrostatic_eval(F, EYE)
    assert c == pytest.approx(-1.5)
    assert np.isfinite(g).all()
    assert np.allclose(cofactor(F), fd_gradient(np.linalg.det, F), atol=1e-8)


def test_deviatoric_examples():
    c, g = deviatoric_eval(EYE, EYE)
    assert c == pytest.approx(math.sqrt(3), abs=1e-15)
    # Gradient wrt x1..x3 equals dC/dF columns when D_m = I.
    assert np.allclose(g[1:].T, EYE / math.sqrt(3))
    c, _ = deviatoric_eval(np.diag([2.0, 1, 1]), EYE)
    assert c == pytest.approx(2.4494897, abs=1e-7)
    c, g = deviatoric_eval(np.zeros((3, 3)), EYE)
    assert c == 0.0 and g is None


def test_particle_gradients_sum_to_zero():
    rng = np.random.default_rng(3)
    dminv = np.linalg.inv(rng.normal(size=(3, 3)) + 2 * EYE)
    F = rng.normal(size=(3, 3)) + EYE
    for fn in (hydrostatic_eval, deviatoric_eval):
        _, g = fn(F, dminv)
        assert np.abs(g.sum(axis=0)).max() < 1e-12


def test_energy_examples():
    p = MaterialParams(lame_lambda=2.0, lame_mu=4.0)
    assert energy(EYE, p) == 0.0
    assert energy(np.diag([2.0, 1, 1]), p) == pytest.approx(7.0)
    R = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    assert energy(R, p) == pytest.approx(0.0, abs=1e-12)


def test_material_validation_and_compliance():
    with pytest.raises(ValueError):
        MaterialParams(lame_lambda=0.0)
    with pytest.raises(ValueError):
        MaterialParams(lame_mu=-1.0)
    p = MaterialParams(lame_lambda=5e4, lame_mu=1e4)
    assert p.hydrostatic_compliance(2e-3) == pytest.approx(1e-2)
    assert p.deviatoric_compliance(2e-3) == pytest.approx(5e-2)


def test_gradient_validation_1000_samples():
    r = validate_gradients(samples=1000, seed=11)
    assert r.samples == 1000
    assert r.max_rel_error < 1e-5


def test_build_counts():
    one = compute_rest_state(strip_mesh(1))
    assert len(build_constraints(one, MaterialParams())) == 2
    two = compute_rest_state(strip_mesh(2))
    two.alive[0] = False
    b = build_constraints(two, MaterialParams())
    assert len(b) == 2 and [p.tet_index for p in b.pairs()] == [1]
    hundred = compute_rest_state(strip_mesh(100))
    b = build_constraints(hundred, MaterialParams())
    assert len(b) == 200
    for pair in b.pairs():
        t = pair.tet_index
        assert list(pair.hydrostatic.particles) == list(hundred.tets[t])
        assert list(pair.deviatoric.particles) == list(hundred.tets[t])


def test_compliance_scaled_by_rest_volume():
    m = compute_rest_state(box_mesh((2, 1, 1), (0.02, 0.01, 0.01)))
    p = MaterialParams(lame_lambda=3e4, lame_mu=7e3)
    b = build_constraints(m, p)
    assert np.allclose(b.hydrostatic.alpha, 1 / (3e4 * m.rest_volume))
    assert np.allclose(b.deviatoric.alpha, 1 / (7e3 * m.rest_volume))


def test_per_label_materials():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], float)
    m = compute_rest_state(TetMesh(v, [[0, 1, 2, 3], [1, 2, 3, 4]], [1, 2]))
    soft, stiff = MaterialParams(1e3, 1e2), MaterialParams(1e6, 1e5)
    b = build_constraints(m, {1: soft, 2: stiff})
    assert b.hydrostatic.alpha[0] == pytest.approx(1 / (1e3 * m.rest_volume[0]))
    assert b.hydrostatic.alpha[1] == pytest.approx(1 / (1e6 * m.rest_volume[1]))


def test_lumped_mass_sums_to_total():
    m = compute_rest_state(box_mesh((2, 2, 2), (0.02, 0.02, 0.02)))
    masses = lumped_masses(m, MaterialParams(density=1000.0))
    assert masses.sum() == pytest.approx(1000.0 * 0.02 ** 3, rel=1e-12)


def test_rest_state_exactly_satisfied():
    m = compute_rest_state(box_mesh((2, 2, 2), (0.03, 0.03, 0.03)))
    b = build_constraints(m, MaterialParams())
    x = m.vertices_rest.copy()
    for pair in b.pairs():
        assert abs(pair.hydrostatic.evaluate(x)[0]) < 1e-12
        assert abs(pair.deviatoric.evaluate(x)[0]) < 1e-12
    w = np.ones(len(x))
    for part in b.parts():
        part.reset()
        before = x.copy()
        part.project(x, w, 1e-3)
        assert np.abs(x - before).max() < 1e-15


def _cube(n=5, size=0.05):
    return compute_rest_state(box_mesh((n, n, n), (size, size, size)))


def test_volume_preserved_under_compression():
    mesh = _cube()
    v_rest = total_volume(mesh, mesh.vertices_rest)
    # Lambda chosen so every hydrostatic compliance is at most 5e-9.
    lam = 2.0 / (1e-8 * mesh.rest_volume.min())
    nh = build_constraints(mesh, MaterialParams(lame_lambda=lam, lame_mu=1e4))
    w = 1.0 / lumped_masses(mesh, MaterialParams())
    assert nh.hydrostatic.alpha.max() <= 1e-8
    z = mesh.vertices_rest[:, 2]
    bottom, top = np.flatnonzero(z == 0.0), np.flatnonzero(np.isclose(z, 0.05))
    targets = mesh.vertices_rest.copy()
    targets[top, 2] *= 0.8
    att = AttachmentBatch(np.concatenate([bottom, top]), np.concatenate([targets[bottom], targets[top]]), 0.0)
    p = ParticleSystem.at_rest(mesh.vertices_rest, w)
    cfg = SolverConfig(dt_substep=1e-3, gravity=(0, 0, 0))
    for _ in range(2000):
        substep(p, [nh, att], cfg)
    assert np.allclose(p.positions[top, 2], 0.04, atol=1e-9)
    assert abs(total_volume(mesh, p.positions) / v_rest - 1.0) < 0.02


def test_inverted_interior_tet_recovers():
    mesh = _cube()
    nh = build_constraints(mesh, MaterialParams())
    w = 1.0 / lumped_masses(mesh, MaterialParams())
    x = mesh.vertices_rest.copy()
    centre = x[mesh.tets].mean(axis=1)
    t = int(np.argmin(np.linalg.norm(centre - 0.025, axis=1)))
    a, b, c, d = mesh.tets[t]
    # Reflect vertex a through the plane of the opposite face.
    n = np.cross(x[c] - x[b], x[d] - x[b])
    n /= np.linalg.norm(n)
    x[a] -= 2 * np.dot(x[a] - x[b], n) * n
    assert signed_volumes(x, mesh.tets)[t] < 0
    p = ParticleSystem.at_rest(x, w)
    cfg = SolverConfig(dt_substep=1e-3, gravity=(0, 0, 0))
    for _ in range(500):
        substep(p, [nh], cfg)
    assert signed_volumes(p.positions, mesh.tets).min() > 0
