"""Substep throughput on a block of tissue hanging from its pinned base."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .interaction import SoftBody
from .neohookean import MaterialParams
from .tetmesh import box_mesh
from .xpbd_core import SolverConfig, flatten_batches, set_threads, substep

# 12 x 12 x 6 hex cells, six tets each: 5184 tets.
BENCH_SHAPE = (12, 12, 6)


@dataclass
class BenchResult:
    n_tets: int
    substeps: int
    threads: int
    seconds: float

    @property
    def substeps_per_second(self) -> float:
        return self.substeps / self.seconds


def bench_body(shape=BENCH_SHAPE) -> SoftBody:
    mesh = box_mesh(shape, (0.12, 0.12, 0.06))
    pinned = mesh.vertices_rest[:, 2] == 0.0
    return SoftBody(mesh, MaterialParams(), pinned)


def run_bench(substeps: int = 2000, threads: int = 1, warmup: int = 20, shape=BENCH_SHAPE) -> BenchResult:
    """Time ``substeps`` substeps with one iteration each (compilation excluded)."""
    threads = set_threads(threads)
    body = bench_body(shape)
    cfg = SolverConfig(dt_substep=1e-3, iterations_per_substep=1, threads=threads)
    batches = flatten_batches(body.constraint_batches(), cfg.order)
    for _ in range(warmup):
        substep(body.particles, batches, cfg, presorted=True)
    t0 = time.perf_counter()
    for _ in range(substeps):
        substep(body.particles, batches, cfg, presorted=True)
    dt = time.perf_counter() - t0
    if not np.isfinite(body.particles.positions).all():
        raise FloatingPointError("benchmark state diverged")
    return BenchResult(body.mesh.n_tets, substeps, threads, dt)
