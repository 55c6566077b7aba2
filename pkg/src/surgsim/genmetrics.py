"""Generative-model metrics over precomputed embeddings and label masks.

Embedding files: b"SEMB" + n + d (uint32 little-endian) + n*d float32, row-major.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SEMB_MAGIC = b"SEMB"


class MetricError(ValueError):
    pass


# ------------------------------------------------------------------ embeddings


def write_embeddings(path, vectors) -> None:
    v = np.ascontiguousarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise MetricError("embeddings must be a 2-D matrix")
    with open(path, "wb") as f:
        f.write(SEMB_MAGIC + struct.pack("<II", *v.shape))
        f.write(v.tobytes())


def read_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != SEMB_MAGIC:
        raise MetricError(f"{path}: not an embedding file (missing SEMB header)")
    n, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * n * d:
        raise MetricError(f"{path}: expected {12 + 4 * n * d} bytes for {n}x{d}, found {len(data)}")
    v = np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)
    _check_set(v, str(path))
    return v


def _check_set(x, name="embedding set", min_n: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise MetricError(f"{name}: expected an n x d matrix")
    if len(x) < min_n:
        raise MetricError(f"{name}: need at least {min_n} rows, got {len(x)}")
    if not np.isfinite(x).all():
        raise MetricError(f"{name}: contains non-finite values")
    return x


def _pair(x, y, min_n=1):
    x = _check_set(x, "real", min_n)
    y = _check_set(y, "generated", min_n)
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def sq_distances(a, b) -> np.ndarray:
    """Exact pairwise squared Euclidean distances (difference form, no cancellation)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


# ------------------------------------------------------------------ mIoU


def miou(pred, gt, n_classes: int | None = None) -> float:
    """Mean IoU in percent over classes present in prediction or ground truth."""
    inter, union = iou_counts(pred, gt, n_classes)
    return miou_from_counts(inter, union)


def iou_counts(pred, gt, n_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    if pred.size and (pred.max() >= n_classes or gt.max() >= n_classes or pred.min() < 0 or gt.min() < 0):
        raise MetricError(f"labels must lie in [0, {n_classes})")
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    inter = np.bincount(p[p == g], minlength=n_classes)[:n_classes]
    area_p = np.bincount(p, minlength=n_classes)[:n_classes]
    area_g = np.bincount(g, minlength=n_classes)[:n_classes]
    return inter, area_p + area_g - inter


def miou_from_counts(inter, union) -> float:
    present = union > 0
    if not present.any():
        raise MetricError("no class present in either mask")
    return float(100.0 * np.mean(inter[present] / union[present]))


# ------------------------------------------------------------------ FID


def _sqrt_psd(s) -> np.ndarray:
    w, v = np.linalg.eigh((s + s.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _sqrtm_trace(sx, sy) -> float:
    """Tr((Sx Sy)^1/2) as the nuclear norm of Sx^1/2 Sy^1/2.

    Both roots come from clamped symmetric eigendecompositions. Summing singular
    values avoids square-rooting roundoff-sized eigenvalues of the product,
    which would otherwise leave errors of order sqrt(eps) for singular inputs.
    """
    return float(np.linalg.svd(_sqrt_psd(sx) @ _sqrt_psd(sy), compute_uv=False).sum())


def fid_from_stats(mu_x, sigma_x, mu_y, sigma_y) -> float:
    mu_x, mu_y = np.atleast_1d(mu_x).astype(float), np.atleast_1d(mu_y).astype(float)
    sx, sy = np.atleast_2d(sigma_x).astype(float), np.atleast_2d(sigma_y).astype(float)
    diff = mu_x - mu_y
    cross = _sqrtm_trace(sx, sy)
    value = float(diff @ diff + np.trace(sx) + np.trace(sy) - 2.0 * cross)
    if not math.isfinite(value):
        raise MetricError("FID is not finite; covariance matrices are too ill-conditioned")
    return value


def fid(real, gen) -> float:
    x, y = _pair(real, gen, min_n=2)
    return fid_from_stats(x.mean(0), np.cov(x, rowvar=False, ddof=1), y.mean(0), np.cov(y, rowvar=False, ddof=1))


# ------------------------------------------------------------------ kernel MMD


def _mmd2(kxx, kyy, kxy, biased: bool) -> float:
    m, n = len(kxx), len(kyy)
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    if m < 2 or n < 2:
        raise MetricError("unbiased MMD needs at least 2 samples per set")
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def poly_kernel(a, b, degree: int = 3) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** degree


def kid(real, gen, kernel_degree: int = 3, subset_size: int | None = None, n_subsets: int = 100,
        seed: int = 0, biased: bool = False) -> float:
    """Mean polynomial-kernel MMD^2 over seeded random subsets (without replacement)."""
    x, y = _pair(real, gen)
    if subset_size is None:
        subset_size = min(len(x), len(y), 1000)
    if subset_size < 2 and not biased:
        raise MetricError("subset_size must be at least 2")
    if subset_size > min(len(x), len(y)):
        raise MetricError(f"subset_size {subset_size} exceeds set size {min(len(x), len(y))}")
    full = subset_size == len(x) == len(y)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(1 if full else n_subsets):
        xs = x if full else x[rng.choice(len(x), subset_size, replace=False)]
        ys = y if full else y[rng.choice(len(y), subset_size, replace=False)]
        vals.append(_mmd2(poly_kernel(xs, xs, kernel_degree), poly_kernel(ys, ys, kernel_degree),
                          poly_kernel(xs, ys, kernel_degree), biased))
    return float(np.mean(vals))


def median_bandwidth(real, gen) -> float:
    pooled = np.concatenate(_pair(real, gen))
    d2 = sq_distances(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.sqrt(np.median(d2[iu]))) if len(iu[0]) else 0.0
    if med <= 0:
        raise MetricError("median pairwise distance is zero; bandwidth is undefined")
    return med


def mmd_rbf(real, gen, bandwidth="median", biased: bool = False) -> float:
    """Gaussian-kernel MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 sigma^2))."""
    x, y = _pair(real, gen)
    sigma = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    if not sigma > 0:
        raise MetricError("bandwidth must be positive")
    g = -1.0 / (2.0 * sigma * sigma)
    return _mmd2(np.exp(g * sq_distances(x, x)), np.exp(g * sq_distances(y, y)),
                 np.exp(g * sq_distances(x, y)), biased)


# ------------------------------------------------------------------ density / coverage


def _knn_sq_radii(x, k: int) -> np.ndarray:
    if k < 1 or k >= len(x):
        raise MetricError(f"k must satisfy 1 <= k < n_real ({len(x)}), got {k}")
    tree = cKDTree(x)
    # k+1 neighbours because each point finds itself first; two spare candidates
    # absorb rounding differences between the tree's metric and the exact one.
    _, idx = tree.query(x, k=min(k + 3, len(x)))
    idx = np.atleast_2d(idx)
    # Re-measure the candidates exactly and drop one self-match before taking the k-th.
    d2 = ((x[idx] - x[:, None, :]) ** 2).sum(-1)
    d2.sort(axis=1)
    return d2[:, k]


def knn_radii(real, k: int) -> np.ndarray:
    """Distance from each real sample to its k-th nearest other real sample."""
    return np.sqrt(_knn_sq_radii(_check_set(real, "real"), k))


def density_coverage(real, gen, k: int) -> tuple[float, float]:
    x, y = _pair(real, gen)
    # Closed balls compared in squared form, so a sample exactly on a boundary stays inside.
    inside = sq_distances(y, x) <= _knn_sq_radii(x, k)[None, :]
    density = float(inside.sum() / (k * len(y)))
    coverage = float(inside.any(axis=0).mean())
    return density, coverage


# ------------------------------------------------------------------ report


@dataclass
class MetricReport:
    miou: float | None = None
    fid: float | None = None
    kid: float | None = None
    mmd_rbf: float | None = None
    density: float | None = None
    coverage: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.coverage is not None and not 0.0 <= self.coverage <= 1.0:
            raise MetricError("coverage must lie in [0, 1]")
        if self.density is not None and self.density < 0:
            raise MetricError("density must be non-negative")

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "params" and v is not None}
        out.update(self.params)
        return out

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def embedding_report(real, gen, k: int = 5, kid_subsets: int = 100, kid_subset_size: int | None = None,
                     bandwidth="median", seed: int = 0) -> MetricReport:
    x, y = _pair(real, gen, min_n=2)
    size = kid_subset_size or min(len(x), len(y), 1000)
    sigma = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    dens, cov = density_coverage(x, y, k)
    return MetricReport(
        fid=fid(x, y),
        kid=kid(x, y, 3, size, kid_subsets, seed),
        mmd_rbf=mmd_rbf(x, y, sigma),
        density=dens,
        coverage=cov,
        params={
            "n_real": len(x), "n_gen": len(y), "dim": x.shape[1], "k": k,
            "kid_kernel": "polynomial (x.y/d + 1)^3", "kid_subsets": kid_subsets, "kid_subset_size": size,
            "mmd_kernel": "gaussian", "mmd_bandwidth": sigma,
            "mmd_bandwidth_rule": "median" if bandwidth == "median" else "fixed", "seed": seed,
        },
    )
