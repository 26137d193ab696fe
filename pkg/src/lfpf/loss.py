"""Training objective: OSPA accuracy term plus a kernel-density heatmap term.

The heatmap term compares an oracle density with the density reconstructed
from the (corrected) particles. The reconstruction uses adapting kernels:
each sub-particle gets an isotropic Gaussian-shaped kernel whose peak is the
oracle density at that point and whose volume is ``1/N``. With N-scaled
weights the kernels of one sub-state then integrate to one. Densities are
compared per sub-state on grid points, optionally restricted to a subset of
the state dimensions (the radar settings use position only).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diff
from .diff import Tensor
from .pf import ParticleSet, estimate_state

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GridSpec:
    kind: str = "random"  # random | staged_meshgrid
    n_samples: int = 2000  # random grid: points per sub-state
    spread: float = 2.0  # random grid: sampling std in oracle stds
    L: int = 5  # staged: number of stages
    points_per_stage: int = 15  # staged: G points per axis
    resolution_ratio: float = 2.0
    finest_halfwidth: float = 1.0  # staged: finest cube half-width in oracle stds
    stage_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("random", "staged_meshgrid"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.L < 1 or self.points_per_stage < 1 or self.n_samples < 1:
            raise ValueError("grid sizes must be positive")
        if self.resolution_ratio <= 1:
            raise ValueError("resolution_ratio must exceed 1")
        if self.stage_weights is not None and len(self.stage_weights) != self.L:
            raise ValueError("need one stage weight per stage")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    ospa_order: float = 2.0
    ospa_cutoff: float = np.inf
    grid: GridSpec = field(default_factory=GridSpec)
    oracle_mode: str = "O1"
    teacher_n: int = 300
    teacher_kernel_sigma: float | None = None  # None -> Silverman bandwidth per sub-state
    dims: tuple[int, ...] | None = None  # heatmap dimensions; None -> all
    h_min: float = 1e-12

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.oracle_mode not in ("O1", "O2"):
            raise ValueError(f"unknown oracle mode {self.oracle_mode!r}")
        if self.oracle_mode == "O1" and self.teacher_n < 1:
            raise ValueError("O1 needs a teacher particle count")


# OSPA ----------------------------------------------------------------------

def _cost(a: np.ndarray, b: np.ndarray, order: float, cutoff: float) -> np.ndarray:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return np.minimum(d, cutoff) ** order


def ospa_assignment(a: np.ndarray, b: np.ndarray, order: float = 2.0,
                    cutoff: float = np.inf) -> np.ndarray:
    """Column permutation minimizing the summed clipped cost (Hungarian-type solver)."""
    rows, cols = linear_sum_assignment(_cost(a, b, order, cutoff))
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm


def ospa(a: np.ndarray, b: np.ndarray, order: float = 2.0, cutoff: float = np.inf) -> float:
    """OSPA distance between two equal-size sets of sub-states ``(t, d)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"OSPA needs equal-cardinality sets, got {a.shape} and {b.shape}")
    cost = _cost(a, b, order, cutoff)
    rows, cols = linear_sum_assignment(cost)
    return float((cost[rows, cols].sum() / len(a)) ** (1.0 / order))


def ospa_tensor(desired: np.ndarray, estimate: Tensor, order: float = 2.0) -> Tensor:
    """Infinite-cutoff OSPA with gradient to ``estimate``; assignment is held fixed."""
    perm = ospa_assignment(estimate.value, desired, order)
    diffs = estimate - desired[perm]
    sq = (diffs * diffs).sum(axis=-1)
    if order == 2.0:
        return diff.sqrt(sq.mean())
    return (diff.sqrt(sq) ** order).mean() ** (1.0 / order)


def ospa_bruteforce(a: np.ndarray, b: np.ndarray, order: float = 2.0,
                    cutoff: float = np.inf) -> float:
    cost = _cost(np.asarray(a, float), np.asarray(b, float), order, cutoff)
    t = len(cost)
    best = min(sum(cost[i, p[i]] for i in range(t)) for p in itertools.permutations(range(t)))
    return float((best / t) ** (1.0 / order))


# oracles -------------------------------------------------------------------

def weighted_variances(pset: ParticleSet) -> np.ndarray:
    """Per-sub-state, per-dimension weighted variances ``(t, d_sp)``."""
    mean = estimate_state(pset)
    return np.einsum("n,ntd->td", pset.weights, (pset.particles - mean) ** 2)


def silverman_sigma(var: np.ndarray, n_eff: float) -> np.ndarray:
    """Isotropic rule-of-thumb bandwidth per sub-state from ``(t, d)`` variances."""
    d = var.shape[-1]
    return np.sqrt(var.mean(-1)) * (4.0 / ((d + 2) * n_eff)) ** (1.0 / (d + 4))


@dataclass(eq=False)
class OracleDensity:
    """Per-sub-state isotropic Gaussian mixture over the heatmap dimensions."""

    mode: str
    centers: np.ndarray  # (t, K, d_h)
    mix: np.ndarray  # (K,)
    sigma: np.ndarray  # (t,)
    variances: np.ndarray  # (t, d_sp) target variances
    desired: np.ndarray  # (t, d_sp)
    dims: tuple[int, ...]

    @property
    def t(self) -> int:
        return self.centers.shape[0]

    @property
    def d_h(self) -> int:
        return self.centers.shape[2]

    @property
    def std(self) -> np.ndarray:
        """Spread of the oracle per sub-state, used to size grids."""
        return np.sqrt(self.variances[:, list(self.dims)].mean(-1))

    def _norm(self) -> np.ndarray:
        return np.exp(-0.5 * self.d_h * (LOG_2PI + 2 * np.log(self.sigma)))

    def density(self, points: np.ndarray) -> np.ndarray:
        """Values at ``points (t, M, d_h)`` -> ``(t, M)``."""
        d2 = ((points[:, :, None, :] - self.centers[:, None, :, :]) ** 2).sum(-1)
        s2 = (self.sigma ** 2)[:, None, None]
        return (self._norm()[:, None] * (self.mix * np.exp(-d2 / (2 * s2))).sum(-1))

    def density_at(self, x: Tensor) -> Tensor:
        """Values at sub-particles ``x (N, t, d_h)`` -> ``(N, t)``, differentiable in ``x``."""
        n, t, d = x.shape
        delta = x.reshape(n, t, 1, d) - self.centers[None]
        d2 = (delta * delta).sum(axis=-1)  # (N, t, K)
        scaled = d2 * (-0.5 / self.sigma ** 2)[None, :, None]
        return (diff.exp(scaled) * self.mix).sum(axis=-1) * self._norm()


def build_oracle(mode: str, config: LossConfig, teacher: ParticleSet | None = None,
                 truth: np.ndarray | None = None) -> OracleDensity:
    """O1: teacher kernel density; O2: Gaussian at the true sub-states."""
    if teacher is None:
        raise ValueError("oracle variances come from the teacher set")
    d_sp = teacher.d_sp
    dims = tuple(range(d_sp)) if config.dims is None else tuple(config.dims)
    var = weighted_variances(teacher)
    if mode == "O1":
        if config.teacher_kernel_sigma is None:
            n_eff = 1.0 / np.sum(teacher.weights ** 2)
            sigma = silverman_sigma(var[:, list(dims)], n_eff)
            sigma = np.maximum(sigma, 1e-6)
        else:
            sigma = np.full(teacher.t, float(config.teacher_kernel_sigma))
        centers = np.swapaxes(teacher.particles[:, :, list(dims)], 0, 1)
        keep = teacher.weights > 0
        return OracleDensity("O1", centers[:, keep], teacher.weights[keep], sigma, var,
                             estimate_state(teacher), dims)
    if mode == "O2":
        if truth is None:
            raise ValueError("O2 oracle needs the true state")
        truth = np.asarray(truth, dtype=np.float64)
        v = np.maximum(var.mean(-1), 1e-12)  # isotropic, one value per sub-state
        return OracleDensity("O2", truth[:, None, list(dims)], np.ones(1), np.sqrt(v),
                             np.repeat(v[:, None], d_sp, axis=1), truth.copy(), dims)
    raise ValueError(f"unknown oracle mode {mode!r}")


# adapting kernels ----------------------------------------------------------

@dataclass(eq=False)
class KernelBank:
    heights: np.ndarray  # (N, t)
    sigmas: np.ndarray  # (N, t)

    def volumes(self, d: int) -> np.ndarray:
        return self.heights * (2 * np.pi * self.sigmas ** 2) ** (d / 2)


def kernel_sigma(heights, n: int, d: int):
    """Width giving a kernel of peak ``heights`` the volume ``1/n``."""
    return (1.0 / (n * heights * (2 * np.pi) ** (d / 2))) ** (1.0 / d)


def build_adapting_kernels(pset: ParticleSet, oracle: OracleDensity,
                           h_min: float = 1e-12) -> KernelBank:
    xh = pset.particles[:, :, list(oracle.dims)]
    h = np.maximum(oracle.density_at(Tensor(xh)).value, h_min)
    return KernelBank(h, kernel_sigma(h, pset.n, oracle.d_h))


# grids ---------------------------------------------------------------------

@dataclass(eq=False)
class Grid:
    points: np.ndarray  # (t, M, d_h)
    weights: np.ndarray  # (t, M); padding points carry zero weight

    def __post_init__(self):
        if self.points.shape[1] == 0 or not np.any(self.weights > 0):
            raise ValueError("empty grid")


def _cube(center: np.ndarray, halfwidth: float, g: int) -> tuple[np.ndarray, float]:
    step = 2 * halfwidth / g
    axis = -halfwidth + step * (np.arange(g) + 0.5)
    mesh = np.meshgrid(*([axis] * len(center)), indexing="ij")
    return center + np.stack([m.ravel() for m in mesh], axis=1), step


def _box_overlap(lo: np.ndarray, hi: np.ndarray, boxes: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Volume of each cell ``[lo, hi]`` (rows) covered by the union of ``boxes``."""
    covered = np.zeros(len(lo))
    for r in range(1, len(boxes) + 1):
        sign = 1.0 if r % 2 else -1.0
        for combo in itertools.combinations(boxes, r):
            blo = np.max([b[0] for b in combo], axis=0)
            bhi = np.min([b[1] for b in combo], axis=0)
            side = np.clip(np.minimum(hi, bhi) - np.maximum(lo, blo), 0.0, None)
            covered += sign * side.prod(axis=1)
    return covered


def staged_points(spec: GridSpec, centers: list[np.ndarray], base: float
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Co-centered stages; every region is counted once, at its finest stage.

    A cell of stage l around center c keeps only its volume not covered by a
    finer stage's cube (around any center) or by the same stage's cube around
    an earlier center; cells left with no volume are dropped. Weights are that
    remaining volume times the stage weight, so they partition the union of
    the coarsest cubes.
    """
    stage_w = spec.stage_weights or (1.0,) * spec.L
    halfwidths = [base * spec.resolution_ratio ** l for l in range(spec.L)]
    pts, wts = [], []
    for l, hw in enumerate(halfwidths):
        for ci, c in enumerate(centers):
            cube, step = _cube(c, hw, spec.points_per_stage)
            boxes = [(c2 - halfwidths[l - 1], c2 + halfwidths[l - 1]) for c2 in centers] if l else []
            boxes += [(c2 - hw, c2 + hw) for c2 in centers[:ci]]
            vol = np.full(len(cube), step ** len(c))
            if boxes:
                vol = vol - _box_overlap(cube - step / 2, cube + step / 2, boxes)
            keep = vol > 1e-9 * step ** len(c)
            pts.append(cube[keep])
            wts.append(stage_w[l] * vol[keep])
    return np.concatenate(pts), np.concatenate(wts)


def random_points(spec: GridSpec, centers: list[np.ndarray], std: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian samples split evenly between centers, importance-weighted by 1/(M g)."""
    d = len(centers[0])
    s = spec.spread * std
    counts = np.full(len(centers), spec.n_samples // len(centers))
    counts[: spec.n_samples - counts.sum()] += 1
    pts = np.concatenate([c + s * rng.standard_normal((k, d)) for c, k in zip(centers, counts)])
    log_g = np.stack([-0.5 * ((pts - c) ** 2).sum(-1) / s ** 2 for c in centers])
    log_g = np.logaddexp.reduce(log_g, axis=0) - np.log(len(centers)) - 0.5 * d * (LOG_2PI + 2 * np.log(s))
    return pts, np.exp(-log_g) / len(pts)


MAX_MESH_POINTS = 2_000_000


def build_grid(spec: GridSpec, oracle: OracleDensity, estimate: np.ndarray,
               rng: np.random.Generator | None = None) -> Grid:
    """Grid points per sub-state around the desired and estimated sub-states."""
    dims = list(oracle.dims)
    if spec.kind == "staged_meshgrid" and spec.points_per_stage ** len(dims) > MAX_MESH_POINTS:
        raise ValueError(f"staged meshgrid over {len(dims)} dims is too large; "
                         "restrict the heatmap dims or use the random grid")
    std = np.maximum(oracle.std, 1e-9)
    per_sub = []
    for j in range(oracle.t):
        centers = [oracle.desired[j, dims], estimate[j, dims]]
        if spec.kind == "staged_meshgrid":
            per_sub.append(staged_points(spec, centers, spec.finest_halfwidth * std[j]))
        else:
            if rng is None:
                raise ValueError("random grid needs an rng")
            per_sub.append(random_points(spec, centers, std[j], rng))
    m = max(len(p) for p, _ in per_sub)
    points = np.zeros((oracle.t, m, len(dims)))
    weights = np.zeros((oracle.t, m))
    for j, (p, w) in enumerate(per_sub):
        points[j, : len(p)] = p
        points[j, len(p):] = oracle.desired[j, dims]
        weights[j, : len(w)] = w
    return Grid(points, weights)


# heatmap -------------------------------------------------------------------

def weighted_variances_tensor(x: Tensor, w: Tensor) -> Tensor:
    """``(t, d_sp)`` weighted variances of ``x (N, t, d_sp)`` under weights ``w (N,)``."""
    n = x.shape[0]
    wc = w.reshape(n, 1, 1)
    mean = (x * wc).sum(axis=0)
    centered = x - mean
    return (centered * centered * wc).sum(axis=0)


def heatmap_loss(x, w, oracle: OracleDensity, grid: Grid, lambda3: float,
                 h_min: float = 1e-12) -> Tensor:
    """Grid-weighted squared density error plus ``lambda3`` times the variance mismatch.

    ``x`` ``(N, t, d_sp)`` and normalized ``w`` ``(N,)`` may be tensors on a tape.
    """
    x, w = diff.as_tensor(x), diff.as_tensor(w)
    n, t, _ = x.shape
    d = oracle.d_h
    xh = x[:, :, list(oracle.dims)]
    h = diff.maximum(oracle.density_at(xh), h_min)  # (N, t)
    # sigma^2 = (N h (2 pi)^{d/2})^{-2/d}
    inv_two_s2 = (h * (float(n) * (2 * np.pi) ** (d / 2))) ** (2.0 / d) * 0.5
    xt = xh.swapaxes(0, 1)  # (t, N, d)
    delta = xt.reshape(t, 1, n, d) - grid.points.reshape(t, -1, 1, d)  # (t, M, N, d)
    d2 = (delta * delta).sum(axis=-1)
    amp = (h * w.reshape(n, 1) * float(n)).swapaxes(0, 1).reshape(t, 1, n)
    recon = (amp * diff.exp(d2 * -inv_two_s2.swapaxes(0, 1).reshape(t, 1, n))).sum(axis=-1)
    err = oracle.density(grid.points) - recon
    hm = (err * err * grid.weights).sum()
    if lambda3 == 0:
        return hm
    vdiff = oracle.variances - weighted_variances_tensor(x, w)
    return hm + diff.sqrt((vdiff * vdiff).sum(axis=-1)).sum() * lambda3


def reconstruct_marginals(pset: ParticleSet, kernels: KernelBank, oracle: OracleDensity,
                          points: np.ndarray) -> np.ndarray:
    """Plain-numpy reconstruction ``sum_i N w_i K_ji`` at ``points (t, M, d_h)``."""
    from .pf import reconstruct_pdf

    sub = ParticleSet(pset.particles[:, :, list(oracle.dims)], pset.weights, pset.normalized)
    return pset.n * reconstruct_pdf(sub, kernels, points)


# totals --------------------------------------------------------------------

@dataclass
class StepTerms:
    acc: Tensor | float
    hm: Tensor | float


def step_loss(x, w, oracle: OracleDensity, config: LossConfig,
              rng: np.random.Generator | None = None,
              grid: Grid | None = None) -> tuple[Tensor, StepTerms]:
    """Loss contribution of one time-step for one trajectory (corrected, normalized set).

    The grid is built around the current estimate unless one is given; either
    way it is a constant for differentiation.
    """
    x, w = diff.as_tensor(x), diff.as_tensor(w)
    est = (x * w.reshape(-1, 1, 1)).sum(axis=0)
    acc = ospa_tensor(oracle.desired, est, config.ospa_order) if config.lambda1 else Tensor(0.0)
    hm = Tensor(0.0)
    if config.lambda2:
        if grid is None:
            grid = build_grid(config.grid, oracle, est.value, rng)
        hm = heatmap_loss(x, w, oracle, grid, config.lambda3, config.h_min)
    return acc * config.lambda1 + hm * config.lambda2, StepTerms(acc, hm)


def total_loss(batch: list[list[StepTerms]], config: LossConfig):
    """Batch mean of ``(1/kappa) sum_k (l1 * acc_k + l2 * hm_k)`` over each window."""
    if not batch or any(len(steps) == 0 for steps in batch):
        raise ValueError("empty loss window")
    per_traj = []
    for steps in batch:
        s = 0.0
        for st in steps:
            s = s + st.acc * config.lambda1 + st.hm * config.lambda2
        per_traj.append(s * (1.0 / len(steps)))
    total = per_traj[0]
    for p in per_traj[1:]:
        total = total + p
    return total * (1.0 / len(per_traj))
