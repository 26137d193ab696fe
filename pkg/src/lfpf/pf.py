"""Particle-filter engine: proposals, weighting, resampling and estimates.

Every operation returns a new :class:`ParticleSet`; inputs are never mutated.
Weights are handled in log-space with max-subtraction before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .ssm import ScenarioModel, _sqrtm_psd, measurement_logpdf, motion_logpdf

NORMALIZED_TOL = 1e-12
WEIGHT_FLOOR = 1e-12
PSET_VERSION = "pset-v1"


class DegenerateSetError(RuntimeError):
    """All particle weights vanished."""


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ParticleSet:
    particles: np.ndarray  # (N, t, d_sp)
    weights: np.ndarray  # (N,)
    normalized: bool = False
    log_q: np.ndarray | None = None  # proposal log-density per particle, None for bootstrap

    def __post_init__(self):
        if self.particles.ndim != 3:
            raise ValueError(f"particles must be (N, t, d_sp), got {self.particles.shape}")
        if self.weights.shape != self.particles.shape[:1]:
            raise ValueError("weights must have one entry per particle")

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def t(self) -> int:
        return self.particles.shape[1]

    @property
    def d_sp(self) -> int:
        return self.particles.shape[2]

    @classmethod
    def point_mass(cls, state: np.ndarray, n: int) -> "ParticleSet":
        state = np.asarray(state, dtype=np.float64)
        return cls(np.broadcast_to(state, (n,) + state.shape).copy(), np.full(n, 1.0 / n), True)

    def permuted(self, order: np.ndarray) -> "ParticleSet":
        return ParticleSet(self.particles[order], self.weights[order], self.normalized,
                           None if self.log_q is None else self.log_q[order])

    def to_json(self) -> dict:
        return {"format": PSET_VERSION, "particles": self.particles.tolist(),
                "weights": self.weights.tolist(), "normalized": self.normalized}

    @classmethod
    def from_json(cls, d: dict) -> "ParticleSet":
        if d.get("format") != PSET_VERSION:
            raise ValueError(f"unsupported particle-set format {d.get('format')!r}")
        return cls(np.array(d["particles"], dtype=np.float64),
                   np.array(d["weights"], dtype=np.float64), bool(d["normalized"]))


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 25
    resample_threshold: float | None = None  # N_th in particles; None -> N/3
    resampling_scheme: str = "systematic"
    filter_kind: str = "sis"  # sis | bootstrap | aux
    lf_placement: str = "before_normalize"  # or "after_resample"

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.resampling_scheme not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.resampling_scheme!r}")
        if self.filter_kind not in ("sis", "bootstrap", "aux"):
            raise ValueError(f"unknown filter kind {self.filter_kind!r}")
        if self.lf_placement not in ("before_normalize", "after_resample"):
            raise ValueError(f"unknown LF placement {self.lf_placement!r}")
        if not 0 <= self.threshold <= self.n_particles:
            raise ValueError("resample threshold must lie in [0, N]")

    @property
    def threshold(self) -> float:
        if self.resample_threshold is None:
            return self.n_particles / 3.0
        return self.resample_threshold


class Corrector(Protocol):
    def apply(self, pset: ParticleSet) -> ParticleSet: ...


# proposals -----------------------------------------------------------------

def _sis_gaussian(model: ScenarioModel):
    key = "sis"
    if key not in model._cache:
        prec_v, _ = model._gauss("v")
        prec_e, _ = model._gauss("e")
        info = prec_v + model.C.T @ prec_e @ model.C
        cond = np.linalg.cond(info)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError(f"SIS proposal information matrix is singular (cond={cond:.3g})")
        cov = np.linalg.inv(info)
        cov = 0.5 * (cov + cov.T)
        chol = np.linalg.cholesky(cov)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        const = -0.5 * (model.d_sp * np.log(2 * np.pi) + logdet)
        model._cache[key] = (prec_v, model.C.T @ prec_e, cov, chol, info, const)
    return model._cache[key]


def sis_proposal_moments(model: ScenarioModel, prev_particles: np.ndarray, z: np.ndarray):
    """Mean ``(N, d_sp)`` and covariance of the Gaussian importance density."""
    prec_v, ct_prec_e, cov, *_ = _sis_gaussian(model)
    pred = model.predict_mean(prev_particles[:, 0, :])
    mean = (pred @ prec_v.T + ct_prec_e @ z) @ cov.T
    return mean, cov


def sis_propose(model: ScenarioModel, prev: ParticleSet, z: np.ndarray,
                rng: np.random.Generator) -> ParticleSet:
    """Draw from ``N(mu_i, Sigma)`` with Sigma^-1 = Sv^-1 + C^T Se^-1 C."""
    if model.is_radar:
        raise ValueError("SIS proposal is defined for the linear-measurement settings")
    _, _, _, chol, info, const = _sis_gaussian(model)
    mean, _ = sis_proposal_moments(model, prev.particles, z)
    eps = rng.standard_normal(mean.shape)
    x = mean + eps @ chol.T
    r = x - mean
    log_q = const - 0.5 * np.einsum("ni,ij,nj->n", r, info, r)
    return ParticleSet(x[:, None, :], prev.weights, False, log_q)


def bootstrap_propose(model: ScenarioModel, prev: ParticleSet,
                      rng: np.random.Generator) -> ParticleSet:
    """Sample from the assumed motion model; ``log_q`` is left empty so it cancels."""
    noise = rng.standard_normal(prev.particles.shape) @ _sqrtm_psd(model.sigma_v).T
    return ParticleSet(model.predict_mean(prev.particles) + noise, prev.weights, False, None)


# weights -------------------------------------------------------------------

def _exp_normalized(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateSetError("all particle weights underflowed")
    return np.exp(logw - top)


def weight_update(model: ScenarioModel, proposed: ParticleSet, prev: ParticleSet,
                  z: np.ndarray) -> ParticleSet:
    """``w_i <- pi(z|x_i) pi(x_i|x_i^prev) / q(x_i) * w_i^prev`` (unnormalized)."""
    with np.errstate(divide="ignore"):
        logw = np.log(prev.weights) + measurement_logpdf(model, proposed.particles, z)
    if proposed.log_q is not None:
        logw = logw + motion_logpdf(model, prev.particles, proposed.particles) - proposed.log_q
    return ParticleSet(proposed.particles, _exp_normalized(logw), False, proposed.log_q)


def normalize(pset: ParticleSet) -> ParticleSet:
    """Scale weights to sum to one; already-normalized weights are returned untouched."""
    w = pset.weights
    total = w.sum()
    if not np.isfinite(total) or total <= 0 or np.any(w < 0):
        raise DegenerateSetError(f"cannot normalize weights (sum={total})")
    if abs(total - 1.0) <= NORMALIZED_TOL:
        return replace(pset, normalized=True)
    return replace(pset, weights=w / total, normalized=True)


def effective_sample_size(pset: ParticleSet) -> float:
    if not pset.normalized:
        raise ValueError("effective_sample_size needs a normalized set")
    return float(1.0 / np.sum(pset.weights ** 2))


def resample_indices(weights: np.ndarray, scheme: str, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = max(cdf[-1], 1.0)
    if scheme == "systematic":
        u = (rng.random() + np.arange(n)) / n
    elif scheme == "multinomial":
        u = np.sort(rng.random(n))
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def resample(pset: ParticleSet, scheme: str, rng: np.random.Generator) -> ParticleSet:
    if not pset.normalized:
        raise ValueError("resample needs a normalized set")
    idx = resample_indices(pset.weights, scheme, rng)
    return ParticleSet(pset.particles[idx], np.full(pset.n, 1.0 / pset.n), True)


def estimate_state(pset: ParticleSet) -> np.ndarray:
    """Weighted mean ``(t, d_sp)``."""
    return np.einsum("n,ntd->td", pset.weights, pset.particles)


def reconstruct_pdf(pset: ParticleSet, kernels, query: np.ndarray) -> np.ndarray:
    """Per-sub-state kernel density ``sum_i w_i K_ji(u - x_ji)``.

    ``kernels`` carries ``heights`` and ``sigmas`` of shape ``(N, t)``;
    ``query`` is ``(t, M, d_sp)`` and the result is ``(t, M)``.
    """
    h, s = np.asarray(kernels.heights), np.asarray(kernels.sigmas)
    if h.shape != (pset.n, pset.t) or s.shape != h.shape:
        raise ValueError(f"kernel bank must be {(pset.n, pset.t)}, got {h.shape}")
    if query.ndim != 3 or query.shape[0] != pset.t or query.shape[2] != pset.d_sp:
        raise ValueError(f"query must be (t, M, d_sp), got {query.shape}")
    x = np.swapaxes(pset.particles, 0, 1)  # (t, N, d)
    d2 = ((query[:, :, None, :] - x[:, None, :, :]) ** 2).sum(-1)  # (t, M, N)
    hs, ss = h.T[:, None, :], s.T[:, None, :]
    return (pset.weights * hs * np.exp(-d2 / (2 * ss ** 2))).sum(-1)


def joint_pdf(pset: ParticleSet, kernels, states: np.ndarray) -> np.ndarray:
    """Product over sub-states of :func:`reconstruct_pdf` at full states ``(M, t, d_sp)``."""
    return reconstruct_pdf(pset, kernels, np.swapaxes(states, 0, 1)).prod(axis=0)


# iterations ----------------------------------------------------------------

def clamp_weights(corrected: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Floor corrected weights at ``min(original, 1e-12)``; an unchanged weight stays bit-identical."""
    return np.maximum(corrected, np.minimum(original, WEIGHT_FLOOR))


def apply_corrector(lf: Corrector, pset: ParticleSet) -> ParticleSet:
    out = lf.apply(pset)
    return ParticleSet(out.particles, clamp_weights(out.weights, pset.weights), False)


def finalize(pset: ParticleSet, config: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    """Normalize, then resample if ``N_eff < N_th``."""
    pset = normalize(pset)
    if effective_sample_size(pset) < config.threshold:
        pset = resample(pset, config.resampling_scheme, rng)
    return pset


def propagate(model: ScenarioModel, config: FilterConfig, prev: ParticleSet, z: np.ndarray,
              rng: np.random.Generator) -> ParticleSet:
    """Sampling and weighting stages of one iteration, returning a normalized set."""
    if config.filter_kind == "aux":
        return aux_propagate(model, config, prev, z, rng)
    if config.filter_kind == "sis":
        proposed = sis_propose(model, prev, z, rng)
    else:
        proposed = bootstrap_propose(model, prev, rng)
    return normalize(weight_update(model, proposed, prev, z))


def _step(model, config, prev, z, rng, lf):
    if not prev.normalized:
        raise ValueError("pf_step needs a normalized previous set")
    pset = propagate(model, config, prev, z, rng)
    if lf is not None and config.lf_placement == "before_normalize":
        pset = apply_corrector(lf, pset)
    pset = normalize(pset)
    posterior = pset
    if effective_sample_size(pset) < config.threshold:
        pset = resample(pset, config.resampling_scheme, rng)
    if lf is not None and config.lf_placement == "after_resample":
        pset = normalize(apply_corrector(lf, pset))
        posterior = pset
    return pset, posterior


def pf_step(model: ScenarioModel, config: FilterConfig, prev: ParticleSet, z: np.ndarray,
            rng: np.random.Generator, lf: Corrector | None = None) -> ParticleSet:
    """One iteration: propose, reweight, optional LF correction, normalize, resample."""
    return _step(model, config, prev, z, rng, lf)[0]


def aux_propagate(model: ScenarioModel, config: FilterConfig, prev: ParticleSet, z: np.ndarray,
                  rng: np.random.Generator) -> ParticleSet:
    """Auxiliary PF applied partition by partition (one partition per sub-state).

    For each sub-state: first-stage weights from the likelihood at the motion
    mean, resample that partition's ancestors, propagate through the motion
    model, and correct with the second-stage likelihood ratio. The weights are
    shared by all partitions.
    """
    if not model.is_radar:
        raise ValueError("the partitioned auxiliary PF is used for the radar settings")
    x = prev.particles.copy()
    n, t, d = x.shape
    root = _sqrtm_psd(model.sigma_v)
    with np.errstate(divide="ignore"):
        logw = np.log(prev.weights)
    for j in range(t):
        mu = model.predict_mean(x[:, j])
        guess = x.copy()
        guess[:, j] = mu
        first = _exp_normalized(logw + measurement_logpdf(model, guess, z))
        idx = resample_indices(first / first.sum(), config.resampling_scheme, rng)
        guess[:, j] = mu[idx]
        x[:, j] = mu[idx] + rng.standard_normal((n, d)) @ root.T
        logw = measurement_logpdf(model, x, z) - measurement_logpdf(model, guess, z)
    return normalize(ParticleSet(x, _exp_normalized(logw), False))


def aux_partitioned_step(model: ScenarioModel, config: FilterConfig, prev: ParticleSet,
                         z: np.ndarray, rng: np.random.Generator,
                         lf: Corrector | None = None) -> ParticleSet:
    return pf_step(model, replace(config, filter_kind="aux"), prev, z, rng, lf)


def run_filter(model: ScenarioModel, config: FilterConfig, measurements: np.ndarray,
               initial_state: np.ndarray, rng: np.random.Generator,
               lf: Corrector | None = None, keep_sets: bool = False):
    """Filter a whole trajectory; returns estimates ``(kappa, t, d_sp)`` (and sets).

    Estimates are taken from the normalized set before any resampling.
    """
    pset = ParticleSet.point_mass(initial_state, config.n_particles)
    estimates, sets = [], []
    for z in measurements:
        pset, posterior = _step(model, config, pset, z, rng, lf)
        estimates.append(estimate_state(posterior))
        if keep_sets:
            sets.append(posterior)
    est = np.stack(estimates)
    return (est, sets) if keep_sets else est


def default_filter_kind(model: ScenarioModel) -> str:
    return "aux" if model.is_radar else "sis"
