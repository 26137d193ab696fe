"""State-space scenarios: synthetic X1-X3 and radar-like Y1-Y3.

States are stored as arrays of shape ``(t, d_sp)``; particle tensors carry a
leading particle axis ``(N, t, d_sp)``. Every sub-state evolves independently
under ``x_j^k = phi(A x_j^{k-1}) + v_j^k``.

Synthetic settings use a fixed ``A``/``C`` pair and unit-norm base
covariances from ``data/synthetic_matrices.json``. The SNR scales both noise
covariances to spectral norm ``10**(-snr_db/10)``.

Radar settings use a 13x13 sensor grid. Each sensor reports
``amplitude * sum_j exp(-d_j^2 / (2 s^2))`` plus white Gaussian noise, where
``d_j`` is the distance from target ``j``. ``amplitude = noise_std * 10**(snr_db/20)``,
so SNR is the per-sensor peak SNR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

SYNTHETIC = ("X1", "X2", "X3")
RADAR = ("Y1", "Y2", "Y3")
FORMAT_VERSION = "ssm-v1"


class ConfigError(ValueError):
    """Invalid scenario or run configuration."""


def _load_matrices() -> dict:
    text = resources.files("lfpf").joinpath("data/synthetic_matrices.json").read_text()
    raw = json.loads(text)
    return {k: np.array(v) for k, v in raw.items() if k != "seed"}


def _check_cov(name: str, cov: np.ndarray, strict: bool) -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigError(f"{name} must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ConfigError(f"{name} is not symmetric")
    lo = np.linalg.eigvalsh(cov).min()
    if lo < -1e-12 or (strict and lo <= 0):
        raise ConfigError(f"{name} is not positive definite (min eigenvalue {lo:.3g})")


def _sqrtm_psd(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class RadarLayout:
    nominal: np.ndarray  # (M, 2) sensor positions the filter assumes
    actual: np.ndarray  # (M, 2) positions used to generate data
    psf_width: float
    noise_std: float
    amplitude: float
    spacing: float
    extent: float


@dataclass(frozen=True, eq=False)
class ScenarioModel:
    kind: str
    d_sp: int
    d_m: int
    t: int
    A: np.ndarray
    sigma_v: np.ndarray  # assumed motion noise covariance
    sigma_e: np.ndarray  # assumed measurement noise covariance
    snr_db: float
    phi: str = "identity"
    C: np.ndarray | None = None
    true_noise: str = "gaussian"
    true_sigma_v: np.ndarray | None = None
    true_sigma_e: np.ndarray | None = None
    uniform_halfwidth: float = 0.0
    radar: RadarLayout | None = None
    init_std: float = 1.0
    init_low: float = 30.0
    init_high: float = 90.0
    init_speed_std: float = 0.5
    rng_seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.phi not in ("identity", "abs"):
            raise ConfigError(f"unknown phi {self.phi!r}")
        if self.t < 1 or self.d_sp < 1 or self.d_m < 1:
            raise ConfigError("t, d_sp and d_m must be positive")
        if self.A.shape != (self.d_sp, self.d_sp):
            raise ConfigError(f"A must be {self.d_sp}x{self.d_sp}")
        _check_cov("sigma_v", self.sigma_v, strict=False)
        _check_cov("sigma_e", self.sigma_e, strict=False)
        if self.is_radar:
            if self.radar is None:
                raise ConfigError("radar scenario without sensor layout")
        else:
            if self.C is None or self.C.shape != (self.d_m, self.d_sp):
                raise ConfigError("synthetic scenario needs C of shape (d_m, d_sp)")
            if self.t != 1:
                raise ConfigError("synthetic settings track a single sub-state")

    @property
    def is_radar(self) -> bool:
        return self.kind in RADAR

    def with_targets(self, t: int) -> "ScenarioModel":
        if not self.is_radar and t != 1:
            raise ConfigError("synthetic settings track a single sub-state")
        return replace(self, t=t, _cache={})

    def phi_apply(self, x: np.ndarray) -> np.ndarray:
        return np.abs(x) if self.phi == "abs" else x

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        """``phi(A x)`` for every sub-state in ``x[..., d_sp]``."""
        return self.phi_apply(x @ self.A.T)

    def _gauss(self, name: str) -> tuple[np.ndarray, float]:
        if name not in self._cache:
            cov = self.sigma_v if name == "v" else self.sigma_e
            _check_cov(f"sigma_{name}", cov, strict=True)
            prec = np.linalg.inv(cov)
            _, logdet = np.linalg.slogdet(cov)
            self._cache[name] = (prec, -0.5 * (cov.shape[0] * np.log(2 * np.pi) + logdet))
        return self._cache[name]

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind, "d_sp": self.d_sp, "d_m": self.d_m, "t": self.t,
            "snr_db": self.snr_db, "phi": self.phi, "true_noise": self.true_noise,
            "rng_seed": self.rng_seed, "A": self.A.tolist(),
            "sigma_v": self.sigma_v.tolist(), "sigma_e_diag": np.diag(self.sigma_e).tolist(),
        }
        if self.C is not None:
            out["C"] = self.C.tolist()
        if self.radar is not None:
            out["radar"] = {
                "psf_width": self.radar.psf_width, "noise_std": self.radar.noise_std,
                "amplitude": self.radar.amplitude, "spacing": self.radar.spacing,
                "extent": self.radar.extent,
                "perturbation_rms": float(np.sqrt(np.mean((self.radar.actual - self.radar.nominal) ** 2))),
            }
        return out


def make_synthetic(kind: str = "X1", snr_db: float = 0.0, seed: int = 0) -> ScenarioModel:
    if kind not in SYNTHETIC:
        raise ConfigError(f"not a synthetic setting: {kind}")
    mats = _load_matrices()
    sigma2 = 10.0 ** (-snr_db / 10.0)
    d_sp, d_m = mats["C"].shape[1], mats["C"].shape[0]
    common = dict(kind=kind, d_sp=d_sp, d_m=d_m, t=1, A=mats["A"], C=mats["C"],
                  snr_db=snr_db, rng_seed=seed)
    if kind == "X3":
        return ScenarioModel(
            sigma_v=sigma2 * np.eye(d_sp), sigma_e=sigma2 * np.eye(d_m),
            true_noise="uniform", uniform_halfwidth=float(np.sqrt(3.0 * sigma2)), **common)
    return ScenarioModel(
        sigma_v=sigma2 * mats["sigma_v"], sigma_e=sigma2 * mats["sigma_e"],
        phi="abs" if kind == "X2" else "identity", **common)


def constant_velocity(q: float) -> tuple[np.ndarray, np.ndarray]:
    A = np.eye(4)
    A[0, 2] = A[1, 3] = 1.0
    Q = q * np.array([[1 / 3, 0, 1 / 2, 0],
                      [0, 1 / 3, 0, 1 / 2],
                      [1 / 2, 0, 1, 0],
                      [0, 1 / 2, 0, 1]])
    return A, Q


def make_radar(kind: str = "Y1", snr_db: float = 20.0, t: int | None = None, seed: int = 0,
               q: float = 0.01, spacing: float = 10.0, extent: float = 120.0,
               psf_width: float | None = None, noise_std: float = 1.0,
               perturb_std: float = 0.5) -> ScenarioModel:
    if kind not in RADAR:
        raise ConfigError(f"not a radar setting: {kind}")
    if t is None:
        t = 3 if kind == "Y3" else 1
    if kind in ("Y1", "Y2") and t != 1:
        raise ConfigError(f"{kind} is a single-target setting")
    axis = np.arange(0.0, extent + spacing / 2, spacing)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    nominal = np.stack([gx.ravel(), gy.ravel()], axis=1)
    actual = nominal.copy()
    if kind == "Y2":
        actual = nominal + perturb_std * np.random.default_rng([seed, 7]).standard_normal(nominal.shape)
    layout = RadarLayout(
        nominal=nominal, actual=actual, psf_width=spacing if psf_width is None else psf_width,
        noise_std=noise_std, amplitude=noise_std * 10.0 ** (snr_db / 20.0),
        spacing=spacing, extent=extent)
    A, Q = constant_velocity(q)
    m = nominal.shape[0]
    return ScenarioModel(kind=kind, d_sp=4, d_m=m, t=t, A=A, sigma_v=Q,
                         sigma_e=noise_std ** 2 * np.eye(m), snr_db=snr_db,
                         radar=layout, init_low=0.25 * extent, init_high=0.75 * extent,
                         rng_seed=seed)


def make_scenario(kind: str, snr_db: float | None = None, **kw) -> ScenarioModel:
    if kind in SYNTHETIC:
        return make_synthetic(kind, 0.0 if snr_db is None else snr_db, seed=kw.get("seed", 0))
    if kind in RADAR:
        return make_radar(kind, 20.0 if snr_db is None else snr_db, **kw)
    raise ConfigError(f"unknown scenario kind {kind!r}")


# densities -----------------------------------------------------------------

def _check_state(model: ScenarioModel, x: np.ndarray, name: str) -> None:
    if x.shape[-1] != model.d_sp or x.ndim < 2:
        raise ValueError(f"{name} must end in (t, {model.d_sp}), got {x.shape}")


def motion_logpdf(model: ScenarioModel, x_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Assumed-model ``log p(x | x_prev)``, summed over sub-states.

    Accepts ``(..., t, d_sp)`` arrays and returns shape ``(...)``.
    """
    _check_state(model, x_prev, "x_prev")
    _check_state(model, x, "x")
    if x.shape[-2:] != x_prev.shape[-2:]:
        raise ValueError(f"state shapes differ: {x_prev.shape} vs {x.shape}")
    prec, const = model._gauss("v")
    r = x - model.predict_mean(x_prev)
    per_sub = const - 0.5 * np.einsum("...i,ij,...j->...", r, prec, r)
    return per_sub.sum(axis=-1)


def _canonical_order(pos: np.ndarray) -> np.ndarray:
    """Sort targets by (x, y) so sums over targets do not depend on their labels."""
    order = np.lexsort((pos[..., 1], pos[..., 0]), axis=-1)
    return np.take_along_axis(pos, order[..., None], axis=-2)


def radar_sensor_response(model: ScenarioModel, x: np.ndarray, actual: bool = False) -> np.ndarray:
    """Noiseless sensor array output for states ``x[..., t, d_sp]`` -> ``(..., d_m)``."""
    if not model.is_radar:
        raise ConfigError("radar_sensor_response needs a radar scenario")
    _check_state(model, x, "x")
    lay = model.radar
    sensors = lay.actual if actual else lay.nominal
    pos = _canonical_order(np.asarray(x, dtype=np.float64)[..., :2])
    d2 = ((pos[..., :, None, :] - sensors) ** 2).sum(axis=-1)  # (..., t, M)
    bumps = np.exp(-d2 / (2.0 * lay.psf_width ** 2))
    out = np.zeros(bumps.shape[:-2] + bumps.shape[-1:])
    for j in range(bumps.shape[-2]):
        out = out + bumps[..., j, :]
    return lay.amplitude * out


def measurement_mean(model: ScenarioModel, x: np.ndarray, actual: bool = False) -> np.ndarray:
    if model.is_radar:
        return radar_sensor_response(model, x, actual=actual)
    _check_state(model, x, "x")
    return x[..., 0, :] @ model.C.T


def measurement_logpdf(model: ScenarioModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Assumed-model ``log p(z | x)`` for ``x[..., t, d_sp]`` -> shape ``(...)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.d_m,):
        raise ValueError(f"measurement must have shape ({model.d_m},), got {z.shape}")
    r = z - measurement_mean(model, x)
    if model.is_radar:
        s2 = model.radar.noise_std ** 2
        return -0.5 * (r * r).sum(axis=-1) / s2 - 0.5 * model.d_m * np.log(2 * np.pi * s2)
    prec, const = model._gauss("e")
    return const - 0.5 * np.einsum("...i,ij,...j->...", r, prec, r)


# simulation ----------------------------------------------------------------

@dataclass(eq=False)
class TrajectoryRecord:
    measurements: np.ndarray  # (kappa, d_m)
    initial_state: np.ndarray  # (t, d_sp)
    true_states: np.ndarray | None  # (kappa, t, d_sp)
    scenario_id: str
    snr_db: float

    def __post_init__(self):
        if self.true_states is not None and len(self.true_states) != len(self.measurements):
            raise ValueError("true_states and measurements differ in length")

    @property
    def kappa(self) -> int:
        return len(self.measurements)

    @property
    def t(self) -> int:
        return self.initial_state.shape[0]

    def unsupervised(self) -> "TrajectoryRecord":
        return replace(self, true_states=None)

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id, "snr_db": self.snr_db,
            "initial_state": self.initial_state.tolist(),
            "measurements": self.measurements.tolist(),
            "true_states": None if self.true_states is None else self.true_states.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryRecord":
        ts = d.get("true_states")
        return cls(measurements=np.array(d["measurements"], dtype=np.float64),
                   initial_state=np.array(d["initial_state"], dtype=np.float64),
                   true_states=None if ts is None else np.array(ts, dtype=np.float64),
                   scenario_id=d["scenario_id"], snr_db=float(d["snr_db"]))


def sample_motion_noise(model: ScenarioModel, rng: np.random.Generator, size: tuple) -> np.ndarray:
    """True-model process noise of shape ``size + (d_sp,)``."""
    if model.true_noise == "uniform":
        h = model.uniform_halfwidth
        return rng.uniform(-h, h, size=size + (model.d_sp,))
    cov = model.sigma_v if model.true_sigma_v is None else model.true_sigma_v
    return rng.standard_normal(size + (model.d_sp,)) @ _sqrtm_psd(cov).T


def sample_measurement_noise(model: ScenarioModel, rng: np.random.Generator) -> np.ndarray:
    if model.true_noise == "uniform":
        h = model.uniform_halfwidth
        return rng.uniform(-h, h, size=model.d_m)
    if model.is_radar:
        return model.radar.noise_std * rng.standard_normal(model.d_m)
    cov = model.sigma_e if model.true_sigma_e is None else model.true_sigma_e
    return _sqrtm_psd(cov) @ rng.standard_normal(model.d_m)


def sample_initial_substate(model: ScenarioModel, rng: np.random.Generator) -> np.ndarray:
    if model.is_radar:
        pos = rng.uniform(model.init_low, model.init_high, size=2)
        vel = model.init_speed_std * rng.standard_normal(2)
        return np.concatenate([pos, vel])
    return model.init_std * rng.standard_normal(model.d_sp)


def simulate_substate(model: ScenarioModel, kappa: int, seed: int, index: int = 0,
                      x0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One sub-state's ``(x^0, x^{1:kappa})`` from its own RNG stream ``(seed, index)``."""
    rng = np.random.default_rng([seed, 0, index])
    start = sample_initial_substate(model, rng) if x0 is None else np.asarray(x0, dtype=np.float64)
    noise = sample_motion_noise(model, rng, (kappa,))
    states = np.empty((kappa, model.d_sp))
    x = start
    for k in range(kappa):
        x = model.phi_apply(model.A @ x) + noise[k]
        states[k] = x
    return start, states


def generate_trajectory(model: ScenarioModel, kappa: int, seed: int,
                        x0: np.ndarray | None = None) -> TrajectoryRecord:
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    starts, paths = [], []
    for j in range(model.t):
        s, p = simulate_substate(model, kappa, seed, j, None if x0 is None else x0[j])
        starts.append(s)
        paths.append(p)
    states = np.stack(paths, axis=1)  # (kappa, t, d_sp)
    rng = np.random.default_rng([seed, 1])
    z = np.empty((kappa, model.d_m))
    for k in range(kappa):
        z[k] = measurement_mean(model, states[k], actual=True) + sample_measurement_noise(model, rng)
    return TrajectoryRecord(measurements=z, initial_state=np.stack(starts), true_states=states,
                            scenario_id=model.kind, snr_db=model.snr_db)


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(model: ScenarioModel, n: int, kappa: int, seed: int,
                     targets: list[int] | None = None,
                     target_probs: list[float] | None = None) -> list[TrajectoryRecord]:
    """``n`` records; record ``i`` depends only on ``(seed, i)``.

    ``targets``/``target_probs`` mix target counts for radar curricula.
    """
    out = []
    for i in range(n):
        s = record_seed(seed, i)
        m = model
        if targets:
            t = int(np.random.default_rng([s, 3]).choice(targets, p=target_probs))
            m = model.with_targets(t)
        out.append(generate_trajectory(m, kappa, s))
    return out


def write_jsonl(path, records: list[TrajectoryRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_jsonl(path) -> list[TrajectoryRecord]:
    with open(path) as fh:
        return [TrajectoryRecord.from_json(json.loads(line)) for line in fh if line.strip()]
