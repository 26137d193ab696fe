"""Teacher-student training of the LF module, one SGD update per time-step.

A batch of trajectories is filtered in lockstep by the LF-augmented student
PF and by a reference PF with more particles. At each time-step inside the
loss window, a random sub-batch of the still-active trajectories is scored
against oracles built from the reference sets (O1) or from the true states
(O2). Gradients only reach the parameters through that time-step's LF
application. Particle sets carried between steps are plain arrays, so no
gradient crosses time-steps or sampling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diff
from .diff import Tape, Tensor
from .lf import LfModule
from .loss import LossConfig, build_oracle, ospa, ospa_assignment, step_loss
from .pf import (DegenerateSetError, FilterConfig, NumericalError, ParticleSet, WEIGHT_FLOOR, _step,
                 apply_corrector, estimate_state, normalize, propagate)
from .ssm import ScenarioModel, TrajectoryRecord

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "time_step", "batch", "L_acc", "L_hm", "total")
STATE_VERSION = "train-state-v1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 50
    sub_batch_size: int | None = None  # None -> batch_size // 10
    stray_threshold: float | None = None  # None -> 5x the oracle's mean sub-state std
    student_n: int = 25
    teacher_n: int = 300
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    window: tuple[int, int] | None = None  # 1-based inclusive time-steps that enter the loss
    keep_best: str = "mean"  # "mean" or "step:<k>"
    momentum: float = 0.0
    resample_threshold: float | None = None  # student N_th; None -> N/3
    resampling_scheme: str = "systematic"
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.sub_batch > self.batch_size:
            raise ValueError("sub_batch_size must not exceed batch_size")
        if self.stray_threshold is not None and self.stray_threshold <= 0:
            raise ValueError("stray threshold must be positive")
        if self.teacher_n < self.student_n:
            raise ValueError("teacher must use at least as many particles as the student")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def sub_batch(self) -> int:
        return self.sub_batch_size or max(1, self.batch_size // 10)

    def in_window(self, k: int) -> bool:
        return self.window is None or self.window[0] <= k <= self.window[1]

    def window_length(self, kappa: int) -> int:
        if self.window is None:
            return kappa
        return max(0, min(self.window[1], kappa) - self.window[0] + 1)


@dataclass
class TrainResult:
    module: LfModule
    metrics: list[dict]
    validation: list[dict]
    best_value: float
    trace: list[dict] = field(default_factory=list)  # active / sub-batch members per update


def student_filter(model: ScenarioModel, cfg: TrainConfig, kind: str) -> FilterConfig:
    return FilterConfig(cfg.student_n, cfg.resample_threshold, cfg.resampling_scheme, kind)


def teacher_filter(model: ScenarioModel, cfg: TrainConfig, kind: str) -> FilterConfig:
    return FilterConfig(cfg.teacher_n, None, cfg.resampling_scheme, kind)


def _kind(model: ScenarioModel) -> str:
    return "aux" if model.is_radar else "sis"


# rollouts ------------------------------------------------------------------

def rollout_pair(module: LfModule | None, model: ScenarioModel, record: TrajectoryRecord,
                 student: FilterConfig, teacher: FilterConfig,
                 student_rng: np.random.Generator, teacher_rng: np.random.Generator) -> list[dict]:
    """Run the LF-augmented student and the plain reference filter side by side."""
    s = ParticleSet.point_mass(record.initial_state, student.n_particles)
    r = ParticleSet.point_mass(record.initial_state, teacher.n_particles)
    out = []
    for z in record.measurements:
        s, s_post = _step(model, student, s, z, student_rng, module)
        r, r_post = _step(model, teacher, r, z, teacher_rng, None)
        out.append({"student": s_post, "teacher": r_post,
                    "student_estimate": estimate_state(s_post),
                    "teacher_estimate": estimate_state(r_post)})
    return out


def eliminate_strayed(active: np.ndarray, estimates: dict[int, np.ndarray],
                      desired: dict[int, np.ndarray], zeta) -> np.ndarray:
    """Deactivate trajectories with any sub-state at distance >= zeta from its match.

    ``zeta`` is a scalar or a per-trajectory mapping.
    """
    out = active.copy()
    for b in np.flatnonzero(active):
        thr = zeta[b] if isinstance(zeta, dict) else zeta
        if not np.isfinite(thr):
            continue
        est, want = estimates[b], desired[b]
        perm = ospa_assignment(est, want)
        dist = np.sqrt(((est - want[perm]) ** 2).sum(-1))
        if np.any(dist >= thr):
            out[b] = False
    return out


# training ------------------------------------------------------------------

def _clamped_normalized(x0: np.ndarray, w0: np.ndarray, dx: Tensor, dw: Tensor):
    x = dx + x0
    w = diff.maximum(dw + w0, np.minimum(w0, WEIGHT_FLOOR))
    return x, w / w.sum()


def _sgd(module: LfModule, lr: float, momentum: float, velocity: dict, clip: float | None) -> float:
    sq = sum(float((p.grad ** 2).sum()) for p in module.params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient")
    scale = 1.0 if clip is None or norm <= clip else clip / norm
    for name, p in module.params.items():
        if p.grad is None:
            continue
        g = p.grad * scale
        if momentum:
            velocity[name] = momentum * velocity.get(name, 0.0) + g
            g = velocity[name]
        p.value -= lr * g
        p.grad = None
    return norm


def train_step(module: LfModule, pre: list[ParticleSet], oracles: list, loss_cfg: LossConfig,
               window_len: int, rng: np.random.Generator,
               denom: int | None = None) -> tuple[Tape, Tensor, list]:
    """Record one time-step's sub-batch loss on a fresh tape (no update).

    The loss is divided by ``denom`` (default: the number of sets) and by the
    window length, so summing over groups of a sub-batch gives its mean.
    """
    x0 = np.stack([p.particles for p in pre])
    w0 = np.stack([p.weights for p in pre])
    with Tape() as tape:
        dx, dw = module.forward(x0, w0)
        total, terms = None, []
        for b in range(len(pre)):
            x, w = _clamped_normalized(x0[b], w0[b], dx[b], dw[b])
            lb, tb = step_loss(x, w, oracles[b], loss_cfg, rng)
            total = lb if total is None else total + lb
            terms.append(tb)
        total = total * (1.0 / ((denom or len(pre)) * window_len))
    return tape, total, terms


def validate(module: LfModule | None, model: ScenarioModel, records: list[TrajectoryRecord],
             fcfg: FilterConfig, seed: int, cutoff: float = np.inf, criterion: str = "mean") -> float:
    vals = []
    for i, rec in enumerate(records):
        per_step = evaluate_record(module, model, rec, fcfg, np.random.default_rng([seed, i]), cutoff)
        if criterion == "mean":
            vals.append(per_step.mean())
        else:
            vals.append(per_step[int(criterion.split(":")[1]) - 1])
    return float(np.mean(vals))


def evaluate_record(module: LfModule | None, model: ScenarioModel, rec: TrajectoryRecord,
                    fcfg: FilterConfig, rng: np.random.Generator, cutoff: float = np.inf,
                    dims: tuple[int, ...] | None = None) -> np.ndarray:
    """Per-step OSPA against the true states, assignment redone at every step."""
    from .pf import run_filter

    m = model.with_targets(rec.t) if rec.t != model.t else model
    est = run_filter(m, fcfg, rec.measurements, rec.initial_state, rng, lf=module)
    sel = slice(None) if dims is None else list(dims)
    return np.array([ospa(e[:, sel], s[:, sel], 2.0, cutoff) for e, s in zip(est, rec.true_states)])


def train(dataset: list[TrajectoryRecord], model: ScenarioModel, cfg: TrainConfig,
          module: LfModule, val_records: list[TrajectoryRecord] | None = None,
          out_dir: str | Path | None = None, resume: bool = False) -> TrainResult:
    kind = _kind(model)
    scfg, tcfg = student_filter(model, cfg, kind), teacher_filter(model, cfg, kind)
    loss_cfg = cfg.loss
    if loss_cfg.oracle_mode == "O2" and any(r.true_states is None for r in dataset):
        raise TrainingError("O2 oracle needs supervised records")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics, validation = [], []
    velocity: dict = {}
    best = module.copy()
    best_value = math.inf
    start_epoch = 0
    trace: list[dict] = []
    resumed = False
    if resume and out_dir and (out_dir / "train-state.json").exists():
        state = json.loads((out_dir / "train-state.json").read_text())
        if state.get("format") != STATE_VERSION:
            raise TrainingError(f"unknown training-state format {state.get('format')!r}")
        module = LfModule.load(out_dir / state["last_checkpoint"])
        best = LfModule.load(out_dir / state["best_checkpoint"])
        best_value, start_epoch = float(state["best_value"]), state["epoch"]
        validation = state.get("validation", [])
        metrics = _read_metrics(out_dir / "metrics.csv")
        if (out_dir / "velocity.npz").exists():
            with np.load(out_dir / "velocity.npz") as vz:
                velocity = {k: vz[k] for k in vz.files}
        resumed = True
    last_good = module.copy()

    if val_records and not resumed:
        best_value = min(best_value, validate(module, model, val_records, scfg, cfg.seed + 1,
                                              criterion=cfg.keep_best))
        validation.append({"epoch": start_epoch, "value": best_value})

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        for q, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo: lo + cfg.batch_size]
            _run_batch(module, model, cfg, scfg, tcfg, [dataset[i] for i in idx], epoch, q,
                       metrics, velocity, last_good, trace)
            last_good = module.copy()
        if val_records:
            value = validate(module, model, val_records, scfg, cfg.seed + 1, criterion=cfg.keep_best)
            validation.append({"epoch": epoch, "value": value})
            log.info("epoch %d validation %.5f", epoch, value)
            if value < best_value:
                best_value, best = value, module.copy()
                best.metadata.update(epoch=epoch, criterion=cfg.keep_best, value=value)
        else:
            best = module.copy()
        if out_dir:
            _write_outputs(out_dir, module, best, best_value, epoch, metrics, model, cfg,
                           validation, velocity)
    if not val_records:
        best_value = math.nan
    best.metadata.update(scenario=model.kind, snr_db=model.snr_db, N=cfg.student_n,
                         teacher_n=cfg.teacher_n)
    return TrainResult(best, metrics, validation, best_value, trace)


def _run_batch(module, model, cfg, scfg, tcfg, records, epoch, q, metrics, velocity, last_good,
               trace):
    nb = len(records)
    ms = [model.with_targets(r.t) if r.t != model.t else model for r in records]
    s_sets = [ParticleSet.point_mass(r.initial_state, scfg.n_particles) for r in records]
    t_sets = [ParticleSet.point_mass(r.initial_state, tcfg.n_particles) for r in records]
    s_rngs = [np.random.default_rng([cfg.seed, epoch, q, b, 0]) for b in range(nb)]
    t_rngs = [np.random.default_rng([cfg.seed, epoch, q, b, 1]) for b in range(nb)]
    batch_rng = np.random.default_rng([cfg.seed, epoch, q, 2])
    active = np.ones(nb, dtype=bool)
    kappa = min(r.kappa for r in records)
    wlen = cfg.window_length(kappa)
    loss_cfg = cfg.loss
    for k in range(1, kappa + 1):
        live = np.flatnonzero(active)
        if len(live) == 0:
            log.warning("epoch %d batch %d: every trajectory strayed by step %d", epoch, q, k)
            return
        pre, t_post = {}, {}
        for b in live:
            z = records[b].measurements[k - 1]
            pre[b] = propagate(ms[b], scfg, s_sets[b], z, s_rngs[b])
            t_sets[b], t_post[b] = _step(ms[b], tcfg, t_sets[b], z, t_rngs[b], None)
        oracles = {}
        for b in live:
            truth = None if records[b].true_states is None else records[b].true_states[k - 1]
            oracles[b] = build_oracle(loss_cfg.oracle_mode, loss_cfg, t_post[b], truth)
        # corrected sets use the parameters from before this step's update
        try:
            corrected = {b: normalize(apply_corrector(module, pre[b])) for b in live}
        except (DegenerateSetError, NumericalError, FloatingPointError) as exc:
            _restore(module, last_good)
            raise TrainingError(f"degenerate corrected set at epoch {epoch} batch {q} step {k}") from exc
        if cfg.in_window(k) and wlen > 0:
            size = min(cfg.sub_batch, len(live))
            sub = np.sort(batch_rng.choice(live, size=size, replace=False))
            groups: dict[int, list[int]] = {}
            for b in sub:
                groups.setdefault(records[b].t, []).append(b)
            acc = hm = tot = 0.0
            for members in groups.values():
                tape, total, terms = train_step(module, [pre[b] for b in members],
                                                [oracles[b] for b in members], loss_cfg, wlen,
                                                batch_rng, denom=len(sub))
                if not np.isfinite(total.value):
                    _restore(module, last_good)
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {q} step {k}")
                diff.backward(tape, total)
                acc += sum(float(getattr(t.acc, "value", t.acc)) for t in terms) / len(sub)
                hm += sum(float(getattr(t.hm, "value", t.hm)) for t in terms) / len(sub)
                tot += float(total.value)
            _sgd(module, cfg.learning_rate, cfg.momentum, velocity, cfg.grad_clip)
            metrics.append({"epoch": epoch, "time_step": k, "batch": q,
                            "L_acc": acc, "L_hm": hm, "total": tot})
            trace.append({"epoch": epoch, "batch": q, "time_step": k,
                          "active": live.tolist(), "sub": sub.tolist()})
        estimates, desired, zeta = {}, {}, {}
        for b in live:
            s_sets[b] = corrected[b]
            estimates[b] = estimate_state(corrected[b])
            desired[b] = oracles[b].desired
            zeta[b] = (cfg.stray_threshold if cfg.stray_threshold is not None
                       else 5.0 * float(np.mean(oracles[b].std)))
            s_sets[b] = _resample_if_needed(s_sets[b], scfg, s_rngs[b])
        active = eliminate_strayed(active, estimates, desired, zeta)


def _restore(module: LfModule, good: LfModule) -> None:
    for name, p in good.params.items():
        module.params[name].value[...] = p.value


def _resample_if_needed(pset: ParticleSet, fcfg: FilterConfig, rng) -> ParticleSet:
    from .pf import effective_sample_size, resample

    if effective_sample_size(pset) < fcfg.threshold:
        return resample(pset, fcfg.resampling_scheme, rng)
    return pset


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "time_step", "batch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _write_outputs(out_dir: Path, module, best, best_value, epoch, metrics, model, cfg,
                   validation, velocity):
    module.save(out_dir / "last.ckpt.json")
    best.metadata.update(scenario=model.kind, snr_db=model.snr_db, N=cfg.student_n,
                         teacher_n=cfg.teacher_n)
    best.save(out_dir / "best.ckpt.json")
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(metrics)
    if velocity:
        np.savez(out_dir / "velocity.npz", **{k: np.asarray(v) for k, v in velocity.items()})
    # every RNG stream is keyed by (seed, epoch, batch, ...), so the epoch fixes them all
    state = {"format": STATE_VERSION, "epoch": epoch, "best_value": _jsonable(best_value),
             "validation": validation, "rng": {"seed": cfg.seed, "next_epoch": epoch + 1},
             "last_checkpoint": "last.ckpt.json", "best_checkpoint": "best.ckpt.json",
             "config": _jsonable(asdict(cfg))}
    (out_dir / "train-state.json").write_text(json.dumps(state, indent=1))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj
