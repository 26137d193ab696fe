"""Command line entry point: ``lfpf generate|train|eval|bench|inspect``.

Every subcommand takes ``--config run.json`` plus any number of
``--set section.key=value`` overrides, and copies the resolved config into
its output directory. Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .lf import LfModule, fpm_count
from .pf import DegenerateSetError, FilterConfig, NumericalError, ParticleSet, pf_step
from .ssm import FORMAT_VERSION, ConfigError, generate_dataset, read_jsonl, write_jsonl
from .train import TrainingError, evaluate_record, train

log = logging.getLogger("lfpf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SPLITS = (("train", "n_train", 0), ("val", "n_val", 1), ("test", "n_test", 2))


def _out_dir(path: str, cfg: cfgmod.RunConfig) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1))
    return out


def _load_checkpoint(path: str) -> LfModule:
    try:
        return LfModule.load(path)
    except (ValueError, TypeError) as exc:  # bad JSON, unknown format, malformed tensors
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_module(module: LfModule | None, model) -> None:
    if module is not None and module.d_sp != model.d_sp:
        raise ConfigError(f"checkpoint expects d_sp={module.d_sp}, scenario {model.kind} has {model.d_sp}")


def _filter(cfg: cfgmod.RunConfig, model, n: int | None = None) -> FilterConfig:
    f = cfg.filter
    if model.is_radar and f.filter_kind == "sis":
        f = replace(f, filter_kind="aux")
    if n is not None:
        thr = None if f.resample_threshold is None else f.resample_threshold * n / f.n_particles
        f = replace(f, n_particles=n, resample_threshold=thr)
    return f


# subcommands ---------------------------------------------------------------

def cmd_generate(args, cfg: cfgmod.RunConfig) -> int:
    out = _out_dir(args.out, cfg)
    model = cfg.scenario.build()
    d = cfg.data
    counts = {}
    for name, attr, offset in SPLITS:
        n = getattr(d, attr)
        recs = generate_dataset(model, n, d.kappa, d.seed * 10 + offset,
                                list(d.targets) if d.targets else None,
                                list(d.target_probs) if d.target_probs else None)
        write_jsonl(out / f"{name}.jsonl", recs)
        counts[name] = n
    manifest = {"format": FORMAT_VERSION, "scenario": model.to_dict(), "counts": counts,
                "kappa": d.kappa, "seed": d.seed,
                "splits": {name: f"{name}.jsonl" for name, _, _ in SPLITS}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {sum(counts.values())} trajectories to {out}")
    return EXIT_OK


def _read_split(data_dir: Path, split: str):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {manifest.get('format')!r}")
    return read_jsonl(data_dir / manifest["splits"][split])


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    out = _out_dir(args.out, cfg)
    model = cfg.scenario.build()
    data_dir = Path(args.data)
    dataset = _read_split(data_dir, "train")
    if cfg.train.loss.oracle_mode == "O1":
        dataset = [r.unsupervised() for r in dataset]
    val = _read_split(data_dir, "val")
    tc = cfg.train
    if model.is_radar and tc.loss.dims is None:
        tc = replace(tc, loss=replace(tc.loss, dims=(0, 1)))
    tc = replace(tc, student_n=cfg.filter.n_particles, resampling_scheme=cfg.filter.resampling_scheme,
                 resample_threshold=cfg.filter.resample_threshold)
    if args.init:
        module = _load_checkpoint(args.init)
        _check_module(module, model)
    else:
        module = LfModule(cfg.lf, model.d_sp, np.random.default_rng(tc.seed))
    t0 = time.perf_counter()
    result = train(dataset, model, tc, module, val, out_dir=out, resume=args.resume)
    print(f"trained {tc.epochs} epochs in {time.perf_counter() - t0:.1f}s; "
          f"best validation OSPA {result.best_value:.5f}")
    return EXIT_OK


def _records_for(cfg, model, snr, t, data_dir):
    if data_dir is not None:
        return _read_split(Path(data_dir), "test")
    e = cfg.eval
    return generate_dataset(model, e.n_trajectories, e.kappa, e.seed * 1000 + int(round(10 * snr)) + t)


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    out = _out_dir(args.out, cfg)
    e = cfg.eval
    module = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    snrs = e.snr_values or (cfg.scenario.snr_db,)
    ts = e.t_values or (cfg.scenario.t or 1,)
    filters = ([("plain", None)] if e.include_plain or module is None else []) + \
        ([("lf", module)] if module is not None else [])
    rows, summary = [], []
    for snr in snrs:
        for t in ts:
            model = cfg.scenario.build(snr, t)
            _check_module(module, model)
            records = _records_for(cfg, model, snr, t, args.data)
            dims = (0, 1) if model.is_radar else None
            for n in e.n_values:
                fc = _filter(cfg, model, n)
                for name, mod in filters:
                    vals = []
                    for i, rec in enumerate(records):
                        rng = np.random.default_rng([e.seed, i])
                        per_step = evaluate_record(mod, model, rec, fc, rng, e.cutoff, dims)
                        vals.append(float(per_step.mean()))
                        rows.append({"filter": name, "N": n, "snr_db": snr, "t": t, "repetition": i,
                                     "ospa": vals[-1]})
                    summary.append({"filter": name, "N": n, "snr_db": snr, "t": t,
                                    "mean_ospa": float(np.mean(vals)), "std_ospa": float(np.std(vals)),
                                    "count": len(vals)})
                    print(f"{name:5s} N={n:<4d} snr={snr:<6g} t={t} mean OSPA {np.mean(vals):.5f} "
                          f"(std {np.std(vals):.5f})")
    _write_csv(out / "eval.csv", rows)
    _write_csv(out / "eval_summary.csv", summary)
    return EXIT_OK


def cmd_bench(args, cfg: cfgmod.RunConfig) -> int:
    out = _out_dir(args.out, cfg)
    b = cfg.bench
    module = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    if module is None:
        module = LfModule(cfg.lf, cfg.scenario.build().d_sp, np.random.default_rng(0))
    rows = []
    for t in b.t_values or (cfg.scenario.t or 1,):
        model = cfg.scenario.build(t=t)
        _check_module(module, model)
        rec = generate_dataset(model, 1, b.warmup + b.steps, b.seed)[0]
        for n in b.n_values:
            fc = _filter(cfg, model, n)
            for name, mod in (("plain", None), ("lf", module)):
                times = bench_steps(model, fc, rec, mod, b.warmup, np.random.default_rng(b.seed))
                fpm = fpm_count(module.hyper, model.d_sp, t, n)
                rows.append({"filter": name, "N": n, "t": t, "median_ms": 1e3 * float(np.median(times)),
                             "steps": len(times), "fpm_lf_per_particle": fpm["total"] if name == "lf" else 0,
                             "fpm_emb": fpm["emb"], "fpm_sa": fpm["sa"], "fpm_final": fpm["final"]})
                print(f"{name:5s} N={n:<4d} t={t} median step {rows[-1]['median_ms']:.3f} ms")
    _write_csv(out / "bench.csv", rows)
    return EXIT_OK


def bench_steps(model, fc: FilterConfig, rec, module, warmup: int, rng) -> np.ndarray:
    """Wall-clock seconds of each step after ``warmup`` untimed steps."""
    pset = ParticleSet.point_mass(rec.initial_state, fc.n_particles)
    times = []
    for k, z in enumerate(rec.measurements):
        t0 = time.perf_counter()
        pset = pf_step(model, fc, pset, z, rng, module)
        if k >= warmup:
            times.append(time.perf_counter() - t0)
    return np.array(times)


def cmd_inspect(args, cfg: cfgmod.RunConfig) -> int:
    module = _load_checkpoint(args.checkpoint)
    print(json.dumps({"hyperparams": cfgmod._jsonable(vars(module.hyper)), "d_sp": module.d_sp,
                      "n_parameters": module.n_parameters(), "metadata": module.metadata}, indent=1))
    for name, p in module.params.items():
        print(f"{name:24s} {str(p.shape):14s} l2={np.linalg.norm(p.value):.6g}")
    return EXIT_OK


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfpf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=3")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("generate", help="simulate train/val/test trajectories")
    common(sp)
    sp = sub.add_parser("train", help="train an LF module")
    common(sp)
    sp.add_argument("--data", required=True, help="directory written by generate")
    sp.add_argument("--init", help="start from this checkpoint")
    sp.add_argument("--resume", action="store_true", help="continue from --out's training state")
    sp = sub.add_parser("eval", help="OSPA sweep over (N, SNR, t) cells")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="use this dataset's test split instead of simulating")
    sp = sub.add_parser("bench", help="per-step latency of plain and LF filters")
    common(sp)
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("inspect", help="print a checkpoint's hyperparameters and norms")
    common(sp, out=False)
    sp.add_argument("checkpoint")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, DegenerateSetError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
