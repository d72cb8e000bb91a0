"""``infodesign`` command line: mi-sweep, boed and diagnose.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  The
output root is ``$INFODESIGN_OUT`` when set, otherwise the config's
``out_dir``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, parse_config, to_dict
from .designopt import RunRecord, run_sbi_boed
from .experiments import sweep_cell
from .flow import load_checkpoint, save_checkpoint
from .inference import (eig_report, read_posterior_csv, sbc_coverage, split_rhat, surrogate_posterior,
                        write_coverage_csv, write_posterior_csv)
from .sim import make_simulator, stream

log = logging.getLogger("infodesign")

MANIFEST = "run_manifest.json"
METRICS = "metrics.csv"
POSTERIOR = "posterior_samples.csv"
COVERAGE = "coverage.csv"


class MissingArtifacts(RuntimeError):
    pass


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get("INFODESIGN_OUT") or cfg.out_dir)


def _run_dir(cfg: RunConfig, command: str, seed: int) -> Path:
    name = cfg.name or f"{cfg.task}-{command}"
    return output_root(cfg) / name / f"seed{seed}"


def _read_config(path) -> RunConfig:
    """A config file, or a run manifest (which embeds its config)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        raw = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if isinstance(raw, dict) and "config" in raw and "config_hash" in raw:
        cfg = parse_config(raw["config"])
        if config_hash(cfg) != raw["config_hash"]:
            raise ConfigError(f"{path}: config hash mismatch")
        return cfg
    return parse_config(raw)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x)}")


def _manifest(cfg: RunConfig, seed: int, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": to_dict(cfg), "config_hash": config_hash(cfg),
            "seed": seed, **extra}


# ---------------------------------------------------------------------------
# commands


def dry_run(cfg: RunConfig, command: str) -> dict:
    sim = make_simulator(cfg.task, **cfg.simulator)
    rng = stream(cfg.run_seeds()[0], "cli", 0)
    theta = sim.prior.sample(rng, 1)
    xi = None if sim.xi_dim == 0 else (0.5 * (sim.low + sim.high))[None, :]
    y = sim.simulate(theta, xi, rng)
    print(json.dumps(to_dict(cfg), indent=2, sort_keys=True))
    print(f"smoke sample: theta={theta[0].tolist()} xi={None if xi is None else xi[0].tolist()} y={y[0].tolist()}")
    return {"theta": theta[0], "y": y[0]}


def _sweep_seed(cfg: RunConfig, seed: int) -> dict:
    out = _run_dir(cfg, "mi-sweep", seed)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for L in cfg.sweep.L:
        for lam in cfg.sweep.lam:
            res = sweep_cell(cfg, L, lam, seed)
            cdir = out / f"L{L}_lam{lam:g}"
            cdir.mkdir(exist_ok=True)
            res["record"].write_csv(cdir / METRICS)
            with open(cdir / "validation.csv", "w", newline="") as fh:
                cols = ["step", "val_loglik", "val_loglik_se", "heldout_mi", "heldout_mi_se", "train_eig"]
                w = csv.writer(fh)
                w.writerow(cols)
                for row in res["curve"]:
                    w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])
            final = res["final"] or {}
            cells.append({"L": L, "lam": lam, "dir": cdir.name, "final_val_loglik": final.get("val_loglik"),
                          "final_heldout_mi": final.get("heldout_mi"), "eig_star": res["checkpoint"].eig_star})
    _write_json(out / MANIFEST, _manifest(cfg, seed, "mi-sweep", cells=cells))
    return {"seed": seed, "dir": str(out), "cells": cells}


def cmd_mi_sweep(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    if cfg.task not in ("two-moons", "gauss-oracle"):
        raise ConfigError("mi-sweep supports the two-moons and gauss-oracle tasks")
    return _map_seeds(_sweep_seed, cfg, jobs)


def _boed_seed(cfg: RunConfig, seed: int) -> dict:
    out = _run_dir(cfg, "boed", seed)
    out.mkdir(parents=True, exist_ok=True)
    sim = make_simulator(cfg.task, **cfg.simulator)
    ck_files = []

    def on_round(t, ck, ck_flow, post):
        name = f"checkpoint_{ck.step}.bin"
        save_checkpoint(out / name, ck_flow, step=ck.step, seed=seed)
        ck_files.append(name)

    rep = run_sbi_boed(sim, cfg, seed, on_round=on_round)
    rep.record.write_csv(out / METRICS)
    rep.record.write_timing(out / "timing.csv")
    write_posterior_csv(out / POSTERIOR, rep.posterior)
    last = rep.record.steps[-1]["step"] if rep.record.steps else 0
    final_name = f"checkpoint_{last}.bin"
    save_checkpoint(out / final_name, rep.flow, step=last, seed=seed)
    rounds = [dict(r, checkpoint_file=f) for r, f in zip(rep.rounds, ck_files)]
    rounds[-1]["median_distance"] = rep.median_distance
    if cfg.sbc.trials > 0:
        curve = _coverage(cfg, rep.flow, sim, rep.history[-1][0], seed)
        write_coverage_csv(out / COVERAGE, curve)
    _write_json(out / MANIFEST, _manifest(cfg, seed, "boed", rounds=rounds, final_flow=final_name,
                                          eig_star=[r["eig_star"] for r in rep.rounds],
                                          median_distance=rep.median_distance))
    return {"seed": seed, "dir": str(out), "rounds": rounds}


def _coverage(cfg: RunConfig, flow, sim, design, seed):
    post = surrogate_posterior(flow, sim.prior, cfg.mcmc, draws=cfg.sbc.posterior_draws)
    return sbc_coverage(post, sim, cfg.sbc.trials, seed=seed, levels=cfg.sbc.levels, design=design,
                        allow_small=True)


def cmd_boed(cfg: RunConfig, jobs: int = 1) -> dict:
    if cfg.task not in ("linear", "sir", "gauss-oracle"):
        raise ConfigError("boed supports the linear, sir and gauss-oracle tasks")
    results = _map_seeds(_boed_seed, cfg, jobs)
    table = eig_report([r["rounds"] for r in results])
    summary = {"task": cfg.task, "config_hash": config_hash(cfg), "seeds": [r["seed"] for r in results],
               "estimator": "checkpoint-design contrastive bound (nats)", "table": table}
    root = output_root(cfg) / (cfg.name or f"{cfg.task}-boed")
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "summary.json", summary)
    return summary


def _map_seeds(fn, cfg: RunConfig, jobs: int):
    seeds = cfg.run_seeds()
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as ex:
            return list(ex.map(fn, [cfg] * len(seeds), seeds))
    return [fn(cfg, s) for s in seeds]


def cmd_diagnose(run_dirs: list[Path], out: Path | None = None) -> dict:
    """Coverage, R-hat and EIG-vs-step tables for completed runs."""
    results = {}
    for d in run_dirs:
        d = Path(d)
        if d.is_file():
            d = d.parent
        missing = [n for n in (MANIFEST, METRICS, POSTERIOR) if not (d / n).exists()]
        if missing:
            raise MissingArtifacts(f"{d}: missing " + ", ".join(missing))
        manifest = json.loads((d / MANIFEST).read_text())
        cfg = parse_config(manifest["config"])
        ddir = d / "diagnostics"
        ddir.mkdir(exist_ok=True)
        rec = RunRecord.read_csv(d / METRICS)
        cols = ["step", "round", "eig", "eig_star", "sigma"] + [f"mu_{j}" for j in range(rec.xi_dim)]
        with open(ddir / "eig_vs_step.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rec.steps:
                w.writerow([r[c] if isinstance(r[c], int) else repr(r[c]) for c in cols])
        samples = read_posterior_csv(d / POSTERIOR)
        with open(d / POSTERIOR, newline="") as fh:
            chain = np.array([int(row["chain"]) for row in csv.DictReader(fh)])
        n_chain = chain.max() + 1
        per = samples.reshape(n_chain, -1, samples.shape[1])
        rhat = split_rhat(per)
        with open(ddir / "rhat.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dim", "rhat"])
            for j, r in enumerate(rhat):
                w.writerow([j, repr(float(r))])
        sim = make_simulator(cfg.task, **cfg.simulator)
        flow, _ = load_checkpoint(d / manifest["final_flow"])
        design = np.asarray(manifest["rounds"][-1]["xi_star"], dtype=np.float64)
        if cfg.sbc.trials <= 0:
            cfg = dataclasses.replace(cfg, sbc=dataclasses.replace(cfg.sbc, trials=100))
        curve = _coverage(cfg, flow, sim, design, manifest["seed"])
        write_coverage_csv(ddir / COVERAGE, curve)
        lo, hi = curve.band()
        results[str(d)] = {"coverage": curve.coverage.tolist(), "inside_band": bool(curve.inside_band().all()),
                           "rhat": rhat.tolist(), "band": [lo.tolist(), hi.tolist()]}
    if len(run_dirs) > 1:
        target = Path(out) if out else Path(run_dirs[0]).resolve().parent
        target.mkdir(parents=True, exist_ok=True)
        recs = [RunRecord.read_csv(Path(d) / METRICS) for d in run_dirs]
        n = max(len(r.steps) for r in recs)
        with open(target / "comparison_eig.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [f"eig_{i}" for i in range(len(recs))] + [f"eig_star_{i}" for i in range(len(recs))])
            for k in range(n):
                vals = [repr(r.steps[k]["eig"]) if k < len(r.steps) else "" for r in recs]
                best = [repr(r.steps[k]["eig_star"]) if k < len(r.steps) else "" for r in recs]
                w.writerow([k] + vals + best)
    return results


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infodesign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("mi-sweep", "boed", "diagnose"):
        s = sub.add_parser(name)
        if name == "diagnose":
            s.add_argument("--config", nargs="+", required=True,
                           help="run directories (or their run_manifest.json) to diagnose")
            s.add_argument("--out", default=None, help="where to write the side-by-side comparison")
        else:
            s.add_argument("--config", required=True, help="JSON run config or a run manifest")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--dry-run", action="store_true")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        if args.command == "diagnose":
            res = cmd_diagnose([Path(c) for c in args.config], args.out)
            print(json.dumps(res, indent=2))
            return 0
        cfg = _read_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed, seeds=[])
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.dry_run:
            dry_run(cfg, args.command)
            return 0
        if args.command == "mi-sweep":
            res = cmd_mi_sweep(cfg, args.jobs)
        else:
            res = cmd_boed(cfg, args.jobs)
        print(json.dumps(res, indent=2, default=_jsonable))
        log.info("done in %.1fs", time.perf_counter() - t0)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime-failure exit code
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
