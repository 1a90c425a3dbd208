"""Command-line harness for the experiment suite.

Commands:
  run             execute a JSON experiment config (targets x samplers x seeds)
  bench-synthetic built-in synthetic comparison table (exponential mixture and
                  Gaussian grid, plain vs repulsive Langevin)
  vis-funnel      refined-guide training traces on the funnel for 0/1/2
                  refinement steps
  bnn             Bayesian neural-network regression report for one
                  dataset/sampler

Every artifact embeds a schema version.  Runs are reproducible byte-for-byte
given (config, seed); wall-clock timing is therefore written as zero unless
``--timing wall`` is requested, in which case reports carry real
(non-reproducible) measurements.

Exit codes: 0 ok, 2 config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import bnn as bnn_mod
from . import refine, samplers, targets
from .errors import ConfigError, DivergenceError
from .kernels import KernelConfig

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "STEINMC_OUT"
BENCH_HEADER = "distribution,sampler,seed,ess,ess_per_s,err_ex,err_ex2"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_atomic(path: Path, text: str) -> None:
    """Write via a temp file in the same directory plus rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# experiment config schema

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "target", "samplers", "iterations", "collection", "seeds"],
    "properties": {
        "schema_version": {"const": 1},
        "target": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": sorted(targets.BUILTIN_TARGETS)},
                "params": {"type": "object"},
            },
        },
        "samplers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"enum": list(samplers.SAMPLER_KINDS)},
                    "particles": {"type": "integer", "minimum": 1},
                    "step_size": {"type": "number", "exclusiveMinimum": 0},
                    "schedule": {"enum": ["constant", "robbins_monro"]},
                    "gamma": {"type": "number"},
                    "beta1": {"type": "number"},
                    "beta2": {"type": "number"},
                    "stabilizer": {"type": "number"},
                    "repulsion_cutoff": {"type": ["integer", "null"]},
                    "kernel": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "bandwidth": {"type": "number"},
                            "bandwidth_mode": {"enum": ["fixed", "median"]},
                            "jitter": {"type": "number", "minimum": 0},
                        },
                    },
                },
            },
        },
        "iterations": {"type": "integer", "minimum": 1},
        "collection": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "burn_in": {"type": "integer", "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
            },
        },
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mean": {"type": ["number", "array"]},
                "std": {"type": ["number", "array"]},
            },
        },
        "seeds": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "integer", "minimum": 0},
        },
        "output_dir": {"type": "string"},
    },
}


def validate_config(payload: dict) -> dict:
    import jsonschema

    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(payload), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(first.message, field=first.json_path)
    return payload


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", field="config")
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON at line {err.lineno}: {err.msg}", field="config")
    return validate_config(payload)


def _build_target(spec: dict):
    params = dict(spec.get("params", {}))
    try:
        return targets.make_target(spec["name"], **params)
    except TypeError as err:
        raise ConfigError(str(err), field="target.params")


def _run_single(target_spec, sampler_spec, common, seed, timing: str):
    """One (sampler, seed) run; returns (report dict, trajectory CSV text)."""
    target = _build_target(target_spec)
    kind = sampler_spec["name"]
    kcfg = KernelConfig(**sampler_spec.get("kernel", {}))
    schedule = samplers.StepSchedule(
        kind=sampler_spec.get("schedule", "constant"),
        eps0=sampler_spec.get("step_size", 1e-3),
        gamma=sampler_spec.get("gamma", 0.55),
    )
    policy = samplers.CollectionPolicy(
        burn_in=common["collection"].get("burn_in", 0),
        thin=common["collection"].get("thin", 1),
    )
    init = common.get("init", {})
    result = samplers.run(
        kind,
        target,
        n_particles=sampler_spec.get("particles", 10),
        iterations=common["iterations"],
        schedule=schedule,
        policy=policy,
        seed=seed,
        init_mean=init.get("mean", 0.0),
        init_std=init.get("std", 1.0),
        kernel_cfg=kcfg,
        beta1=sampler_spec.get("beta1", 0.9),
        beta2=sampler_spec.get("beta2", 0.999),
        stabilizer=sampler_spec.get("stabilizer", 1e-8),
        repulsion_cutoff=sampler_spec.get("repulsion_cutoff"),
    )
    report = result.report
    if timing != "wall":
        report.wall_clock = 0.0
        report.ess_per_second = 0.0

    lines = [f"# schema_version={SCHEMA_VERSION}"]
    dim = result.per_particle.shape[2]
    header = "iteration,particle," + ",".join(f"z{j+1}" for j in range(dim))
    lines.append(header)
    n_events = result.per_particle.shape[1]
    for e in range(n_events):
        iteration = policy.burn_in + (e + 1) * policy.thin
        for p in range(result.per_particle.shape[0]):
            coords = ",".join(_fmt(v) for v in result.per_particle[p, e])
            lines.append(f"{iteration},{p},{coords}")
    return report.to_dict(), "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_out(args, config.get("output_dir"))
    seeds = _resolve_seeds(args, config["seeds"])
    common = {
        "iterations": config["iterations"],
        "collection": config.get("collection", {}),
        "init": config.get("init", {}),
    }
    chash = config_hash(config)

    jobs = [(spec, seed) for spec in config["samplers"] for seed in seeds]

    def job(spec_seed):
        spec, seed = spec_seed
        report, csv_text = _run_single(config["target"], spec, common, seed, args.timing)
        report["config_hash"] = chash
        return spec["name"], seed, report, csv_text

    results = _map_jobs(job, jobs, args.threads)
    tname = config["target"]["name"]
    for name, seed, report, csv_text in results:
        stem = f"{tname}_{name}_seed{seed}"
        write_atomic(out_dir / f"{stem}.report.json", dump_json(report))
        write_atomic(out_dir / f"{stem}.trajectory.csv", csv_text)
    print(f"wrote {2 * len(results)} artifacts to {out_dir}")
    return EXIT_OK


# built-in synthetic comparison protocol: 500 burn-in + 500 sampling
# iterations, thinned by 10; 10 particles on the exponential mixture and 20 on
# the Gaussian grid.  The repulsive sampler's step is scaled by L so its
# per-particle drift and noise match the plain sampler's when the particles do
# not interact.
BENCH_PROTOCOL = {
    "moe": {"particles": 10, "per_particle_step": 0.1, "init_std": 1.0},
    "mog": {"particles": 20, "per_particle_step": 0.005, "init_std": 0.5},
}
BENCH_ITERATIONS = 1000
BENCH_POLICY = {"burn_in": 500, "thin": 10}


def bench_rows(seeds, timing: str = "off", threads: int = 1):
    jobs = []
    for dist, proto in BENCH_PROTOCOL.items():
        for kind in ("sgld", "repulsive_sgld"):
            for seed in seeds:
                jobs.append((dist, kind, seed, proto))

    def job(item):
        dist, kind, seed, proto = item
        target = targets.make_target(dist)
        eps = proto["per_particle_step"]
        if kind == "repulsive_sgld":
            eps = eps * proto["particles"]
        result = samplers.run(
            kind,
            target,
            n_particles=proto["particles"],
            iterations=BENCH_ITERATIONS,
            schedule=samplers.StepSchedule(kind="constant", eps0=eps),
            policy=samplers.CollectionPolicy(**BENCH_POLICY),
            seed=seed,
            init_std=proto["init_std"],
        )
        report = result.report
        errs = dict(report.moment_errors)
        ess_per_s = report.ess_per_second if timing == "wall" else 0.0
        return (
            dist,
            kind,
            seed,
            report.ess,
            ess_per_s,
            errs["mean"],
            errs["second_moment"],
        )

    return _map_jobs(job, jobs, threads)


def cmd_bench_synthetic(args) -> int:
    out_dir = _resolve_out(args, None)
    seeds = _resolve_seeds(args, [0, 1, 2, 3, 4])
    rows = bench_rows(seeds, timing=args.timing, threads=args.threads)
    lines = [f"# schema_version={SCHEMA_VERSION}", BENCH_HEADER]
    for dist, kind, seed, ess, ess_s, e1, e2 in rows:
        lines.append(
            f"{dist},{kind},{seed},{_fmt(ess)},{_fmt(ess_s)},{_fmt(e1)},{_fmt(e2)}"
        )
    write_atomic(out_dir / "bench_synthetic.csv", "\n".join(lines) + "\n")
    print(f"wrote {out_dir / 'bench_synthetic.csv'}")
    return EXIT_OK


# funnel protocol: diagonal guide trained for 50 outer iterations per
# refinement depth, Langevin inner steps, endpoint-particle entropy.
# Per-iteration losses are single Monte-Carlo estimates; per-seed finals
# scatter noticeably, so comparisons across refinement depths use seed
# medians.
FUNNEL_OUTER_ITERATIONS = 50
FUNNEL_SAMPLES = 64
FUNNEL_LEARNING_RATE = 0.08
FUNNEL_INIT_LOG_ETA = float(np.log(0.05))


def funnel_trace(steps_refine: int, seed: int):
    target = targets.funnel()
    rg = refine.RefinedGuide(
        guide=refine.DiagonalGaussianGuide(np.zeros(2), np.zeros(2)),
        inner_sampler="sgld",
        log_eta=FUNNEL_INIT_LOG_ETA,
        steps_refine=steps_refine,
        steps_infer=0,
        entropy_mode="dirac",
        ad_mode="full",
    )
    result = refine.optimize(
        rg,
        target,
        FUNNEL_OUTER_ITERATIONS,
        np.random.default_rng(seed),
        n_samples=FUNNEL_SAMPLES,
        learning_rate=FUNNEL_LEARNING_RATE,
    )
    return result


def cmd_vis_funnel(args) -> int:
    out_dir = _resolve_out(args, None)
    seeds = _resolve_seeds(args, list(range(10)))

    jobs = [(t, seed) for t in (0, 1, 2) for seed in seeds]
    results = _map_jobs(lambda ts: (ts, funnel_trace(*ts)), jobs, args.threads)
    by_t: dict[int, list] = {0: [], 1: [], 2: []}
    for (t, seed), result in results:
        by_t[t].append((seed, result))

    learned = {}
    for t, runs in by_t.items():
        lines = [f"# schema_version={SCHEMA_VERSION}", "seed,iteration,neg_elbo"]
        for seed, result in runs:
            for i, loss in enumerate(result.loss_trace):
                lines.append(f"{seed},{i},{_fmt(loss)}")
        write_atomic(out_dir / f"vis_funnel_T{t}.csv", "\n".join(lines) + "\n")
        learned[str(t)] = {
            str(seed): {
                "mean": [float(v) for v in result.guide.guide.mean],
                "scale": [float(v) for v in result.guide.guide.scale],
                "eta": result.guide.eta,
                "final_neg_elbo": float(result.loss_trace[-1]),
            }
            for seed, result in runs
        }
    payload = {"schema_version": SCHEMA_VERSION, "learned": learned}
    write_atomic(out_dir / "vis_funnel_params.json", dump_json(payload))
    print(f"wrote traces and parameters to {out_dir}")
    return EXIT_OK


BNN_PROTOCOL = {
    "particles": 20,
    "iterations": 2000,
    "batch_size": 100,
    "step_size": 1e-4,
    "burn_in": 1000,
    "thin": 10,
}


def bnn_report(
    dataset: bnn_mod.RegressionDataset, sampler: str, seed: int, protocol=None
) -> dict:
    proto = dict(BNN_PROTOCOL)
    if protocol:
        proto.update(protocol)
    potential = bnn_mod.BnnPotential(input_dim=dataset.n_features)
    target = bnn_mod.BnnTarget.create(potential, dataset, proto["batch_size"])

    rng = np.random.default_rng(seed)
    ensemble = samplers.ParticleEnsemble(potential.init_particles(proto["particles"], rng))
    kcfg = KernelConfig()
    eps = proto["step_size"]
    if sampler == "repulsive_sgld":
        eps = eps * proto["particles"]

    kept = []
    for t in range(proto["iterations"]):
        target.resample_batch(rng)
        if sampler == "sgld":
            ensemble = samplers.sgld_step(ensemble, target, eps, rng)
        elif sampler == "repulsive_sgld":
            ensemble = samplers.repulsive_sgld_step(ensemble, target, kcfg, eps, rng)
        else:
            raise ConfigError(f"unsupported sampler {sampler!r}", field="sampler")
        if t + 1 > proto["burn_in"] and (t + 1 - proto["burn_in"]) % proto["thin"] == 0:
            kept.append(ensemble.positions.copy())

    particles = np.concatenate(kept, axis=0) if kept else ensemble.positions
    metrics = bnn_mod.evaluate(potential, particles, dataset)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "dataset": dataset.name,
        "sampler": sampler,
        "seed": seed,
        "rmse": metrics["rmse"],
        "test_ll": metrics["test_ll"],
        "config": {
            **proto,
            "hidden_dim": potential.hidden_dim,
            "prior_std": potential.prior_std,
            "noise_std": potential.noise_std,
            "split_seed": dataset.split_seed,
        },
    }
    payload["config_hash"] = config_hash(payload["config"])
    return payload


def cmd_bnn(args) -> int:
    out_dir = _resolve_out(args, None)
    seeds = _resolve_seeds(args, [0])
    try:
        dataset = bnn_mod.load_csv(args.data, args.target_column, seed=args.split_seed)
    except (OSError, ValueError) as err:
        raise ConfigError(str(err), field="data")
    results = _map_jobs(
        lambda seed: (seed, bnn_report(dataset, args.sampler, seed)), seeds, args.threads
    )
    for seed, payload in results:
        name = f"bnn_{dataset.name}_{args.sampler}_seed{seed}.json"
        write_atomic(out_dir / name, dump_json(payload))
    print(f"wrote {len(results)} reports to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _map_jobs(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _resolve_seeds(args, default):
    if args.seed is None:
        return list(default)
    try:
        seeds = [int(s) for s in args.seed.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"seeds must be integers: {args.seed!r}", field="seed")
    if not seeds:
        raise ConfigError("seed list is empty", field="seed")
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative", field="seed")
    return seeds


def _resolve_out(args, config_dir) -> Path:
    if args.out:
        return Path(args.out)
    if config_dir:
        return Path(config_dir)
    return Path(os.environ.get(OUTPUT_DIR_ENV, "steinmc-out"))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", help="comma-separated seed list", default=None)
    p.add_argument("--out", help="output directory", default=None)
    p.add_argument("--threads", type=int, default=1, help="parallel (seed, sampler) jobs")
    p.add_argument(
        "--timing",
        choices=("off", "wall"),
        default="off",
        help="off: zeroed timing fields, byte-reproducible artifacts; "
        "wall: real wall-clock measurements",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steinmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench-synthetic", help="synthetic comparison table")
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench_synthetic)

    p_vis = sub.add_parser("vis-funnel", help="refined-guide funnel traces")
    _add_common(p_vis)
    p_vis.set_defaults(func=cmd_vis_funnel)

    p_bnn = sub.add_parser("bnn", help="Bayesian neural-network regression report")
    p_bnn.add_argument("--data", required=True, help="CSV with header row")
    p_bnn.add_argument("--target-column", required=True)
    p_bnn.add_argument(
        "--sampler", choices=("sgld", "repulsive_sgld"), default="repulsive_sgld"
    )
    p_bnn.add_argument("--split-seed", type=int, default=0)
    _add_common(p_bnn)
    p_bnn.set_defaults(func=cmd_bnn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
